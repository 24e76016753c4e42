use std::collections::{BTreeMap, BTreeSet};

use super::{
    subtract_all, verify_plan, CommPlan, CommStep, Holding, PlacementLayout, Primitive, Region,
    StepDetail, TransformError,
};
use crate::strategy::DeviceId;

/// Infers the plan turning `src` into `dst`.
///
/// Partial regions are reduced first (reduce-scatter when the destination
/// tiles the region across the reducing group, all-reduce otherwise). The
/// complete data is then redistributed by the first matching pattern:
/// all-gather, all-to-all, broadcast, and finally point-to-point sends of
/// exactly the missing boxes.
pub fn infer_transform(
    src: &PlacementLayout,
    dst: &PlacementLayout,
) -> Result<CommPlan, TransformError> {
    if src.extents != dst.extents || src.elem_bytes != dst.elem_bytes {
        return Err(TransformError::Mismatch);
    }
    if src.holdings == dst.holdings {
        return Ok(CommPlan::default());
    }
    if dst.has_partial() {
        return Err(TransformError::PartialDestination);
    }
    let mut steps = Vec::new();
    let mut complete: Vec<Holding> = src
        .holdings
        .iter()
        .filter(|h| h.partial.is_none())
        .cloned()
        .collect();

    let mut partial: BTreeMap<Region, BTreeMap<u32, Vec<DeviceId>>> = BTreeMap::new();
    for h in src.holdings.iter().filter(|h| h.partial.is_some()) {
        partial
            .entry(h.region.clone())
            .or_default()
            .entry(h.partial.unwrap())
            .or_default()
            .push(h.device);
    }
    for (region, by_key) in &partial {
        let r = by_key.values().map(|v| v.len()).min().unwrap_or(0);
        if by_key.len() != src.partial_keys as usize || by_key.values().any(|v| v.len() != r) {
            return Err(TransformError::Unbalanced(region.clone()));
        }
        for j in 0..r {
            let group: Vec<DeviceId> = by_key.values().map(|v| v[j]).collect();
            let bytes = src.bytes(region);
            match scatter_chunks(dst, region, &group) {
                Some(chunks) => {
                    for (d, c) in group.iter().zip(&chunks) {
                        complete.push(Holding {
                            device: *d,
                            region: c.clone(),
                            partial: None,
                        });
                    }
                    steps.push(CommStep {
                        primitive: Primitive::ReduceScatter,
                        group,
                        bytes,
                        stage: 0,
                        detail: StepDetail::ReduceScatter {
                            region: region.clone(),
                            chunks,
                        },
                    });
                }
                None => {
                    for &d in &group {
                        complete.push(Holding {
                            device: d,
                            region: region.clone(),
                            partial: None,
                        });
                    }
                    steps.push(CommStep {
                        primitive: Primitive::AllReduce,
                        group,
                        bytes,
                        stage: 0,
                        detail: StepDetail::AllReduce {
                            region: region.clone(),
                        },
                    });
                }
            }
        }
    }
    complete.sort();
    complete.dedup();
    let stage = u32::from(!steps.is_empty());
    let missing = missing_boxes(&complete, dst);
    if !missing.is_empty() {
        let mut more = all_gather(&complete, dst, &missing)
            .or_else(|| all_to_all(&complete, dst))
            .or_else(|| broadcast(&complete, dst, &missing))
            .map_or_else(|| send_recv(&complete, dst, &missing), Ok)?;
        for s in &mut more {
            s.stage = stage;
        }
        steps.extend(more);
    }
    let plan = CommPlan { steps };
    debug_assert!(
        verify_plan(src, dst, &plan),
        "inferred plan failed verification"
    );
    Ok(plan)
}

/// Reduce-scatter chunks when each member's destination holding cuts a
/// distinct piece out of `region` and the pieces tile it.
fn scatter_chunks(
    dst: &PlacementLayout,
    region: &Region,
    group: &[DeviceId],
) -> Option<Vec<Region>> {
    if group.len() < 2 {
        return None;
    }
    let mut chunks = Vec::with_capacity(group.len());
    for &d in group {
        let mut hit = dst.on_device(d).filter_map(|h| h.region.intersect(region));
        let c = hit.next()?;
        if hit.next().is_some() {
            return None;
        }
        chunks.push(c);
    }
    let total: u64 = chunks.iter().map(|c| c.volume()).sum();
    let disjoint = (0..chunks.len())
        .all(|i| (i + 1..chunks.len()).all(|j| chunks[i].intersect(&chunks[j]).is_none()));
    (disjoint && total == region.volume()).then_some(chunks)
}

type Missing = BTreeMap<DeviceId, Vec<(Region, Vec<Region>)>>;

/// Per device, each destination region with the boxes the device lacks.
fn missing_boxes(have: &[Holding], dst: &PlacementLayout) -> Missing {
    let mut out: Missing = BTreeMap::new();
    for h in &dst.holdings {
        let mut left = vec![h.region.clone()];
        for m in have.iter().filter(|m| m.device == h.device) {
            left = subtract_all(left, &m.region);
            if left.is_empty() {
                break;
            }
        }
        if !left.is_empty() {
            out.entry(h.device)
                .or_default()
                .push((h.region.clone(), left));
        }
    }
    out
}

fn all_gather(have: &[Holding], dst: &PlacementLayout, missing: &Missing) -> Option<Vec<CommStep>> {
    let mut by_target: BTreeMap<Region, Vec<(DeviceId, Region)>> = BTreeMap::new();
    for (&d, needs) in missing {
        let mut targets = dst.on_device(d);
        let t = targets.next()?;
        if targets.next().is_some() || needs.len() != 1 {
            return None;
        }
        let mut own = have
            .iter()
            .filter(|m| m.device == d)
            .filter_map(|m| m.region.intersect(&t.region));
        let piece = own.next()?;
        if own.next().is_some() {
            return None;
        }
        by_target
            .entry(t.region.clone())
            .or_default()
            .push((d, piece));
    }
    let mut steps = Vec::new();
    for (target, members) in by_target {
        let mut pieces: BTreeMap<Region, Vec<DeviceId>> = BTreeMap::new();
        for (d, p) in members {
            pieces.entry(p).or_default().push(d);
        }
        let keys: Vec<&Region> = pieces.keys().collect();
        let total: u64 = keys.iter().map(|r| r.volume()).sum();
        let disjoint = (0..keys.len())
            .all(|i| (i + 1..keys.len()).all(|j| keys[i].intersect(keys[j]).is_none()));
        let r = pieces.values().next()?.len();
        if keys.len() < 2
            || !disjoint
            || total != target.volume()
            || pieces.values().any(|v| v.len() != r)
        {
            return None;
        }
        for j in 0..r {
            let group: Vec<DeviceId> = pieces.values().map(|v| v[j]).collect();
            let list: Vec<Region> = pieces.keys().cloned().collect();
            steps.push(CommStep {
                primitive: Primitive::AllGather,
                group,
                bytes: dst.bytes(&target),
                stage: 0,
                detail: StepDetail::AllGather { pieces: list },
            });
        }
    }
    Some(steps)
}

fn all_to_all(have: &[Holding], dst: &PlacementLayout) -> Option<Vec<CommStep>> {
    let mut src_box: BTreeMap<DeviceId, &Region> = BTreeMap::new();
    for h in have {
        if src_box.insert(h.device, &h.region).is_some() {
            return None;
        }
    }
    let mut dst_box: BTreeMap<DeviceId, &Region> = BTreeMap::new();
    for h in &dst.holdings {
        if dst_box.insert(h.device, &h.region).is_some() {
            return None;
        }
    }
    let devs: Vec<DeviceId> = src_box.keys().copied().collect();
    if devs.len() < 2 || dst_box.keys().copied().collect::<Vec<_>>() != devs {
        return None;
    }
    let full = Region::full(&dst.extents).volume();
    for boxes in [&src_box, &dst_box] {
        let b: Vec<&&Region> = boxes.values().collect();
        let total: u64 = b.iter().map(|r| r.volume()).sum();
        let disjoint =
            (0..b.len()).all(|i| (i + 1..b.len()).all(|j| b[i].intersect(b[j]).is_none()));
        if !disjoint || total != full {
            return None;
        }
    }
    let mut sends = Vec::new();
    for (i, s) in devs.iter().enumerate() {
        for (j, d) in devs.iter().enumerate() {
            if i != j {
                if let Some(r) = src_box[s].intersect(dst_box[d]) {
                    sends.push((i, j, r));
                }
            }
        }
    }
    let bytes = src_box.values().map(|r| dst.bytes(r)).max().unwrap_or(0);
    Some(vec![CommStep {
        primitive: Primitive::AllToAll,
        group: devs,
        bytes,
        stage: 0,
        detail: StepDetail::AllToAll { sends },
    }])
}

fn broadcast(have: &[Holding], dst: &PlacementLayout, missing: &Missing) -> Option<Vec<CommStep>> {
    let mut receivers: BTreeMap<Region, BTreeSet<DeviceId>> = BTreeMap::new();
    for (&d, needs) in missing {
        for (target, left) in needs {
            if left.len() != 1 || &left[0] != target {
                return None;
            }
            receivers.entry(target.clone()).or_default().insert(d);
        }
    }
    let mut steps = Vec::new();
    for (target, recv) in receivers {
        let root = have
            .iter()
            .filter(|h| h.region.contains(&target))
            .map(|h| h.device)
            .min()?;
        let bytes = dst.bytes(&target);
        let mut group = vec![root];
        group.extend(recv.iter().copied());
        let step = if recv.len() >= 2 {
            CommStep {
                primitive: Primitive::Broadcast,
                group,
                bytes,
                stage: 0,
                detail: StepDetail::Broadcast {
                    root,
                    region: target,
                },
            }
        } else {
            CommStep {
                primitive: Primitive::SendRecv,
                group,
                bytes,
                stage: 0,
                detail: StepDetail::SendRecv { region: target },
            }
        };
        steps.push(step);
    }
    Some(steps)
}

fn send_recv(
    have: &[Holding],
    dst: &PlacementLayout,
    missing: &Missing,
) -> Result<Vec<CommStep>, TransformError> {
    let mut steps = Vec::new();
    for (&d, needs) in missing {
        for (_, left) in needs {
            for b in left {
                let mut rest = vec![b.clone()];
                for h in have.iter().filter(|h| h.device != d) {
                    let mut next = Vec::new();
                    for piece in rest {
                        match piece.intersect(&h.region) {
                            Some(x) => {
                                next.extend(piece.subtract(&x));
                                steps.push(CommStep {
                                    primitive: Primitive::SendRecv,
                                    group: vec![h.device, d],
                                    bytes: dst.bytes(&x),
                                    stage: 0,
                                    detail: StepDetail::SendRecv { region: x },
                                });
                            }
                            None => next.push(piece),
                        }
                    }
                    rest = next;
                    if rest.is_empty() {
                        break;
                    }
                }
                if let Some(r) = rest.into_iter().next() {
                    return Err(TransformError::Uncoverable {
                        device: d,
                        region: r,
                    });
                }
            }
        }
    }
    Ok(steps)
}
