use std::collections::{BTreeSet, HashMap};

use super::{CommPlan, PlacementLayout, Region, StepDetail};
use crate::strategy::DeviceId;

/// Tracks, per device and per cell of a grid refined by every region boundary,
/// the set of partial contributions (as a bit mask) the device holds.
struct Cells {
    cuts: Vec<Vec<u64>>,
    state: HashMap<(DeviceId, usize), u128>,
}

impl Cells {
    fn new(extents: &[u64], regions: &[&Region]) -> Self {
        let mut cuts: Vec<BTreeSet<u64>> =
            extents.iter().map(|&e| BTreeSet::from([0, e])).collect();
        for r in regions {
            for (d, &(a, b)) in r.0.iter().enumerate() {
                if d < cuts.len() {
                    cuts[d].insert(a.min(extents[d]));
                    cuts[d].insert(b.min(extents[d]));
                }
            }
        }
        Cells {
            cuts: cuts.into_iter().map(|s| s.into_iter().collect()).collect(),
            state: HashMap::new(),
        }
    }

    fn cells(&self, r: &Region) -> Vec<usize> {
        let mut out = vec![0usize];
        for (d, cuts) in self.cuts.iter().enumerate() {
            let (a, b) = r.0[d];
            let span = cuts.len() - 1;
            let idx: Vec<usize> = (0..span)
                .filter(|&i| cuts[i] >= a && cuts[i + 1] <= b)
                .collect();
            out = out
                .iter()
                .flat_map(|&base| idx.iter().map(move |&i| base * span + i))
                .collect();
        }
        out
    }

    fn get(&self, d: DeviceId, c: usize) -> u128 {
        self.state.get(&(d, c)).copied().unwrap_or(0)
    }

    fn set(&mut self, d: DeviceId, c: usize, m: u128) {
        self.state.insert((d, c), m);
    }
}

fn regions_of(plan: &CommPlan) -> Vec<&Region> {
    let mut v = Vec::new();
    for s in &plan.steps {
        match &s.detail {
            StepDetail::AllReduce { region }
            | StepDetail::Broadcast { region, .. }
            | StepDetail::SendRecv { region } => v.push(region),
            StepDetail::ReduceScatter { region, chunks } => {
                v.push(region);
                v.extend(chunks);
            }
            StepDetail::AllGather { pieces } => v.extend(pieces),
            StepDetail::AllToAll { sends } => v.extend(sends.iter().map(|(_, _, r)| r)),
        }
    }
    v
}

/// Replays the plan's element movement and checks the result against `dst`.
///
/// A cell is complete on a device when it carries every partial contribution.
/// Reductions must combine disjoint, non-empty contribution sets (no double
/// counting); movement steps may only move complete cells. Destination
/// holdings must all be present at the end; extra copies are tolerated.
pub fn verify_plan(src: &PlacementLayout, dst: &PlacementLayout, plan: &CommPlan) -> bool {
    if src.extents != dst.extents || src.partial_keys > 128 {
        return false;
    }
    let nd = src.extents.len();
    let mut all: Vec<&Region> = src
        .holdings
        .iter()
        .chain(&dst.holdings)
        .map(|h| &h.region)
        .collect();
    let extra = regions_of(plan);
    if extra.iter().any(|r| r.0.len() != nd) || all.iter().any(|r| r.0.len() != nd) {
        return false;
    }
    all.extend(extra);
    let mut g = Cells::new(&src.extents, &all);
    let full: u128 = if src.partial_keys == 128 {
        u128::MAX
    } else {
        (1u128 << src.partial_keys) - 1
    };
    for h in &src.holdings {
        let m = h.partial.map_or(full, |k| 1u128 << k);
        for c in g.cells(&h.region) {
            let cur = g.get(h.device, c);
            g.set(h.device, c, cur | m);
        }
    }
    for s in &plan.steps {
        let distinct: BTreeSet<DeviceId> = s.group.iter().copied().collect();
        if distinct.len() != s.group.len() || s.group.len() < 2 {
            return false;
        }
        let complete =
            |g: &Cells, d: DeviceId, r: &Region| g.cells(r).iter().all(|&c| g.get(d, c) == full);
        match &s.detail {
            StepDetail::AllReduce { region } => {
                for c in g.cells(region) {
                    let Some(u) = disjoint_union(&g, &s.group, c) else {
                        return false;
                    };
                    for &d in &s.group {
                        g.set(d, c, u);
                    }
                }
            }
            StepDetail::ReduceScatter { region, chunks } => {
                if chunks.len() != s.group.len() {
                    return false;
                }
                let vol: u64 = chunks.iter().map(|c| c.volume()).sum();
                let inside = chunks.iter().all(|c| region.contains(c));
                let disjoint = (0..chunks.len()).all(|i| {
                    (i + 1..chunks.len()).all(|j| chunks[i].intersect(&chunks[j]).is_none())
                });
                if !inside || !disjoint || vol != region.volume() {
                    return false;
                }
                let owner: HashMap<usize, usize> = chunks
                    .iter()
                    .enumerate()
                    .flat_map(|(i, ch)| g.cells(ch).into_iter().map(move |c| (c, i)))
                    .collect();
                for c in g.cells(region) {
                    let Some(u) = disjoint_union(&g, &s.group, c) else {
                        return false;
                    };
                    for (i, &d) in s.group.iter().enumerate() {
                        g.set(d, c, if owner.get(&c) == Some(&i) { u } else { 0 });
                    }
                }
            }
            StepDetail::AllGather { pieces } => {
                if pieces.len() != s.group.len() {
                    return false;
                }
                for (i, p) in pieces.iter().enumerate() {
                    if !complete(&g, s.group[i], p) {
                        return false;
                    }
                }
                for p in pieces {
                    for c in g.cells(p) {
                        for &d in &s.group {
                            g.set(d, c, full);
                        }
                    }
                }
            }
            StepDetail::AllToAll { sends } => {
                for (i, _, r) in sends {
                    if *i >= s.group.len() || !complete(&g, s.group[*i], r) {
                        return false;
                    }
                }
                for (_, j, r) in sends {
                    let Some(&d) = s.group.get(*j) else {
                        return false;
                    };
                    for c in g.cells(r) {
                        g.set(d, c, full);
                    }
                }
            }
            StepDetail::Broadcast { root, region } => {
                if !s.group.contains(root) || !complete(&g, *root, region) {
                    return false;
                }
                for c in g.cells(region) {
                    for &d in &s.group {
                        g.set(d, c, full);
                    }
                }
            }
            StepDetail::SendRecv { region } => {
                if s.group.len() != 2 || !complete(&g, s.group[0], region) {
                    return false;
                }
                for c in g.cells(region) {
                    g.set(s.group[1], c, full);
                }
            }
        }
    }
    dst.holdings.iter().all(|h| {
        let want = h.partial.map_or(full, |k| 1u128 << k);
        g.cells(&h.region)
            .iter()
            .all(|&c| g.get(h.device, c) == want)
    })
}

fn disjoint_union(g: &Cells, group: &[DeviceId], c: usize) -> Option<u128> {
    let mut u = 0u128;
    for &d in group {
        let m = g.get(d, c);
        if m == 0 || u & m != 0 {
            return None;
        }
        u |= m;
    }
    Some(u)
}
