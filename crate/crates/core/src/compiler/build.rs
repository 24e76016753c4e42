use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{
    check_acyclic, check_micro_extents, divide_subgraphs, split_operator, CommInfo, ComputeInfo,
    ExecSubgraph, ExecutionGraph, ShardId, ShardKind, StageUnit, SubgraphId, SubgraphPhase, TaskId,
    TaskKind, TaskNode, TensorShard,
};
use crate::cluster::ClusterSpec;
use crate::error::CompileError;
use crate::layout::{
    infer_transform, layout_with_extents, subtract_all, CommStep, Holding, LayoutSource,
    PlacementLayout, Region, StepDetail,
};
use crate::model::{LayerId, ModelGraph, OpId, Phase, TensorId};
use crate::strategy::{DeviceId, NodeId, StrategyTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Version {
    Static,
    Mb(u32),
    Recompute(u32),
}

#[derive(Debug, Clone)]
struct Buf {
    device: DeviceId,
    region: Region,
    partial: Option<u32>,
    shard: ShardId,
    /// Instance that may see this buffer; `None` for everyone.
    scope: Option<SubgraphId>,
}

/// Producer op, device, region and partial-sum key of an unreduced output.
type PendingKey = (OpId, DeviceId, Region, Option<u32>);

/// Every buffer of one tensor version.
struct Store {
    stored: PlacementLayout,
    canonical: HashMap<(DeviceId, Region), ShardId>,
    complete: Vec<Buf>,
    /// Unreduced outputs.
    pending: BTreeMap<PendingKey, ShardId>,
}

type InstKey = (SubgraphPhase, usize, usize, u32);

struct Builder<'a> {
    model: &'a ModelGraph,
    tree: &'a StrategyTree,
    m: u32,
    units: Vec<StageUnit>,
    layer_unit: Vec<usize>,
    layer_block: Vec<usize>,
    /// Per unit, per block: the segment node when recomputation is on.
    blocks: Vec<Vec<Option<NodeId>>>,
    tasks: Vec<TaskNode>,
    shards: Vec<TensorShard>,
    subgraphs: Vec<ExecSubgraph>,
    inst: HashMap<InstKey, SubgraphId>,
    stores: HashMap<(TensorId, Version), Store>,
    seq: HashMap<(TensorId, Version), u32>,
}

/// Compiles a propagated strategy into an execution graph.
pub fn compile(
    model: &ModelGraph,
    tree: &StrategyTree,
    cluster: &ClusterSpec,
) -> Result<ExecutionGraph, CompileError> {
    if !model.backward_derived {
        return Err(CompileError::Invalid(
            "model has no backward pass; derive it first".into(),
        ));
    }
    if let Some(o) = model.ops.iter().find(|o| tree.op_config(o.id).is_none()) {
        return Err(CompileError::Invalid(format!(
            "operator '{}' has no config; propagate first",
            o.name
        )));
    }
    for t in &model.tensors {
        if let Some(c) = tree.tensor_config(t.id) {
            if let Some(d) = c.devices().into_iter().find(|&d| d >= cluster.n_devices()) {
                return Err(CompileError::Invalid(format!(
                    "tensor '{}' is mapped to missing device {d}",
                    t.name
                )));
            }
        } else {
            return Err(CompileError::Invalid(format!(
                "tensor '{}' has no config; propagate first",
                t.name
            )));
        }
    }
    let units = divide_subgraphs(tree, model)?;
    let m = tree.schedule(units[0].schedule_node).n_micro_batch;
    for u in &units {
        let s = tree.schedule(u.schedule_node);
        if s.n_micro_batch != m {
            return Err(CompileError::Invalid(format!(
                "stage '{}' uses {} micro-batches but '{}' uses {m}",
                tree.display_path(u.schedule_node),
                s.n_micro_batch,
                tree.display_path(units[0].schedule_node)
            )));
        }
    }
    check_micro_extents(model, tree, m)?;

    let mut b = Builder::new(model, tree, m, units);
    b.emit()?;
    let mut g = b.finish(cluster);
    wire_control(&mut g, tree);
    check_acyclic(&g.subgraphs)?;
    Ok(g)
}

impl<'a> Builder<'a> {
    fn new(model: &'a ModelGraph, tree: &'a StrategyTree, m: u32, units: Vec<StageUnit>) -> Self {
        let nl = model.layers.len();
        let mut layer_unit = vec![0; nl];
        let mut layer_block = vec![0; nl];
        let mut blocks = Vec::new();
        for u in &units {
            let inside: BTreeSet<NodeId> = u.nodes.iter().flat_map(|&n| subtree(tree, n)).collect();
            let mut segs: Vec<Option<NodeId>> = Vec::new();
            let mut last: Option<Option<NodeId>> = None;
            for &l in &u.layers {
                layer_unit[l] = u.id;
                let leaf = tree.layer_leaf[l];
                let seg = match tree.nodes[leaf].parent {
                    Some(p) if inside.contains(&p) => p,
                    _ => leaf,
                };
                let key = tree.schedule(seg).recomputation.then_some(seg);
                if last != Some(key) {
                    segs.push(key);
                    last = Some(key);
                }
                layer_block[l] = segs.len() - 1;
            }
            blocks.push(segs);
        }
        Builder {
            model,
            tree,
            m,
            units,
            layer_unit,
            layer_block,
            blocks,
            tasks: Vec::new(),
            shards: Vec::new(),
            subgraphs: Vec::new(),
            inst: HashMap::new(),
            stores: HashMap::new(),
            seq: HashMap::new(),
        }
    }

    fn recomputed(&self, layer: LayerId) -> bool {
        self.blocks[self.layer_unit[layer]][self.layer_block[layer]].is_some()
    }

    fn emit(&mut self) -> Result<(), CompileError> {
        // Instances are created up front so ids follow (unit, mb, phase, block).
        for u in 0..self.units.len() {
            let nb = self.blocks[u].len();
            for k in 0..self.m {
                self.instance(SubgraphPhase::Forward, u, 0, k);
                for b in (0..nb).rev() {
                    if self.blocks[u][b].is_some() {
                        self.instance(SubgraphPhase::Recompute, u, b, k);
                    }
                    self.instance(SubgraphPhase::Backward, u, b, k);
                }
            }
        }
        let fwd = self.model.forward_topo();
        let bwd = self.model.backward_topo();
        for k in 0..self.m {
            for &o in &fwd {
                let l = self.model.ops[o].layer;
                let sg = self.inst[&(SubgraphPhase::Forward, self.layer_unit[l], 0, k)];
                self.emit_op(o, sg, SubgraphPhase::Forward, k)?;
            }
        }
        for k in 0..self.m {
            for &o in &fwd {
                let l = self.model.ops[o].layer;
                if self.recomputed(l) {
                    let sg = self.inst[&(
                        SubgraphPhase::Recompute,
                        self.layer_unit[l],
                        self.layer_block[l],
                        k,
                    )];
                    self.emit_op(o, sg, SubgraphPhase::Recompute, k)?;
                }
            }
        }
        for k in 0..self.m {
            for &o in &bwd {
                let l = self.model.ops[o].layer;
                let sg = self.inst[&(
                    SubgraphPhase::Backward,
                    self.layer_unit[l],
                    self.layer_block[l],
                    k,
                )];
                self.emit_op(o, sg, SubgraphPhase::Backward, k)?;
            }
        }
        // Accumulated parameter gradients are synchronized once, after the last micro-batch.
        let mut deferred: Vec<(TensorId, OpId)> = self
            .stores
            .iter()
            .filter(|((t, v), _)| *v == Version::Static && self.model.is_param_grad(*t))
            .flat_map(|((t, _), s)| s.pending.keys().map(move |k| (*t, k.0)))
            .collect();
        deferred.sort();
        deferred.dedup();
        for (t, o) in deferred {
            let l = self.model.ops[o].layer;
            let sg = self.inst[&(
                SubgraphPhase::Backward,
                self.layer_unit[l],
                self.layer_block[l],
                self.m - 1,
            )];
            self.reduce_pending(t, Version::Static, o, sg)?;
        }
        for o in self.model.ops_in_phase(Phase::Optimizer) {
            let l = self.model.ops[o].layer;
            let sg = self.inst[&(
                SubgraphPhase::Backward,
                self.layer_unit[l],
                self.layer_block[l],
                self.m - 1,
            )];
            self.emit_op(o, sg, SubgraphPhase::Backward, self.m - 1)?;
        }
        Ok(())
    }

    fn instance(&mut self, phase: SubgraphPhase, unit: usize, block: usize, k: u32) -> SubgraphId {
        let key = (phase, unit, block, k);
        if let Some(&id) = self.inst.get(&key) {
            return id;
        }
        let u = &self.units[unit];
        let origin = match phase {
            SubgraphPhase::Forward => u.schedule_node,
            _ => self.blocks[unit][block].unwrap_or(u.schedule_node),
        };
        let id = self.subgraphs.len();
        self.subgraphs.push(ExecSubgraph {
            id,
            phase,
            unit,
            origin,
            micro_batch: k,
            block,
            devices: Vec::new(),
            tasks: Vec::new(),
            data_preds: Vec::new(),
            control_preds: Vec::new(),
        });
        self.inst.insert(key, id);
        id
    }

    fn version(
        &self,
        t: TensorId,
        phase: SubgraphPhase,
        k: u32,
        reader_layer: Option<LayerId>,
    ) -> Version {
        if !self.model.is_per_micro_batch(t) {
            return Version::Static;
        }
        match phase {
            SubgraphPhase::Forward => Version::Mb(k),
            SubgraphPhase::Recompute | SubgraphPhase::Backward => {
                let fwd_producer = self.model.tensors[t]
                    .producers
                    .iter()
                    .find(|&&p| self.model.ops[p].phase == Phase::Forward);
                match (fwd_producer, reader_layer) {
                    (Some(&p), Some(rl)) => {
                        let pl = self.model.ops[p].layer;
                        let same = self.layer_unit[pl] == self.layer_unit[rl]
                            && self.layer_block[pl] == self.layer_block[rl]
                            && self.recomputed(pl);
                        if same {
                            Version::Recompute(k)
                        } else {
                            Version::Mb(k)
                        }
                    }
                    _ => Version::Mb(k),
                }
            }
        }
    }

    fn extents(&self, t: TensorId, v: Version) -> Vec<u64> {
        let n = if v == Version::Static {
            1
        } else {
            self.m as u64
        };
        self.model.tensors[t]
            .shape
            .iter()
            .map(|d| self.model.micro_extent(d, n))
            .collect()
    }

    fn store(&mut self, t: TensorId, v: Version) -> &mut Store {
        if !self.stores.contains_key(&(t, v)) {
            let ten = &self.model.tensors[t];
            let cfg = self.tree.tensor_config(t).expect("checked before building");
            let ext = self.extents(t, v);
            let stored = layout_with_extents(ten, &ext, LayoutSource::Memory(cfg));
            let initial = ten.kind.is_persistent()
                || (ten.producers.is_empty() && !self.model.is_param_grad(t));
            let mut s = Store {
                stored: stored.clone(),
                canonical: HashMap::new(),
                complete: Vec::new(),
                pending: BTreeMap::new(),
            };
            if initial {
                let kind = if ten.kind.is_persistent() {
                    ShardKind::Persistent
                } else {
                    ShardKind::Input
                };
                for h in &stored.holdings {
                    let id = push_shard(
                        &mut self.shards,
                        self.model,
                        t,
                        v,
                        h.device,
                        h.region.clone(),
                        None,
                        kind,
                    );
                    s.canonical.insert((h.device, h.region.clone()), id);
                    s.complete.push(Buf {
                        device: h.device,
                        region: h.region.clone(),
                        partial: None,
                        shard: id,
                        scope: None,
                    });
                }
            }
            self.stores.insert((t, v), s);
        }
        self.stores.get_mut(&(t, v)).unwrap()
    }

    /// Kind of a buffer holding finished data in the stored layout.
    fn final_kind(&self, t: TensorId) -> ShardKind {
        let ten = &self.model.tensors[t];
        if ten.kind.is_persistent() {
            ShardKind::Persistent
        } else if self.model.is_param_grad(t) {
            ShardKind::Retained
        } else {
            ShardKind::Transient
        }
    }

    fn canonical(&mut self, t: TensorId, v: Version, d: DeviceId, r: &Region) -> ShardId {
        let kind = self.final_kind(t);
        let s = self.store(t, v);
        if let Some(&id) = s.canonical.get(&(d, r.clone())) {
            return id;
        }
        let id = push_shard(&mut self.shards, self.model, t, v, d, r.clone(), None, kind);
        let s = self.stores.get_mut(&(t, v)).unwrap();
        s.canonical.insert((d, r.clone()), id);
        s.complete.push(Buf {
            device: d,
            region: r.clone(),
            partial: None,
            shard: id,
            scope: None,
        });
        id
    }

    /// Minimal deterministic cover of `r` on `d` by visible complete buffers.
    fn cover(
        &mut self,
        t: TensorId,
        v: Version,
        d: DeviceId,
        r: &Region,
        sg: SubgraphId,
    ) -> Option<Vec<ShardId>> {
        let s = self.store(t, v);
        let mut left = vec![r.clone()];
        let mut out = Vec::new();
        for b in s
            .complete
            .iter()
            .filter(|b| b.device == d && b.scope.is_none_or(|x| x == sg))
        {
            if left.is_empty() {
                break;
            }
            if left.iter().any(|x| x.intersect(&b.region).is_some()) {
                left = subtract_all(left, &b.region);
                out.push(b.shard);
            }
        }
        left.is_empty().then_some(out)
    }

    fn emit_op(
        &mut self,
        o: OpId,
        sg: SubgraphId,
        phase: SubgraphPhase,
        k: u32,
    ) -> Result<(), CompileError> {
        let model = self.model;
        let op = &model.ops[o];
        let cfg = self
            .tree
            .op_config(o)
            .expect("checked before building")
            .clone();
        let per_mb = op.phase != Phase::Optimizer;
        let n_mb = if per_mb { self.m } else { 1 };
        let pieces = split_operator(model, op, &cfg, n_mb);
        let layer = Some(op.layer);

        let mut reads: BTreeMap<DeviceId, Vec<ShardId>> = BTreeMap::new();
        for &t in &op.inputs {
            let v = self.version(t, phase, k, layer);
            let ext = self.extents(t, v);
            let need =
                layout_with_extents(&model.tensors[t], &ext, LayoutSource::OpInput(op, &cfg));
            self.ensure(t, v, &need, sg)?;
            for h in &need.holdings {
                let cov = self.cover(t, v, h.device, &h.region, sg).ok_or_else(|| {
                    CompileError::Invalid(format!(
                        "no data for '{}' on device {}",
                        model.tensors[t].name, h.device
                    ))
                })?;
                reads.entry(h.device).or_default().extend(cov);
            }
        }

        let tag = phase_tag(phase, op.phase);
        let name = &model.layers[op.layer].name;
        let mut by_device: BTreeMap<DeviceId, TaskId> = BTreeMap::new();
        for p in &pieces {
            let key = if per_mb {
                format!("{tag}{k}:{name}/{}[{}]@{}", op.name, p.part, p.device)
            } else {
                format!("{tag}:{name}/{}[{}]@{}", op.name, p.part, p.device)
            };
            let id = self.push_task(
                key,
                TaskKind::Compute,
                vec![p.device],
                sg,
                per_mb.then_some(k),
                Some(ComputeInfo {
                    op: o,
                    op_type: op.op_type,
                    cost_key: op.cost_key.clone(),
                    extents: p.extents.clone(),
                    part: p.part,
                }),
                None,
            );
            by_device.insert(p.device, id);
            let r = reads.get(&p.device).cloned().unwrap_or_default();
            self.add_reads(id, &r);
        }

        for &t in op.outputs.iter().chain(&op.updates) {
            let v = match phase {
                SubgraphPhase::Recompute if model.is_per_micro_batch(t) => Version::Recompute(k),
                _ if model.is_per_micro_batch(t) => Version::Mb(k),
                _ => Version::Static,
            };
            let ext = self.extents(t, v);
            let produced =
                layout_with_extents(&model.tensors[t], &ext, LayoutSource::OpOutput(op, &cfg));
            let stored = self.store(t, v).stored.clone();
            if produced.holdings == stored.holdings {
                for h in &produced.holdings {
                    let sid = self.canonical(t, v, h.device, &h.region);
                    self.add_write(by_device[&h.device], sid);
                }
                continue;
            }
            for h in &produced.holdings {
                let key = (o, h.device, h.region.clone(), h.partial);
                let existing = self.store(t, v).pending.get(&key).copied();
                let sid = match existing {
                    Some(s) => s,
                    None => {
                        let s = push_shard(
                            &mut self.shards,
                            model,
                            t,
                            v,
                            h.device,
                            h.region.clone(),
                            h.partial,
                            ShardKind::Transient,
                        );
                        self.store(t, v).pending.insert(key, s);
                        s
                    }
                };
                self.add_write(by_device[&h.device], sid);
            }
            if !(v == Version::Static && model.is_param_grad(t)) {
                self.reduce_pending(t, v, o, sg)?;
            }
        }
        Ok(())
    }

    /// Runs the transform from `o`'s pending output buffers to the stored layout.
    fn reduce_pending(
        &mut self,
        t: TensorId,
        v: Version,
        o: OpId,
        sg: SubgraphId,
    ) -> Result<(), CompileError> {
        let s = self.store(t, v);
        let stored = s.stored.clone();
        let mine: Vec<(PendingKey, ShardId)> = s
            .pending
            .iter()
            .filter(|(k, _)| k.0 == o)
            .map(|(k, &id)| (k.clone(), id))
            .collect();
        for (k, _) in &mine {
            s.pending.remove(k);
        }
        let keys = mine
            .iter()
            .filter_map(|(k, _)| k.3)
            .max()
            .map_or(1, |x| x + 1);
        let src = PlacementLayout::new(
            t,
            stored.extents.clone(),
            stored.elem_bytes,
            keys,
            mine.iter()
                .map(|(k, _)| Holding {
                    device: k.1,
                    region: k.2.clone(),
                    partial: k.3,
                })
                .collect(),
        );
        let bufs: Vec<Buf> = mine
            .iter()
            .map(|(k, id)| Buf {
                device: k.1,
                region: k.2.clone(),
                partial: k.3,
                shard: *id,
                scope: None,
            })
            .collect();
        let plan = infer_transform(&src, &stored).map_err(|source| CompileError::Transform {
            tensor: self.model.tensors[t].name.clone(),
            source,
        })?;
        self.materialize(t, v, &plan.steps, bufs, sg, Some(&stored))
    }

    /// Makes sure every holding of `need` is covered on its device, inserting
    /// a transform from the visible buffers when it is not.
    fn ensure(
        &mut self,
        t: TensorId,
        v: Version,
        need: &PlacementLayout,
        sg: SubgraphId,
    ) -> Result<(), CompileError> {
        let missing = need
            .holdings
            .iter()
            .any(|h| self.cover(t, v, h.device, &h.region, sg).is_none());
        if !missing {
            return Ok(());
        }
        let s = self.store(t, v);
        let bufs: Vec<Buf> = s
            .complete
            .iter()
            .filter(|b| b.scope.is_none_or(|x| x == sg))
            .cloned()
            .collect();
        if bufs.is_empty() {
            return Err(CompileError::Invalid(format!(
                "'{}' is read before any operator produces it",
                self.model.tensors[t].name
            )));
        }
        let src = PlacementLayout::new(
            t,
            need.extents.clone(),
            need.elem_bytes,
            1,
            bufs.iter()
                .map(|b| Holding {
                    device: b.device,
                    region: b.region.clone(),
                    partial: None,
                })
                .collect(),
        );
        let plan = infer_transform(&src, need).map_err(|source| CompileError::Transform {
            tensor: self.model.tensors[t].name.clone(),
            source,
        })?;
        self.materialize(t, v, &plan.steps, bufs, sg, None)
    }

    /// Turns plan steps into comm tasks. With `stored`, outputs matching the
    /// stored layout land in canonical buffers; everything else is a temp.
    fn materialize(
        &mut self,
        t: TensorId,
        v: Version,
        steps: &[CommStep],
        mut avail: Vec<Buf>,
        sg: SubgraphId,
        stored: Option<&PlacementLayout>,
    ) -> Result<(), CompileError> {
        let kind = if self.model.is_param_grad(t) {
            TaskKind::GradientComm
        } else {
            TaskKind::FeatureComm
        };
        let static_scope = (v == Version::Static && stored.is_none()).then_some(sg);
        let mb = match v {
            Version::Static => None,
            Version::Mb(k) | Version::Recompute(k) => Some(k),
        };
        let tname = self.model.tensors[t].name.clone();
        for step in steps {
            let mut reads: Vec<ShardId> = Vec::new();
            let mut outs: Vec<(DeviceId, Region)> = Vec::new();
            let g = &step.group;
            let pick = |avail: &[Buf], d: DeviceId, r: &Region, partial: bool| -> Vec<ShardId> {
                avail
                    .iter()
                    .filter(|b| {
                        b.device == d
                            && b.partial.is_some() == partial
                            && b.region.intersect(r).is_some()
                    })
                    .map(|b| b.shard)
                    .collect()
            };
            match &step.detail {
                StepDetail::AllReduce { region } => {
                    for &d in g {
                        reads.extend(pick(&avail, d, region, true));
                        outs.push((d, region.clone()));
                    }
                }
                StepDetail::ReduceScatter { region, chunks } => {
                    for (&d, c) in g.iter().zip(chunks) {
                        reads.extend(pick(&avail, d, region, true));
                        outs.push((d, c.clone()));
                    }
                }
                StepDetail::AllGather { pieces } => {
                    for (i, &d) in g.iter().enumerate() {
                        reads.extend(pick(&avail, d, &pieces[i], false));
                        for (j, p) in pieces.iter().enumerate() {
                            if j != i {
                                outs.push((d, p.clone()));
                            }
                        }
                    }
                }
                StepDetail::AllToAll { sends } => {
                    for (i, j, r) in sends {
                        reads.extend(pick(&avail, g[*i], r, false));
                        if i != j {
                            outs.push((g[*j], r.clone()));
                        }
                    }
                }
                StepDetail::Broadcast { root, region } => {
                    reads.extend(pick(&avail, *root, region, false));
                    for &d in g.iter().filter(|&&d| d != *root) {
                        outs.push((d, region.clone()));
                    }
                }
                StepDetail::SendRecv { region } => {
                    reads.extend(pick(&avail, g[0], region, false));
                    outs.push((g[1], region.clone()));
                }
            }
            reads.sort();
            reads.dedup();
            let n = self.seq.entry((t, v)).or_insert(0);
            *n += 1;
            let seq = *n;
            let devs = g
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let key = match mb {
                Some(k) => format!("T{k}:{tname}#{seq}:{}@{devs}", step.primitive.as_str()),
                None => format!("T:{tname}#{seq}:{}@{devs}", step.primitive.as_str()),
            };
            let id = self.push_task(
                key,
                kind,
                g.clone(),
                sg,
                mb,
                None,
                Some(CommInfo {
                    primitive: step.primitive,
                    bytes: step.bytes,
                    tensor: t,
                }),
            );
            self.add_reads(id, &reads);
            for (d, r) in outs {
                let exact = stored.is_some_and(|s| s.on_device(d).any(|h| h.region == r));
                let inside = stored.is_some_and(|s| s.on_device(d).any(|h| h.region.contains(&r)));
                let sid = if exact {
                    self.canonical(t, v, d, &r)
                } else {
                    let k = if inside {
                        self.final_kind(t)
                    } else {
                        ShardKind::Transient
                    };
                    let sid = push_shard(&mut self.shards, self.model, t, v, d, r.clone(), None, k);
                    self.store(t, v).complete.push(Buf {
                        device: d,
                        region: r.clone(),
                        partial: None,
                        shard: sid,
                        scope: static_scope,
                    });
                    sid
                };
                self.add_write(id, sid);
                avail.push(Buf {
                    device: d,
                    region: r,
                    partial: None,
                    shard: sid,
                    scope: None,
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn push_task(
        &mut self,
        key: String,
        kind: TaskKind,
        devices: Vec<DeviceId>,
        sg: SubgraphId,
        micro_batch: Option<u32>,
        compute: Option<ComputeInfo>,
        comm: Option<CommInfo>,
    ) -> TaskId {
        let id = self.tasks.len();
        self.tasks.push(TaskNode {
            id,
            key,
            kind,
            devices,
            subgraph: sg,
            micro_batch,
            compute,
            comm,
            reads: Vec::new(),
            writes: Vec::new(),
            preds: Vec::new(),
            duration: None,
            bottleneck: None,
        });
        self.subgraphs[sg].tasks.push(id);
        id
    }

    fn add_reads(&mut self, task: TaskId, shards: &[ShardId]) {
        for &s in shards {
            let sh = &mut self.shards[s];
            if sh.readers.last() == Some(&task) {
                continue;
            }
            self.tasks[task].preds.extend(sh.writers.iter().copied());
            self.tasks[task].reads.push(s);
            sh.readers.push(task);
        }
    }

    fn add_write(&mut self, task: TaskId, s: ShardId) {
        let sh = &mut self.shards[s];
        if sh.writers.last() == Some(&task) {
            return;
        }
        let prior = sh.writers.iter().chain(&sh.readers).filter(|&&x| x != task);
        self.tasks[task].preds.extend(prior);
        self.tasks[task].writes.push(s);
        sh.writers.push(task);
    }

    fn finish(mut self, cluster: &ClusterSpec) -> ExecutionGraph {
        for t in &mut self.tasks {
            t.preds.sort();
            t.preds.dedup();
        }
        // Drop instances that received no task and renumber the rest.
        let mut remap = vec![usize::MAX; self.subgraphs.len()];
        let mut subgraphs = Vec::new();
        for s in self.subgraphs {
            if !s.tasks.is_empty() {
                remap[s.id] = subgraphs.len();
                subgraphs.push(ExecSubgraph {
                    id: subgraphs.len(),
                    ..s
                });
            }
        }
        for t in &mut self.tasks {
            t.subgraph = remap[t.subgraph];
        }
        for s in &mut subgraphs {
            let mut devs = BTreeSet::new();
            let mut preds = BTreeSet::new();
            for &t in &s.tasks {
                devs.extend(self.tasks[t].devices.iter().copied());
                for &p in &self.tasks[t].preds {
                    let ps = self.tasks[p].subgraph;
                    if ps != s.id {
                        preds.insert(ps);
                    }
                }
            }
            s.devices = devs.into_iter().collect();
            s.data_preds = preds.into_iter().collect();
        }
        ExecutionGraph {
            model: self.model.name.clone(),
            batch_size: self.model.batch_size,
            n_micro_batch: self.m,
            n_devices: cluster.n_devices(),
            units: self.units,
            subgraphs,
            tasks: self.tasks,
            shards: self.shards,
        }
    }
}

/// Forward instance k+max_ongoing waits for every backward instance of k;
/// a recompute instance waits for whatever else its backward waits for.
fn wire_control(g: &mut ExecutionGraph, tree: &StrategyTree) {
    let mut by_key: HashMap<(SubgraphPhase, usize, usize, u32), SubgraphId> = HashMap::new();
    for s in &g.subgraphs {
        by_key.insert((s.phase, s.unit, s.block, s.micro_batch), s.id);
    }
    let m = g.n_micro_batch;
    let mut edges: Vec<(SubgraphId, SubgraphId)> = Vec::new();
    for u in &g.units {
        let mo = tree.schedule(u.schedule_node).max_ongoing_micro_batch;
        let mo = if mo == 0 { m } else { mo.min(m) };
        for k in 0..m.saturating_sub(mo) {
            let Some(&f) = by_key.get(&(SubgraphPhase::Forward, u.id, 0, k + mo)) else {
                continue;
            };
            for s in g.subgraphs.iter().filter(|s| {
                s.unit == u.id && s.micro_batch == k && s.phase == SubgraphPhase::Backward
            }) {
                edges.push((s.id, f));
            }
        }
    }
    for s in g
        .subgraphs
        .iter()
        .filter(|s| s.phase == SubgraphPhase::Recompute)
    {
        let Some(&b) = by_key.get(&(SubgraphPhase::Backward, s.unit, s.block, s.micro_batch))
        else {
            continue;
        };
        let f = by_key
            .get(&(SubgraphPhase::Forward, s.unit, 0, s.micro_batch))
            .copied();
        for &p in &g.subgraphs[b].data_preds {
            if p != s.id && Some(p) != f && !s.data_preds.contains(&p) {
                edges.push((p, s.id));
            }
        }
    }
    edges.sort();
    edges.dedup();
    for (from, to) in edges {
        g.subgraphs[to].control_preds.push(from);
    }
}

fn subtree(tree: &StrategyTree, n: NodeId) -> Vec<NodeId> {
    let mut out = vec![n];
    let mut i = 0;
    while i < out.len() {
        out.extend(tree.nodes[out[i]].children.iter().copied());
        i += 1;
    }
    out
}

fn phase_tag(phase: SubgraphPhase, op_phase: Phase) -> &'static str {
    match (phase, op_phase) {
        (_, Phase::Optimizer) => "O",
        (SubgraphPhase::Forward, _) => "F",
        (SubgraphPhase::Recompute, _) => "R",
        (SubgraphPhase::Backward, _) => "B",
    }
}

#[allow(clippy::too_many_arguments)]
fn push_shard(
    shards: &mut Vec<TensorShard>,
    model: &ModelGraph,
    t: TensorId,
    v: Version,
    device: DeviceId,
    region: Region,
    partial: Option<u32>,
    kind: ShardKind,
) -> ShardId {
    let ten = &model.tensors[t];
    let id = shards.len();
    let suffix = match v {
        Version::Static => String::new(),
        Version::Mb(k) => format!("@mb{k}"),
        Version::Recompute(k) => format!("@rc{k}"),
    };
    shards.push(TensorShard {
        id,
        tensor: t,
        name: format!("{}{suffix}", ten.name),
        device,
        bytes: region.volume() * ten.elem_bytes,
        region,
        partial,
        kind,
        writers: Vec::new(),
        readers: Vec::new(),
    });
    id
}
