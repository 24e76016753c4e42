//! Lowers a model plus a propagated strategy tree into a distributed execution graph.

mod build;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::cluster::LinkLevel;
use crate::error::CompileError;
use crate::layout::{Primitive, Region};
use crate::model::{LayerId, ModelGraph, OpId, OpType, OperatorSpec, TensorId};
use crate::strategy::{DeviceId, NodeId, PartGrid, ShardingConfig, StrategyTree};

pub use build::compile;

pub type TaskId = usize;
pub type ShardId = usize;
pub type SubgraphId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Compute,
    FeatureComm,
    GradientComm,
}

impl TaskKind {
    pub fn is_comm(self) -> bool {
        self != TaskKind::Compute
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Compute => "compute",
            TaskKind::FeatureComm => "feature_comm",
            TaskKind::GradientComm => "gradient_comm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComputeInfo {
    pub op: OpId,
    pub op_type: OpType,
    pub cost_key: String,
    /// Shard extents per dim label.
    pub extents: BTreeMap<String, u64>,
    pub part: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommInfo {
    pub primitive: Primitive,
    pub bytes: u64,
    pub tensor: TensorId,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskNode {
    pub id: TaskId,
    /// Content-derived name, stable across runs.
    pub key: String,
    pub kind: TaskKind,
    /// One device for compute tasks, the group for comm tasks.
    pub devices: Vec<DeviceId>,
    pub subgraph: SubgraphId,
    pub micro_batch: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compute: Option<ComputeInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm: Option<CommInfo>,
    pub reads: Vec<ShardId>,
    pub writes: Vec<ShardId>,
    /// Data predecessors (read-after-write, write-after-read, write-after-write).
    pub preds: Vec<TaskId>,
    /// Base duration in seconds, set by cost annotation.
    pub duration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<LinkLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardKind {
    /// Parameters and optimizer states; resident for the whole run.
    Persistent,
    /// Accumulated parameter gradients; kept once written.
    Retained,
    /// Freed when the last reader and writer finish.
    Transient,
    /// Data with no producer (model inputs, loss seeds); allocated at first read.
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorShard {
    pub id: ShardId,
    pub tensor: TensorId,
    pub name: String,
    pub device: DeviceId,
    pub region: Region,
    pub partial: Option<u32>,
    pub bytes: u64,
    pub kind: ShardKind,
    pub writers: Vec<TaskId>,
    pub readers: Vec<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgraphPhase {
    Forward,
    Recompute,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecSubgraph {
    pub id: SubgraphId,
    pub phase: SubgraphPhase,
    pub unit: usize,
    /// Tree node the instance was compiled from.
    pub origin: NodeId,
    pub micro_batch: u32,
    /// Recompute block inside the unit; 0 when the unit has a single block.
    pub block: usize,
    pub devices: Vec<DeviceId>,
    pub tasks: Vec<TaskId>,
    pub data_preds: Vec<SubgraphId>,
    pub control_preds: Vec<SubgraphId>,
}

/// A group of tree nodes compiled into one family of subgraph instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageUnit {
    pub id: usize,
    pub nodes: Vec<NodeId>,
    pub devices: Vec<DeviceId>,
    /// Node whose schedule config governs the unit.
    pub schedule_node: NodeId,
    pub layers: Vec<LayerId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionGraph {
    pub model: String,
    pub batch_size: u64,
    pub n_micro_batch: u32,
    pub n_devices: usize,
    pub units: Vec<StageUnit>,
    pub subgraphs: Vec<ExecSubgraph>,
    pub tasks: Vec<TaskNode>,
    pub shards: Vec<TensorShard>,
}

impl ExecutionGraph {
    pub fn data_edges(&self) -> Vec<(TaskId, TaskId)> {
        self.tasks
            .iter()
            .flat_map(|t| t.preds.iter().map(move |&p| (p, t.id)))
            .collect()
    }

    pub fn control_edges(&self) -> Vec<(SubgraphId, SubgraphId)> {
        self.subgraphs
            .iter()
            .flat_map(|s| s.control_preds.iter().map(move |&p| (p, s.id)))
            .collect()
    }

    pub fn count(&self, kind: TaskKind) -> usize {
        self.tasks.iter().filter(|t| t.kind == kind).count()
    }

    /// Bytes of persistent and retained shards per device.
    pub fn persistent_bytes(&self) -> Vec<u64> {
        let mut v = vec![0; self.n_devices];
        for s in &self.shards {
            if matches!(s.kind, ShardKind::Persistent | ShardKind::Retained) {
                v[s.device] += s.bytes;
            }
        }
        v
    }

    /// Serializes tasks, shards, subgraphs and both edge sets.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("graph serializes");
        v["data_edges"] = serde_json::to_value(self.data_edges()).expect("edges serialize");
        v["control_edges"] = serde_json::to_value(self.control_edges()).expect("edges serialize");
        v
    }
}

/// Breadth-first division of the tree into device-disjoint stage units.
///
/// A node is divided when its children's device groups fall into at least two
/// disjoint clusters; a cluster of one non-leaf child is considered for
/// further division, larger clusters stay together.
pub fn divide_subgraphs(
    tree: &StrategyTree,
    model: &ModelGraph,
) -> Result<Vec<StageUnit>, CompileError> {
    let mut groups: BTreeMap<NodeId, BTreeSet<DeviceId>> = BTreeMap::new();
    let mut group = |n: NodeId| -> Result<BTreeSet<DeviceId>, CompileError> {
        if let Some(g) = groups.get(&n) {
            return Ok(g.clone());
        }
        let g = tree.dev_group(model, n)?;
        groups.insert(n, g.clone());
        Ok(g)
    };
    let mut units: Vec<(Vec<NodeId>, NodeId, BTreeSet<DeviceId>)> = Vec::new();
    let mut queue = VecDeque::from([crate::strategy::ROOT]);
    while let Some(n) = queue.pop_front() {
        let children = tree.nodes[n].children.clone();
        if children.is_empty() {
            units.push((vec![n], n, group(n)?));
            continue;
        }
        let mut clusters: Vec<(Vec<NodeId>, BTreeSet<DeviceId>)> = Vec::new();
        for c in children {
            let g = group(c)?;
            let mut merged = (vec![c], g);
            let mut rest = Vec::new();
            for cl in clusters {
                if cl.1.is_disjoint(&merged.1) {
                    rest.push(cl);
                } else {
                    merged.0.extend(cl.0);
                    merged.1.extend(cl.1);
                }
            }
            rest.push(merged);
            clusters = rest;
        }
        if clusters.len() < 2 {
            units.push((vec![n], n, group(n)?));
            continue;
        }
        for (mut nodes, devs) in clusters {
            nodes.sort();
            if nodes.len() == 1 {
                queue.push_back(nodes[0]);
            } else {
                units.push((nodes, n, devs));
            }
        }
    }
    let mut out: Vec<StageUnit> = units
        .into_iter()
        .map(|(nodes, sched, devs)| {
            let mut layers: Vec<LayerId> = nodes
                .iter()
                .flat_map(|&n| tree.leaves_under(n))
                .filter_map(|l| tree.nodes[l].layer)
                .collect();
            layers.sort();
            let schedule_node = if nodes.len() == 1 { nodes[0] } else { sched };
            StageUnit {
                id: 0,
                nodes,
                devices: devs.into_iter().collect(),
                schedule_node,
                layers,
            }
        })
        .collect();
    out.sort_by_key(|u| u.layers.first().copied());
    for (i, u) in out.iter_mut().enumerate() {
        u.id = i;
    }
    Ok(out)
}

/// One device-level piece of an operator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpShard {
    pub part: usize,
    pub device: DeviceId,
    pub extents: BTreeMap<String, u64>,
}

/// Splits an operator into one shard per partition cell and replica device.
/// The batch dim is first divided by `n_micro_batch`.
pub fn split_operator(
    model: &ModelGraph,
    op: &OperatorSpec,
    cfg: &ShardingConfig,
    n_micro_batch: u32,
) -> Vec<OpShard> {
    let grid = PartGrid::new(op.dims.iter().map(|d| d.label.as_str()), &cfg.partition);
    let mut out = Vec::new();
    for p in 0..grid.parts() {
        let extents: BTreeMap<String, u64> = op
            .dims
            .iter()
            .map(|d| {
                let e = model.micro_extent(d, n_micro_batch as u64);
                (d.label.clone(), e / cfg.partition.degree(&d.label) as u64)
            })
            .collect();
        for &device in cfg.map.0.get(p).map(|v| v.as_slice()).unwrap_or(&[]) {
            out.push(OpShard {
                part: p,
                device,
                extents: extents.clone(),
            });
        }
    }
    out
}

/// Checks that every config still divides its dims after micro-batching.
fn check_micro_extents(
    model: &ModelGraph,
    tree: &StrategyTree,
    m: u32,
) -> Result<(), CompileError> {
    if !model.batch_size.is_multiple_of(m as u64) {
        return Err(CompileError::Invalid(format!(
            "batch size {} is not divisible by n_micro_batch {m}",
            model.batch_size
        )));
    }
    let check = |what: String, dims: &[crate::model::DimName], cfg: &ShardingConfig| {
        for d in dims {
            let deg = cfg.partition.degree(&d.label) as u64;
            let e = model.micro_extent(d, m as u64);
            if !e.is_multiple_of(deg) {
                return Err(CompileError::Invalid(format!(
                    "{what}: dim '{}' of micro-batch extent {e} is not divisible by degree {deg}",
                    d.label
                )));
            }
        }
        Ok(())
    };
    for o in &model.ops {
        if let Some(c) = tree.op_config(o.id) {
            check(format!("operator '{}'", o.name), &o.dims, c)?;
        }
    }
    for t in &model.tensors {
        if let Some(c) = tree.tensor_config(t.id) {
            check(format!("tensor '{}'", t.name), &t.shape, c)?;
        }
    }
    Ok(())
}

/// Kahn pass over instance data edges, then control edges added one at a
/// time; the first control edge that closes a cycle is reported.
fn check_acyclic(subgraphs: &[ExecSubgraph]) -> Result<(), CompileError> {
    let n = subgraphs.len();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for s in subgraphs {
        for &p in &s.data_preds {
            succ[p].push(s.id);
        }
    }
    let name = |i: usize| {
        let s = &subgraphs[i];
        format!(
            "{:?}(unit {}, block {}, mb {})",
            s.phase, s.unit, s.block, s.micro_batch
        )
    };
    let mut indeg = vec![0usize; n];
    for v in &succ {
        for &s in v {
            indeg[s] += 1;
        }
    }
    let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = stack.pop() {
        seen += 1;
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                stack.push(s);
            }
        }
    }
    if seen != n {
        return Err(CompileError::Invalid(
            "data dependencies between subgraphs form a cycle".into(),
        ));
    }
    let reaches = |succ: &Vec<Vec<usize>>, from: usize, to: usize| {
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        while let Some(i) = stack.pop() {
            if i == to {
                return true;
            }
            if !std::mem::replace(&mut seen[i], true) {
                stack.extend(&succ[i]);
            }
        }
        false
    };
    for s in subgraphs {
        for &p in &s.control_preds {
            if reaches(&succ, s.id, p) {
                return Err(CompileError::Cycle {
                    from: name(p),
                    to: name(s.id),
                });
            }
            succ[p].push(s.id);
        }
    }
    Ok(())
}
