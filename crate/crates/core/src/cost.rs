//! Operator cost estimation: profiled compute tables and ring α-β collectives.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterSpec, LinkLevel};
use crate::compiler::{ExecutionGraph, TaskKind, TaskNode};
use crate::error::{parse_json, ClusterError};
use crate::layout::Primitive;
use crate::model::OpType;
use crate::strategy::DeviceId;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cost file schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid cost table: {0}")]
    Invalid(String),
    #[error("missing cost for: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("task {0} is not a {1} task")]
    WrongKind(usize, &'static str),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
enum CostEntry {
    Time {
        cost_key: String,
        #[serde(default)]
        extents: Option<BTreeMap<String, u64>>,
        device_type: String,
        micros: f64,
    },
    Peak {
        device_type: String,
        peak_tflops: f64,
    },
}

/// Profiled compute durations keyed by (cost key, device type, shard extents).
type Extents = BTreeMap<String, u64>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComputeCostTable {
    exact: HashMap<(String, String), Vec<(Extents, f64)>>,
    /// Entries without extents: one duration for every shard shape.
    wildcard: HashMap<(String, String), f64>,
    /// Fallback throughput in flop/s per device type.
    peak: HashMap<String, f64>,
}

impl ComputeCostTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; `extents` of `None` matches any shard shape.
    pub fn insert(
        &mut self,
        cost_key: &str,
        device_type: &str,
        extents: Option<BTreeMap<String, u64>>,
        micros: f64,
    ) {
        let k = (cost_key.to_string(), device_type.to_string());
        match extents {
            Some(e) => {
                let list = self.exact.entry(k).or_default();
                list.retain(|(x, _)| x != &e);
                list.push((e, micros));
            }
            None => {
                self.wildcard.insert(k, micros);
            }
        }
    }

    pub fn set_peak(&mut self, device_type: &str, flops: f64) {
        self.peak.insert(device_type.to_string(), flops);
    }

    pub fn len(&self) -> usize {
        self.exact.values().map(|v| v.len()).sum::<usize>() + self.wildcard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0 && self.peak.is_empty()
    }

    /// Merges `other` into `self`; later entries win.
    pub fn extend(&mut self, other: &ComputeCostTable) {
        for ((k, d), list) in &other.exact {
            for (e, us) in list {
                self.insert(k, d, Some(e.clone()), *us);
            }
        }
        for ((k, d), us) in &other.wildcard {
            self.insert(k, d, None, *us);
        }
        self.peak
            .extend(other.peak.iter().map(|(k, v)| (k.clone(), *v)));
    }
}

pub fn load_cost_table(path: impl AsRef<Path>) -> Result<ComputeCostTable, CostError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CostError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cost_table(&text)
}

pub fn parse_cost_table(text: &str) -> Result<ComputeCostTable, CostError> {
    let entries: Vec<CostEntry> =
        parse_json(text).map_err(|(path, message)| CostError::Schema { path, message })?;
    let mut t = ComputeCostTable::new();
    for (i, e) in entries.into_iter().enumerate() {
        match e {
            CostEntry::Time {
                cost_key,
                extents,
                device_type,
                micros,
            } => {
                if !(micros > 0.0 && micros.is_finite()) {
                    return Err(CostError::Invalid(format!(
                        "[{i}]: micros must be positive"
                    )));
                }
                t.insert(&cost_key, &device_type, extents, micros);
            }
            CostEntry::Peak {
                device_type,
                peak_tflops,
            } => {
                if !(peak_tflops > 0.0 && peak_tflops.is_finite()) {
                    return Err(CostError::Invalid(format!(
                        "[{i}]: peak_tflops must be positive"
                    )));
                }
                t.set_peak(&device_type, peak_tflops * 1e12);
            }
        }
    }
    Ok(t)
}

/// Per-primitive bandwidth multipliers in (0, 1]; 1.0 when unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorrectionFactors(pub BTreeMap<Primitive, f64>);

impl CorrectionFactors {
    pub fn get(&self, p: Primitive) -> f64 {
        self.0.get(&p).copied().unwrap_or(1.0)
    }
}

pub fn load_corrections(path: impl AsRef<Path>) -> Result<CorrectionFactors, CostError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CostError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corrections(&text)
}

pub fn parse_corrections(text: &str) -> Result<CorrectionFactors, CostError> {
    let c: CorrectionFactors =
        parse_json(text).map_err(|(path, message)| CostError::Schema { path, message })?;
    for (p, &f) in &c.0 {
        if !(f > 0.0 && f <= 1.0) {
            return Err(CostError::Invalid(format!(
                "correction for {} must lie in (0, 1], got {f}",
                p.as_str()
            )));
        }
    }
    Ok(c)
}

/// Latency and inverse bandwidth of each link level of a cluster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaBetaParams {
    pub levels: BTreeMap<LinkLevel, (f64, f64)>,
}

impl AlphaBetaParams {
    pub fn from_cluster(c: &ClusterSpec) -> Self {
        use crate::cluster::Link;
        let levels = [
            (LinkLevel::DevicePort, Link::Port(0)),
            (LinkLevel::IntraNode, Link::Fabric { node: 0, socket: 0 }),
            (LinkLevel::InterSocket, Link::InterSocket { node: 0 }),
            (LinkLevel::Nic, Link::Nic { node: 0 }),
        ]
        .into_iter()
        .map(|(l, link)| (l, (c.level_alpha(l), 1.0 / c.link_capacity(link))))
        .collect();
        AlphaBetaParams { levels }
    }
}

/// Flops of one shard, or `None` for types without a formula.
pub fn flops(op_type: OpType, extents: &BTreeMap<String, u64>) -> Option<f64> {
    let n: f64 = extents.values().map(|&e| e as f64).product();
    match op_type {
        OpType::Matmul | OpType::Conv => Some(2.0 * n),
        OpType::Elementwise => Some(n),
        _ => None,
    }
}

/// Seconds for one compute task on `device_type`.
pub fn compute_cost(
    task: &TaskNode,
    table: &ComputeCostTable,
    device_type: &str,
) -> Result<f64, CostError> {
    let c = task
        .compute
        .as_ref()
        .ok_or(CostError::WrongKind(task.id, "compute"))?;
    lookup(table, &c.cost_key, c.op_type, &c.extents, device_type)
}

pub fn lookup(
    table: &ComputeCostTable,
    cost_key: &str,
    op_type: OpType,
    extents: &BTreeMap<String, u64>,
    device_type: &str,
) -> Result<f64, CostError> {
    let k = (cost_key.to_string(), device_type.to_string());
    if let Some(list) = table.exact.get(&k) {
        if let Some((_, us)) = list.iter().find(|(e, _)| e == extents) {
            return Ok(us / 1e6);
        }
    }
    if let Some(us) = table.wildcard.get(&k) {
        return Ok(us / 1e6);
    }
    if let (Some(peak), Some(f)) = (table.peak.get(device_type), flops(op_type, extents)) {
        return Ok(f / peak);
    }
    let dims: Vec<String> = extents.iter().map(|(l, e)| format!("{l}={e}")).collect();
    Err(CostError::Missing(vec![format!(
        "{cost_key}({}) on {device_type}",
        dims.join(",")
    )]))
}

/// Result of costing one collective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommCost {
    pub duration: f64,
    pub bottleneck: LinkLevel,
    pub bandwidth: f64,
    pub alpha: f64,
}

/// Ring α-β cost of moving `bytes` with `primitive` over `group`.
pub fn collective_cost(
    primitive: Primitive,
    bytes: u64,
    group: &[DeviceId],
    cluster: &ClusterSpec,
    corrections: &CorrectionFactors,
) -> Result<CommCost, CostError> {
    let ch = cluster.channels(group)?;
    let b = ch.aggregate * corrections.get(primitive);
    let n = group.iter().collect::<BTreeSet<_>>().len();
    Ok(CommCost {
        duration: ring_time(primitive, bytes as f64, n, ch.alpha, b),
        bottleneck: ch.bottleneck,
        bandwidth: b,
        alpha: ch.alpha,
    })
}

/// The ring formulas with explicit α and bandwidth.
pub fn ring_time(p: Primitive, s: f64, n: usize, alpha: f64, b: f64) -> f64 {
    let nf = n as f64;
    let k = nf - 1.0;
    match p {
        Primitive::AllReduce => 2.0 * k * alpha + 2.0 * s * k / (nf * b),
        Primitive::AllGather | Primitive::ReduceScatter | Primitive::AllToAll => {
            k * alpha + s * k / (nf * b)
        }
        Primitive::Broadcast => k * alpha + s / b,
        Primitive::SendRecv => alpha + s / b,
    }
}

/// Attaches a base duration to every task; comm tasks also get their bottleneck.
/// All missing compute keys are reported together.
pub fn annotate_costs(
    graph: &mut ExecutionGraph,
    table: &ComputeCostTable,
    cluster: &ClusterSpec,
    corrections: &CorrectionFactors,
) -> Result<(), CostError> {
    let mut missing = BTreeSet::new();
    let mut comm_cache: HashMap<(Primitive, u64, Vec<DeviceId>), CommCost> = HashMap::new();
    for task in &mut graph.tasks {
        match task.kind {
            TaskKind::Compute => match compute_cost(task, table, &cluster.device_type) {
                Ok(d) => task.duration = Some(d),
                Err(CostError::Missing(keys)) => missing.extend(keys),
                Err(e) => return Err(e),
            },
            TaskKind::FeatureComm | TaskKind::GradientComm => {
                let c = task
                    .comm
                    .as_ref()
                    .ok_or(CostError::WrongKind(task.id, "comm"))?;
                let key = (c.primitive, c.bytes, task.devices.clone());
                let cost = match comm_cache.get(&key) {
                    Some(c) => *c,
                    None => {
                        let v = collective_cost(
                            c.primitive,
                            c.bytes,
                            &task.devices,
                            cluster,
                            corrections,
                        )?;
                        comm_cache.insert(key, v);
                        v
                    }
                };
                task.duration = Some(cost.duration);
                task.bottleneck = Some(cost.bottleneck);
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CostError::Missing(missing.into_iter().collect()))
    }
}
