//! Device-level tensor layouts and the communication plans between them.

mod infer;
mod verify;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub use infer::infer_transform;
pub use verify::verify_plan;

use crate::cluster::{ClusterSpec, LinkLevel};
use crate::model::{OperatorSpec, TensorId, TensorSpec};
use crate::strategy::{DeviceId, PartGrid, ShardingConfig};

/// Half-open index ranges, one per tensor dim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Region(pub Vec<(u64, u64)>);

impl Region {
    pub fn full(extents: &[u64]) -> Self {
        Region(extents.iter().map(|&e| (0, e)).collect())
    }

    pub fn volume(&self) -> u64 {
        self.0.iter().map(|(a, b)| b.saturating_sub(*a)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().any(|(a, b)| b <= a)
    }

    pub fn intersect(&self, o: &Region) -> Option<Region> {
        let r = Region(
            self.0
                .iter()
                .zip(&o.0)
                .map(|(&(a, b), &(c, d))| (a.max(c), b.min(d)))
                .collect(),
        );
        (!r.is_empty()).then_some(r)
    }

    pub fn contains(&self, o: &Region) -> bool {
        self.0
            .iter()
            .zip(&o.0)
            .all(|(&(a, b), &(c, d))| a <= c && d <= b)
    }

    /// `self` minus `o` as disjoint boxes.
    pub fn subtract(&self, o: &Region) -> Vec<Region> {
        let Some(cut) = self.intersect(o) else {
            return vec![self.clone()];
        };
        let mut out = Vec::new();
        let mut rest = self.clone();
        for d in 0..self.0.len() {
            let (lo, hi) = rest.0[d];
            let (clo, chi) = cut.0[d];
            if lo < clo {
                let mut r = rest.clone();
                r.0[d] = (lo, clo);
                out.push(r);
            }
            if chi < hi {
                let mut r = rest.clone();
                r.0[d] = (chi, hi);
                out.push(r);
            }
            rest.0[d] = (clo, chi);
        }
        out
    }
}

/// Removes `cut` from every box of `set`.
pub fn subtract_all(set: Vec<Region>, cut: &Region) -> Vec<Region> {
    set.into_iter().flat_map(|r| r.subtract(cut)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Holding {
    pub device: DeviceId,
    pub region: Region,
    /// Key of the unreduced contribution this holding carries, if partial.
    pub partial: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct PlacementLayout {
    pub tensor: TensorId,
    pub extents: Vec<u64>,
    pub elem_bytes: u64,
    /// Number of contributions a partial region is split into; 1 if none.
    pub partial_keys: u32,
    /// Sorted and free of duplicates.
    pub holdings: Vec<Holding>,
}

impl PlacementLayout {
    pub fn new(
        tensor: TensorId,
        extents: Vec<u64>,
        elem_bytes: u64,
        partial_keys: u32,
        mut holdings: Vec<Holding>,
    ) -> Self {
        holdings.sort();
        holdings.dedup();
        PlacementLayout {
            tensor,
            extents,
            elem_bytes,
            partial_keys: partial_keys.max(1),
            holdings,
        }
    }

    pub fn bytes(&self, r: &Region) -> u64 {
        r.volume() * self.elem_bytes
    }

    pub fn has_partial(&self) -> bool {
        self.holdings.iter().any(|h| h.partial.is_some())
    }

    /// Devices holding each complete region.
    pub fn replica_groups(&self) -> BTreeMap<Region, Vec<DeviceId>> {
        let mut m: BTreeMap<Region, Vec<DeviceId>> = BTreeMap::new();
        for h in self.holdings.iter().filter(|h| h.partial.is_none()) {
            m.entry(h.region.clone()).or_default().push(h.device);
        }
        m
    }

    pub fn on_device(&self, d: DeviceId) -> impl Iterator<Item = &Holding> {
        self.holdings.iter().filter(move |h| h.device == d)
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        let mut v: Vec<DeviceId> = self.holdings.iter().map(|h| h.device).collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Where a layout comes from.
#[derive(Debug, Clone, Copy)]
pub enum LayoutSource<'a> {
    /// The tensor's own memory config.
    Memory(&'a ShardingConfig),
    /// What an operator with this computation config reads.
    OpInput(&'a OperatorSpec, &'a ShardingConfig),
    /// What an operator with this computation config writes; reduction dims
    /// it partitions make the result partial.
    OpOutput(&'a OperatorSpec, &'a ShardingConfig),
}

/// Device holdings implied by a config, with the tensor's full extents.
pub fn layout_of(tensor: &TensorSpec, src: LayoutSource) -> PlacementLayout {
    let ext: Vec<u64> = tensor.shape.iter().map(|d| d.extent).collect();
    layout_with_extents(tensor, &ext, src)
}

/// Like [`layout_of`] with explicit per-dim extents (e.g. one micro-batch).
pub fn layout_with_extents(
    tensor: &TensorSpec,
    extents: &[u64],
    src: LayoutSource,
) -> PlacementLayout {
    let labels: Vec<&str> = tensor.labels().collect();
    let (cfg, order, reduce): (&ShardingConfig, Vec<&str>, Vec<&str>) = match src {
        LayoutSource::Memory(c) => (c, labels.clone(), Vec::new()),
        LayoutSource::OpInput(op, c) => (
            c,
            op.dims.iter().map(|d| d.label.as_str()).collect(),
            Vec::new(),
        ),
        LayoutSource::OpOutput(op, c) => (
            c,
            op.dims.iter().map(|d| d.label.as_str()).collect(),
            op.dims
                .iter()
                .map(|d| d.label.as_str())
                .filter(|l| op.reduction_dims.contains(*l) && c.partition.degree(l) > 1)
                .collect(),
        ),
    };
    let grid = PartGrid::new(order.iter().copied(), &cfg.partition);
    let red = PartGrid {
        dims: reduce
            .iter()
            .map(|l| (l.to_string(), cfg.partition.degree(l)))
            .collect(),
    };
    let keys = red.parts() as u32;
    let mut holdings = Vec::new();
    for p in 0..grid.parts() {
        let c = grid.coords(p);
        let region = Region(
            labels
                .iter()
                .zip(extents)
                .map(|(l, &e)| match grid.coord_of(l, &c) {
                    Some(i) => {
                        let deg = cfg.partition.degree(l) as u64;
                        (i as u64 * e / deg, (i as u64 + 1) * e / deg)
                    }
                    None => (0, e),
                })
                .collect(),
        );
        let partial = (keys > 1).then(|| {
            let rc: Vec<u32> = red
                .dims
                .iter()
                .map(|(l, _)| grid.coord_of(l, &c).unwrap_or(0))
                .collect();
            red.index(&rc) as u32
        });
        if let Some(devs) = cfg.map.0.get(p) {
            for &d in devs {
                holdings.push(Holding {
                    device: d,
                    region: region.clone(),
                    partial,
                });
            }
        }
    }
    PlacementLayout::new(
        tensor.id,
        extents.to_vec(),
        tensor.elem_bytes,
        keys,
        holdings,
    )
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
    Broadcast,
    SendRecv,
}

impl Primitive {
    pub const ALL: [Primitive; 6] = [
        Primitive::AllReduce,
        Primitive::AllGather,
        Primitive::ReduceScatter,
        Primitive::AllToAll,
        Primitive::Broadcast,
        Primitive::SendRecv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Primitive::AllReduce => "all_reduce",
            Primitive::AllGather => "all_gather",
            Primitive::ReduceScatter => "reduce_scatter",
            Primitive::AllToAll => "all_to_all",
            Primitive::Broadcast => "broadcast",
            Primitive::SendRecv => "send_recv",
        }
    }

    /// Ring bytes each device puts on the wire for a step of `s` bytes over `n` devices.
    pub fn wire_bytes(self, s: f64, n: usize) -> f64 {
        let n = n as f64;
        match self {
            Primitive::AllReduce => 2.0 * s * (n - 1.0) / n,
            Primitive::AllGather | Primitive::ReduceScatter | Primitive::AllToAll => {
                s * (n - 1.0) / n
            }
            Primitive::Broadcast | Primitive::SendRecv => s,
        }
    }
}

/// Data each step moves, indexed by position in `group`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDetail {
    AllReduce {
        region: Region,
    },
    ReduceScatter {
        region: Region,
        chunks: Vec<Region>,
    },
    AllGather {
        pieces: Vec<Region>,
    },
    AllToAll {
        sends: Vec<(usize, usize, Region)>,
    },
    Broadcast {
        root: DeviceId,
        region: Region,
    },
    /// group[0] sends to group[1].
    SendRecv {
        region: Region,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct CommStep {
    pub primitive: Primitive,
    pub group: Vec<DeviceId>,
    /// Message size S the cost formulas take.
    pub bytes: u64,
    /// Steps of one stage touch disjoint data and may run concurrently.
    pub stage: u32,
    pub detail: StepDetail,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct CommPlan {
    pub steps: Vec<CommStep>,
}

impl CommPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("source and destination describe different tensors")]
    Mismatch,
    #[error("a destination layout cannot be partial unless it equals the source")]
    PartialDestination,
    #[error("partial contributions of region {0:?} are not evenly replicated")]
    Unbalanced(Region),
    #[error("device {device} needs {region:?} but no device holds it")]
    Uncoverable { device: DeviceId, region: Region },
}

/// Wire bytes per device attributed to every hierarchy level each step crosses.
pub fn plan_volume(plan: &CommPlan, cluster: &ClusterSpec) -> BTreeMap<LinkLevel, f64> {
    let mut out = BTreeMap::new();
    for s in &plan.steps {
        let v = s.primitive.wire_bytes(s.bytes as f64, s.group.len());
        for level in cluster.levels_crossed(&s.group) {
            *out.entry(level).or_insert(0.0) += v;
        }
    }
    out
}
