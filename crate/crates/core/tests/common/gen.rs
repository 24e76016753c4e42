//! Seeded generators for randomized tests.

use rand::seq::SliceRandom;
use rand::Rng;

use stratsim::compiler::{
    CommInfo, ExecSubgraph, ExecutionGraph, StageUnit, SubgraphPhase, TaskKind, TaskNode,
};
use stratsim::layout::{Holding, PlacementLayout, Primitive, Region};

/// A single-instance graph of compute and comm tasks over random devices.
/// Durations are multiples of 2^-10 s so every sum is exact.
pub fn random_graph<R: Rng>(rng: &mut R, n_tasks: usize, n_dev: usize) -> ExecutionGraph {
    let mut tasks = Vec::with_capacity(n_tasks);
    for id in 0..n_tasks {
        let roll: f64 = rng.gen();
        let kind = if n_dev < 2 || roll < 0.6 {
            TaskKind::Compute
        } else if roll < 0.8 {
            TaskKind::FeatureComm
        } else {
            TaskKind::GradientComm
        };
        let mut devices: Vec<usize> = (0..n_dev).collect();
        devices.shuffle(rng);
        let k = if kind == TaskKind::Compute {
            1
        } else {
            rng.gen_range(2..=n_dev.min(4))
        };
        devices.truncate(k);
        devices.sort();
        let mut preds: Vec<usize> = (0..id).filter(|_| rng.gen_bool(0.12)).collect();
        preds.shuffle(rng);
        preds.truncate(3);
        preds.sort();
        tasks.push(TaskNode {
            id,
            key: format!("t{id}"),
            kind,
            devices,
            subgraph: 0,
            micro_batch: Some(0),
            compute: None,
            comm: kind.is_comm().then_some(CommInfo {
                primitive: Primitive::AllReduce,
                bytes: 1 << 20,
                tensor: 0,
            }),
            reads: Vec::new(),
            writes: Vec::new(),
            preds,
            duration: Some(rng.gen_range(1..=16) as f64 / 1024.0),
            bottleneck: None,
        });
    }
    ExecutionGraph {
        model: "random".into(),
        batch_size: 1,
        n_micro_batch: 1,
        n_devices: n_dev,
        units: vec![StageUnit {
            id: 0,
            nodes: vec![0],
            devices: (0..n_dev).collect(),
            schedule_node: 0,
            layers: Vec::new(),
        }],
        subgraphs: vec![ExecSubgraph {
            id: 0,
            phase: SubgraphPhase::Forward,
            unit: 0,
            origin: 0,
            micro_batch: 0,
            block: 0,
            devices: (0..n_dev).collect(),
            tasks: (0..n_tasks).collect(),
            data_preds: Vec::new(),
            control_preds: Vec::new(),
        }],
        tasks,
        shards: Vec::new(),
    }
}

fn random_extents<R: Rng>(rng: &mut R) -> Vec<u64> {
    loop {
        let nd = rng.gen_range(1..=3);
        let ext: Vec<u64> = (0..nd)
            .map(|_| *[1u64, 2, 4, 8].choose(rng).unwrap())
            .collect();
        if ext.iter().product::<u64>() <= 64 {
            return ext;
        }
    }
}

/// Region of part `coords` for a grid of `degrees` over `ext`.
fn region(ext: &[u64], degrees: &[u64], coords: &[u64]) -> Region {
    Region(
        ext.iter()
            .zip(degrees)
            .zip(coords)
            .map(|((&e, &d), &c)| (c * e / d, (c + 1) * e / d))
            .collect(),
    )
}

fn grid(degrees: &[u64]) -> Vec<Vec<u64>> {
    let mut out = vec![Vec::new()];
    for &d in degrees {
        out = out
            .into_iter()
            .flat_map(|c| (0..d).map(move |i| [c.clone(), vec![i]].concat()))
            .collect();
    }
    out
}

fn random_degrees<R: Rng>(rng: &mut R, ext: &[u64], budget: u64) -> Vec<u64> {
    let mut left = budget;
    ext.iter()
        .map(|&e| {
            let opts: Vec<u64> = [1u64, 2, 4]
                .into_iter()
                .filter(|&d| d <= e && d <= left)
                .collect();
            let d = *opts.choose(rng).unwrap();
            left /= d;
            d
        })
        .collect()
}

/// A complete (non-partial) layout: every part on 1 to 3 random devices.
pub fn random_layout<R: Rng>(rng: &mut R, ext: &[u64], n_dev: usize) -> PlacementLayout {
    let degrees = random_degrees(rng, ext, 8);
    let mut holdings = Vec::new();
    for c in grid(&degrees) {
        let mut devs: Vec<usize> = (0..n_dev).collect();
        devs.shuffle(rng);
        devs.truncate(rng.gen_range(1..=3.min(n_dev)));
        for d in devs {
            holdings.push(Holding {
                device: d,
                region: region(ext, &degrees, &c),
                partial: None,
            });
        }
    }
    PlacementLayout::new(0, ext.to_vec(), 4, 1, holdings)
}

/// A partial layout as a reduction-partitioned operator writes it: each
/// (part, contribution) on its own devices, replicated evenly.
pub fn random_partial_layout<R: Rng>(rng: &mut R, ext: &[u64], n_dev: usize) -> PlacementLayout {
    let keys = *[2u32, 4].choose(rng).unwrap();
    let reps = *[1usize, 2].choose(rng).unwrap();
    let max_parts = (n_dev / (keys as usize * reps)).max(1) as u64;
    let degrees = random_degrees(rng, ext, max_parts);
    let cells = grid(&degrees);
    let mut devs: Vec<usize> = (0..n_dev).collect();
    devs.shuffle(rng);
    let need = cells.len() * keys as usize * reps;
    if need > n_dev {
        return random_layout(rng, ext, n_dev);
    }
    let mut it = devs.into_iter();
    let mut holdings = Vec::new();
    for c in &cells {
        for k in 0..keys {
            for _ in 0..reps {
                holdings.push(Holding {
                    device: it.next().unwrap(),
                    region: region(ext, &degrees, c),
                    partial: Some(k),
                });
            }
        }
    }
    PlacementLayout::new(0, ext.to_vec(), 4, keys, holdings)
}

/// A (src, dst) pair over at most eight devices and 64 elements.
pub fn random_pair<R: Rng>(rng: &mut R) -> (PlacementLayout, PlacementLayout) {
    let ext = random_extents(rng);
    let n_dev = rng.gen_range(1..=8);
    let src = if rng.gen_bool(0.3) {
        random_partial_layout(rng, &ext, n_dev)
    } else {
        random_layout(rng, &ext, n_dev)
    };
    let dst = random_layout(rng, &ext, n_dev);
    (src, dst)
}

// ---------------------------------------------------------------- models

/// Layer shapes for `chain_model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Act,
    Norm,
    Bias,
}

const MODULES: [&[&str]; 4] = [&[], &["m0"], &["m0", "m1"], &["m2"]];

/// A chain of layers, each `(kind, output width, module index)`. Every
/// activation is (b, f<i>) so labels never clash across widths.
pub fn chain_model(batch: u64, layers: &[(LayerKind, u64, usize)]) -> serde_json::Value {
    use super::models::{layer, op, tensor};
    use serde_json::json;
    let mut out = Vec::new();
    let mut cur = ("x".to_string(), "f_in".to_string(), 4u64);
    for (i, &(kind, width, module)) in layers.iter().enumerate() {
        let path: Vec<String> = MODULES[module % MODULES.len()].iter().map(|s| s.to_string()).collect();
        let mut ts = Vec::new();
        if i == 0 {
            ts.push(json!({"name": "x", "dims": [{"label": "b", "extent": batch}, {"label": "f_in", "extent": 4}], "dtype_bytes": 4, "kind": "activation", "requires_grad": false}));
        }
        let y = format!("y{i}");
        let (ops, next) = match kind {
            LayerKind::Linear => {
                let lab = format!("f{i}");
                let w = format!("w{i}");
                ts.push(tensor(&w, &[(&lab, width), (&cur.1, cur.2)], "parameter"));
                ts.push(tensor(&y, &[("b", batch), (&lab, width)], "activation"));
                (vec![op("fc", "matmul", &[&cur.0, &w], &[&y], "fc")], (y.clone(), lab, width))
            }
            LayerKind::Act => {
                ts.push(tensor(&y, &[("b", batch), (&cur.1, cur.2)], "activation"));
                (vec![op("act", "elementwise", &[&cur.0], &[&y], "act")], (y.clone(), cur.1.clone(), cur.2))
            }
            LayerKind::Norm => {
                ts.push(tensor(&y, &[("b", batch), (&cur.1, cur.2)], "activation"));
                let o = json!({"name": "norm", "type": "norm", "inputs": [cur.0], "outputs": [y], "cost_key": "norm", "exclude_dims": [cur.1]});
                (vec![o], (y.clone(), cur.1.clone(), cur.2))
            }
            LayerKind::Bias => {
                let bias = format!("bias{i}");
                ts.push(tensor(&bias, &[(&cur.1, cur.2)], "parameter"));
                ts.push(tensor(&y, &[("b", batch), (&cur.1, cur.2)], "activation"));
                (vec![op("add", "elementwise", &[&cur.0, &bias], &[&y], "add")], (y.clone(), cur.1.clone(), cur.2))
            }
        };
        out.push(layer(&format!("L{i}"), &path, ts, ops));
        cur = next;
    }
    json!({"name": "chain", "batch_size": batch, "layers": out})
}

/// Shape of a randomized end-to-end case over `mlp_model`.
#[derive(Debug, Clone, Copy)]
pub struct MlpCase {
    pub blocks: usize,
    pub dp: usize,
    pub pp: usize,
    pub m: u32,
    pub max_ongoing: u32,
    pub zero: bool,
    pub recompute: bool,
}

impl MlpCase {
    pub const WIDTH: u64 = 64;

    pub fn batch(&self) -> u64 {
        (self.dp as u64 * self.m as u64) * 4
    }

    pub fn stage(&self, block: usize) -> usize {
        block * self.pp / self.blocks
    }

    pub fn model(&self) -> serde_json::Value {
        super::models::mlp_model(self.blocks, self.batch(), Self::WIDTH)
    }

    /// Data parallel inside each pipeline stage, with optional parameter
    /// sharding and per-block recomputation.
    pub fn strategy(&self) -> serde_json::Value {
        use serde_json::json;
        let lab = ["h", "o"];
        let mut nodes = vec![json!({
            "path": "/",
            "schedule": {"n_micro_batch": self.m, "max_ongoing_micro_batch": self.max_ongoing},
        })];
        for i in 0..self.blocks {
            let s = self.stage(i);
            let devs: Vec<Vec<usize>> = (s * self.dp..(s + 1) * self.dp).map(|d| vec![d]).collect();
            let part = if self.dp > 1 { json!({"b": self.dp}) } else { json!({}) };
            nodes.push(json!({
                "path": format!("blk{i}"),
                "schedule": {"n_micro_batch": self.m, "max_ongoing_micro_batch": self.max_ongoing, "recompute": self.recompute},
                "default": {"partition": part, "map": devs},
            }));
            if self.zero && self.dp > 1 {
                let out = lab[(i + 1) % 2];
                nodes.push(json!({
                    "path": format!("blk{i}/l{i}"),
                    "tensors": {format!("w{i}"): {"partition": {out: self.dp}, "map": devs}},
                }));
            }
        }
        json!({"label": format!("{self:?}"), "nodes": nodes})
    }
}

/// A proptest strategy over end-to-end cases on at most eight devices.
pub fn mlp_cases() -> impl proptest::strategy::Strategy<Value = MlpCase> {
    use proptest::prelude::*;
    (1usize..=4, prop::sample::select(vec![1usize, 2, 4]), 1usize..=4, 1u32..=4, 0u32..=4, any::<bool>(), any::<bool>())
        .prop_filter_map("fits eight devices", |(blocks, dp, pp, m, mo, zero, recompute)| {
            let pp = pp.min(blocks);
            (dp * pp <= 8).then_some(MlpCase {
                blocks,
                dp,
                pp,
                m,
                max_ongoing: mo.min(m),
                zero,
                recompute,
            })
        })
}

/// A gradient all-reduce over `devices` with a fixed duration.
pub fn comm(id: usize, devices: Vec<usize>, dur: f64, preds: Vec<usize>) -> TaskNode {
    TaskNode {
        id,
        key: format!("c{id}"),
        kind: TaskKind::GradientComm,
        devices,
        subgraph: 0,
        micro_batch: Some(0),
        compute: None,
        comm: Some(CommInfo {
            primitive: Primitive::AllReduce,
            bytes: 1 << 20,
            tensor: 0,
        }),
        reads: Vec::new(),
        writes: Vec::new(),
        preds,
        duration: Some(dur),
        bottleneck: None,
    }
}

/// Wraps `tasks` in one forward instance on one unit.
pub fn one_instance(tasks: Vec<TaskNode>, n_dev: usize) -> ExecutionGraph {
    ExecutionGraph {
        model: "share".into(),
        batch_size: 1,
        n_micro_batch: 1,
        n_devices: n_dev,
        units: vec![StageUnit {
            id: 0,
            nodes: vec![0],
            devices: (0..n_dev).collect(),
            schedule_node: 0,
            layers: Vec::new(),
        }],
        subgraphs: vec![ExecSubgraph {
            id: 0,
            phase: SubgraphPhase::Forward,
            unit: 0,
            origin: 0,
            micro_batch: 0,
            block: 0,
            devices: (0..n_dev).collect(),
            tasks: (0..tasks.len()).collect(),
            data_preds: Vec::new(),
            control_preds: Vec::new(),
        }],
        tasks,
        shards: Vec::new(),
    }
}
