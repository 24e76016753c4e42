//! Model, strategy, cluster and cost-table builders shared by the test suites.
//! The static files under `fixtures/` are written from these.

use serde_json::{json, Value};

pub fn tensor(name: &str, dims: &[(&str, u64)], kind: &str) -> Value {
    json!({
        "name": name,
        "dims": dims.iter().map(|(l, e)| json!({"label": l, "extent": e})).collect::<Vec<_>>(),
        "dtype_bytes": 4,
        "kind": kind,
    })
}

pub fn op(name: &str, ty: &str, inputs: &[&str], outputs: &[&str], cost_key: &str) -> Value {
    json!({"name": name, "type": ty, "inputs": inputs, "outputs": outputs, "cost_key": cost_key})
}

pub fn layer(name: &str, path: &[String], tensors: Vec<Value>, ops: Vec<Value>) -> Value {
    json!({"name": name, "module_path": path, "tensors": tensors, "ops": ops})
}

pub fn single_node(n: usize, device_type: &str, memory: u64, class: &str, bw: f64) -> Value {
    json!({
        "n_nodes": 1,
        "devices_per_node": n,
        "device_type": device_type,
        "device_memory": memory,
        "intra_node_link": {"class": class, "bandwidth": bw, "alpha": 1e-6},
    })
}

pub const GIB: u64 = 1 << 30;

/// One node of eight PCIe devices on two sockets joined by QPI.
pub fn hc1() -> Value {
    json!({
        "n_nodes": 1,
        "devices_per_node": 8,
        "device_type": "TitanXp",
        "device_memory": 12 * GIB,
        "intra_node_link": {"class": "pcie", "bandwidth": 12e9, "alpha": 2e-6},
        "inter_socket_link": {"bandwidth": 9.6e9, "alpha": 3e-6},
        "sockets_per_node": 2,
    })
}

/// Four NVLink nodes of eight devices joined by 100 Gb/s NICs.
pub fn hc2() -> Value {
    json!({
        "n_nodes": 4,
        "devices_per_node": 8,
        "device_type": "V100",
        "device_memory": 32 * GIB,
        "intra_node_link": {"class": "nvlink", "bandwidth": 150e9, "alpha": 1e-6},
        "nic": {"bandwidth": 12.5e9, "alpha": 5e-6},
    })
}

pub fn wildcard_costs(
    device_type: &str,
    entries: &[(&str, f64)],
    peak_tflops: Option<f64>,
) -> Value {
    let mut v: Vec<Value> = entries
        .iter()
        .map(|(k, us)| json!({"cost_key": k, "device_type": device_type, "micros": us}))
        .collect();
    if let Some(p) = peak_tflops {
        v.push(json!({"device_type": device_type, "peak_tflops": p}));
    }
    Value::Array(v)
}

// ---------------------------------------------------------------- pipeline

/// `p` elementwise stages; the input carries a gradient so every stage has a backward.
pub fn pipeline_model(p: usize) -> Value {
    let mut layers = Vec::new();
    for i in 0..p {
        let x = if i == 0 {
            "x".to_string()
        } else {
            format!("y{}", i - 1)
        };
        let mut ts = Vec::new();
        if i == 0 {
            ts.push(tensor("x", &[("b", 840), ("h", 4)], "activation"));
        }
        ts.push(tensor(
            &format!("y{i}"),
            &[("b", 840), ("h", 4)],
            "activation",
        ));
        layers.push(layer(
            &format!("stage{i}"),
            &[],
            ts,
            vec![op("act", "elementwise", &[&x], &[&format!("y{i}")], "act")],
        ));
    }
    json!({"name": format!("pipeline{p}"), "batch_size": 840, "layers": layers})
}

/// Stage `i` on device `i`; `max_ongoing` 0 means all micro-batches in flight.
pub fn pipeline_strategy(p: usize, m: u32, max_ongoing: u32) -> Value {
    let mut nodes = vec![
        json!({"path": "/", "schedule": {"n_micro_batch": m, "max_ongoing_micro_batch": max_ongoing}}),
    ];
    for i in 0..p {
        nodes.push(json!({"path": format!("stage{i}"), "ops": {"act": {"map": [[i]]}}}));
    }
    json!({"label": format!("PP{p}({m})"), "nodes": nodes})
}

// ---------------------------------------------------------------- GPT-2-like

pub const GPT_BLOCKS: usize = 8;
const B: u64 = 16;
const S: u64 = 512;
const H: u64 = 768;
const K: u64 = 3 * H;
const F: u64 = 4 * H;
const V: u64 = 8192;

pub fn gpt2_model() -> Value {
    let bsh = [("b", B), ("s", S), ("h", H)];
    let mut layers = vec![layer(
        "embed",
        &[],
        vec![
            json!({"name": "ids", "dims": [{"label": "b", "extent": B}, {"label": "s", "extent": S}], "dtype_bytes": 4, "kind": "activation", "requires_grad": false}),
            tensor("wte", &[("v", V), ("h", H)], "parameter"),
            tensor("x0", &bsh, "activation"),
        ],
        vec![op("lookup", "embedding", &["ids", "wte"], &["x0"], "embed")],
    )];
    for i in 0..GPT_BLOCKS {
        let path = vec![format!("h{i}")];
        let n = |s: &str| format!("{s}{i}");
        let ln1 = json!({"name": "ln1", "type": "elementwise", "inputs": [n("x")], "outputs": [n("a")], "cost_key": "ln", "exclude_dims": ["h"]});
        layers.push(layer(
            "attn",
            &path,
            vec![
                tensor(&n("a"), &bsh, "activation"),
                tensor(&n("wqkv"), &[("k", K), ("h", H)], "parameter"),
                tensor(&n("q"), &[("b", B), ("s", S), ("k", K)], "activation"),
                tensor(&n("c"), &[("b", B), ("s", S), ("k", K)], "activation"),
                tensor(&n("wo"), &[("h", H), ("k", K)], "parameter"),
                tensor(&n("p"), &bsh, "activation"),
                tensor(&n("r"), &bsh, "activation"),
            ],
            vec![
                ln1,
                op("qkv", "matmul", &[&n("a"), &n("wqkv")], &[&n("q")], "qkv"),
                op("core", "elementwise", &[&n("q")], &[&n("c")], "attn_core"),
                op("proj", "matmul", &[&n("c"), &n("wo")], &[&n("p")], "proj"),
                op("add", "elementwise", &[&n("x"), &n("p")], &[&n("r")], "add"),
            ],
        ));
        let next = format!("x{}", i + 1);
        let ln2 = json!({"name": "ln2", "type": "elementwise", "inputs": [n("r")], "outputs": [n("m")], "cost_key": "ln", "exclude_dims": ["h"]});
        layers.push(layer(
            "mlp",
            &path,
            vec![
                tensor(&n("m"), &bsh, "activation"),
                tensor(&n("w1_"), &[("f", F), ("h", H)], "parameter"),
                tensor(&n("g"), &[("b", B), ("s", S), ("f", F)], "activation"),
                tensor(&n("e"), &[("b", B), ("s", S), ("f", F)], "activation"),
                tensor(&n("w2_"), &[("h", H), ("f", F)], "parameter"),
                tensor(&n("o"), &bsh, "activation"),
                tensor(&next, &bsh, "activation"),
            ],
            vec![
                ln2,
                op("fc1", "matmul", &[&n("m"), &n("w1_")], &[&n("g")], "fc1"),
                op("gelu", "elementwise", &[&n("g")], &[&n("e")], "gelu"),
                op("fc2", "matmul", &[&n("e"), &n("w2_")], &[&n("o")], "fc2"),
                op("add", "elementwise", &[&n("r"), &n("o")], &[&next], "add"),
            ],
        ));
    }
    let last = format!("x{GPT_BLOCKS}");
    layers.push(layer(
        "head",
        &[],
        vec![
            tensor("z", &bsh, "activation"),
            tensor("wout", &[("v", V), ("h", H)], "parameter"),
            tensor("logits", &[("b", B), ("s", S), ("v", V)], "activation"),
        ],
        vec![
            json!({"name": "lnf", "type": "elementwise", "inputs": [last], "outputs": ["z"], "cost_key": "ln", "exclude_dims": ["h"]}),
            op("logits", "matmul", &["z", "wout"], &["logits"], "lm_head"),
        ],
    ));
    json!({"name": "gpt2-like", "batch_size": B, "layers": layers})
}

pub fn gpt2_costs() -> Value {
    wildcard_costs(
        "TitanXp",
        &[
            ("embed", 60.0),
            ("embed.grad_in1", 120.0),
            ("optimizer_step", 15.0),
        ],
        Some(12.0),
    )
}

/// The (dp, mp, pp, n_micro_batch) mixes compared in the ranking tests.
pub const GPT_MIXES: [(usize, usize, usize, u32); 8] = [
    (8, 1, 1, 1),
    (1, 8, 1, 1),
    (4, 2, 1, 1),
    (2, 4, 1, 1),
    (4, 1, 2, 4),
    (2, 1, 4, 4),
    (1, 1, 8, 8),
    (2, 2, 2, 4),
];

/// Megatron-style tensor parallelism inside each stage, data parallelism
/// across replicas, and contiguous blocks per pipeline stage.
pub fn gpt2_strategy(dp: usize, mp: usize, pp: usize, m: u32) -> Value {
    let per_stage = dp * mp;
    let stage_devs = |s: usize| -> Vec<usize> { (s * per_stage..(s + 1) * per_stage).collect() };
    let bpart = |extra: Option<&str>| -> Value {
        let mut p = serde_json::Map::new();
        if dp > 1 {
            p.insert("b".into(), json!(dp));
        }
        if let Some(l) = extra {
            p.insert(l.into(), json!(mp));
        }
        Value::Object(p)
    };
    let rep = |s: usize| -> Value {
        let devs = stage_devs(s);
        json!({"partition": bpart(None), "map": devs.chunks(mp).map(|c| c.to_vec()).collect::<Vec<_>>()})
    };
    let col = |s: usize, l: &str| -> Value {
        json!({"partition": bpart(Some(l)), "map": stage_devs(s).into_iter().map(|d| vec![d]).collect::<Vec<_>>()})
    };
    let mut nodes = vec![json!({"path": "/", "schedule": {"n_micro_batch": m}})];
    let mut leaf = |path: String, s: usize, ops: Vec<(&str, Value)>| {
        if mp == 1 {
            nodes.push(json!({"path": path, "default": rep(s)}));
        } else {
            let ops: serde_json::Map<String, Value> =
                ops.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            nodes.push(json!({"path": path, "ops": ops}));
        }
    };
    leaf("embed".into(), 0, vec![("lookup", col(0, "v"))]);
    for i in 0..GPT_BLOCKS {
        let s = i * pp / GPT_BLOCKS;
        leaf(
            format!("h{i}/attn"),
            s,
            vec![
                ("ln1", rep(s)),
                ("qkv", col(s, "k")),
                ("core", col(s, "k")),
                ("proj", col(s, "k")),
                ("add", rep(s)),
            ],
        );
        leaf(
            format!("h{i}/mlp"),
            s,
            vec![
                ("ln2", rep(s)),
                ("fc1", col(s, "f")),
                ("gelu", col(s, "f")),
                ("fc2", col(s, "f")),
                ("add", rep(s)),
            ],
        );
    }
    leaf(
        "head".into(),
        pp - 1,
        vec![("lnf", rep(pp - 1)), ("logits", col(pp - 1, "v"))],
    );
    json!({"label": format!("{dp}x{mp}x{pp}({m})"), "nodes": nodes})
}

// ---------------------------------------------------------------- VGG19

const VGG_CFG: [&[u64]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256, 256],
    &[512, 512, 512, 512],
    &[512, 512, 512, 512],
];

pub fn vgg19_model(batch: u64) -> Value {
    let chl = ["c", "d"];
    let mut side = 224u64;
    let mut cur = "img".to_string();
    let mut ch_in = 3u64;
    let mut lab = 0usize;
    let mut layers = Vec::new();
    let mut first = true;
    let mut idx = 0;
    for (j, block) in VGG_CFG.iter().enumerate() {
        let p = format!("p{}", j + 1);
        let px = side * side;
        for &ch in block.iter() {
            let (li, lo) = (chl[lab % 2], chl[(lab + 1) % 2]);
            let w = format!("w{idx}");
            let y = format!("y{idx}");
            let mut ts = Vec::new();
            if first {
                ts.push(json!({"name": "img", "dims": [{"label": "b", "extent": batch}, {"label": li, "extent": ch_in}, {"label": p, "extent": px}], "dtype_bytes": 4, "kind": "activation", "requires_grad": false}));
                first = false;
            }
            ts.push(tensor(&w, &[(lo, ch), (li, ch_in), ("k", 9)], "parameter"));
            ts.push(tensor(
                &y,
                &[("b", batch), (lo, ch), (&p, px)],
                "activation",
            ));
            layers.push(layer(
                &format!("conv{idx}"),
                &[format!("block{}", j + 1)],
                ts,
                vec![op(
                    "conv",
                    "conv",
                    &[&cur, &w],
                    &[&y],
                    &format!("conv{idx}"),
                )],
            ));
            cur = y;
            ch_in = ch;
            lab += 1;
            idx += 1;
        }
        side /= 2;
        let q = format!("p{}", j + 2);
        let z = format!("pool{}", j + 1);
        let l = chl[lab % 2];
        layers.push(layer(
            &z,
            &[format!("block{}", j + 1)],
            vec![tensor(&z, &[("b", batch), (l, ch_in), (&q, side * side)], "activation")],
            vec![json!({"name": "pool", "type": "pool", "inputs": [cur], "outputs": [z], "cost_key": format!("pool{}", j + 1), "new_dims": [q]})],
        ));
        cur = z;
    }
    let l = chl[lab % 2];
    let fc = [("o", 4096u64), ("e", 4096), ("v", 1000)];
    let mut prev: Vec<(String, u64)> = vec![(l.to_string(), ch_in), ("p6".into(), 49)];
    for (i, &(lo, n)) in fc.iter().enumerate() {
        let w = format!("fc{i}_w");
        let y = format!("fc{i}_y");
        let mut wd: Vec<(&str, u64)> = vec![(lo, n)];
        wd.extend(prev.iter().map(|(a, e)| (a.as_str(), *e)));
        layers.push(layer(
            &format!("fc{i}"),
            &["classifier".to_string()],
            vec![
                tensor(&w, &wd, "parameter"),
                tensor(&y, &[("b", batch), (lo, n)], "activation"),
            ],
            vec![op("fc", "matmul", &[&cur, &w], &[&y], &format!("fc{i}"))],
        ));
        cur = y;
        prev = vec![(lo.to_string(), n)];
    }
    json!({"name": "vgg19", "batch_size": batch, "layers": layers})
}

pub fn vgg19_costs() -> Value {
    let mut e: Vec<(String, f64)> = (1..=5)
        .map(|j| (format!("pool{j}"), 150.0 / j as f64))
        .collect();
    e.extend((1..=5).map(|j| (format!("pool{j}.grad_in0"), 300.0 / j as f64)));
    e.push(("optimizer_step".into(), 20.0));
    let r: Vec<(&str, f64)> = e.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    wildcard_costs("V100", &r, Some(14.0))
}

pub fn data_parallel(n: usize, label: &str) -> Value {
    json!({"label": label, "nodes": [{"path": "/", "default": {"partition": {"b": n}, "map": (0..n).map(|d| vec![d]).collect::<Vec<_>>()}}]})
}

// ---------------------------------------------------------------- memory

/// `n` blocks of matmul then elementwise over (b, h/o); every block sits under
/// its own module node so recomputation can be switched per block.
pub fn mlp_model(n: usize, batch: u64, width: u64) -> Value {
    let lab = ["h", "o"];
    let mut layers = Vec::new();
    for i in 0..n {
        let (a, b) = (lab[i % 2], lab[(i + 1) % 2]);
        let x = if i == 0 {
            "x".to_string()
        } else {
            format!("y{}", i - 1)
        };
        let mut ts = Vec::new();
        if i == 0 {
            ts.push(json!({"name": "x", "dims": [{"label": "b", "extent": batch}, {"label": a, "extent": width}], "dtype_bytes": 4, "kind": "activation", "requires_grad": false}));
        }
        ts.push(tensor(
            &format!("w{i}"),
            &[(b, width), (a, width)],
            "parameter",
        ));
        ts.push(tensor(
            &format!("u{i}"),
            &[("b", batch), (b, width)],
            "activation",
        ));
        ts.push(tensor(
            &format!("y{i}"),
            &[("b", batch), (b, width)],
            "activation",
        ));
        layers.push(layer(
            &format!("l{i}"),
            &[format!("blk{i}")],
            ts,
            vec![
                op(
                    "fc",
                    "matmul",
                    &[&x, &format!("w{i}")],
                    &[&format!("u{i}")],
                    "fc",
                ),
                op(
                    "act",
                    "elementwise",
                    &[&format!("u{i}")],
                    &[&format!("y{i}")],
                    "act",
                ),
            ],
        ));
    }
    json!({"name": format!("mlp{n}"), "batch_size": batch, "layers": layers})
}

/// Data parallel over `n` devices, optionally with parameters (and so
/// gradients and optimizer states) sharded and with per-block recomputation.
pub fn mlp_strategy(blocks: usize, n: usize, m: u32, zero: bool, recompute: bool) -> Value {
    let lab = ["h", "o"];
    let part = if n > 1 { json!({"b": n}) } else { json!({}) };
    let mut nodes = vec![json!({
        "path": "/",
        "schedule": {"n_micro_batch": m},
        "default": {"partition": part, "map": (0..n).map(|d| vec![d]).collect::<Vec<_>>()},
    })];
    for i in 0..blocks {
        let mut e = json!({"path": format!("blk{i}")});
        if recompute {
            e["schedule"] = json!({"n_micro_batch": m, "recompute": true});
        }
        nodes.push(e);
        if zero && n > 1 {
            let out = lab[(i + 1) % 2];
            nodes.push(json!({
                "path": format!("blk{i}/l{i}"),
                "tensors": {format!("w{i}"): {"partition": {out: n}, "map": (0..n).map(|d| vec![d]).collect::<Vec<_>>()}},
            }));
        }
    }
    let label = match (zero, recompute) {
        (false, false) => "DP",
        (true, false) => "DP+ZeRO",
        (false, true) => "DP+recompute",
        (true, true) => "DP+ZeRO+recompute",
    };
    json!({"label": label, "nodes": nodes})
}

/// Sizes at which plain data parallelism overflows a 16 GiB device.
pub const OOM_BLOCKS: usize = 3;
pub const OOM_BATCH: u64 = 131072;
pub const OOM_WIDTH: u64 = 16384;

/// Eight 16 GiB devices on one NVLink node.
pub fn v100x8_16g() -> Value {
    single_node(8, "V100", 16 * GIB, "nvlink", 150e9)
}

pub fn mlp_costs() -> Value {
    wildcard_costs("V100", &[("optimizer_step", 50.0)], Some(14.0))
}
