#![allow(dead_code)]

pub mod gen;
pub mod models;
pub mod oracle;

use std::path::PathBuf;

use serde_json::Value;
use stratsim::compiler::ExecutionGraph;
use stratsim::sim::SimReport;
use stratsim::{
    annotate_costs, compile, parse_cluster, parse_cost_table, prepare_model, prepare_strategy,
    simulate_with, ClusterSpec, ComputeCostTable, CorrectionFactors, ModelGraph, SimOptions,
    StrategyTree,
};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

/// Every static fixture file, keyed by its path under `fixtures/`.
pub fn fixture_set() -> Vec<(String, Value)> {
    use models::*;
    let mut out = vec![
        ("clusters/hc1.json".to_string(), hc1()),
        ("clusters/hc2.json".into(), hc2()),
        ("clusters/v100x8_16g.json".into(), v100x8_16g()),
        ("clusters/pipeline4.json".into(), single_node(4, "V100", 16 * GIB, "nvlink", 150e9)),
        ("pipeline/model.json".into(), pipeline_model(4)),
        ("pipeline/strategy.json".into(), pipeline_strategy(4, 8, 0)),
        (
            "pipeline/costs.json".into(),
            wildcard_costs("V100", &[("act", 976.5625), ("act.grad_in0", 1953.125)], None),
        ),
        ("gpt2/model.json".into(), gpt2_model()),
        ("gpt2/costs.json".into(), gpt2_costs()),
        ("vgg19/model.json".into(), vgg19_model(512)),
        ("vgg19/costs.json".into(), vgg19_costs()),
        ("vgg19/dp32.json".into(), data_parallel(32, "DP32")),
        ("mlp/model.json".into(), mlp_model(OOM_BLOCKS, OOM_BATCH, OOM_WIDTH)),
        ("mlp/dp.json".into(), mlp_strategy(OOM_BLOCKS, 8, 1, false, false)),
        ("mlp/zero_recompute.json".into(), mlp_strategy(OOM_BLOCKS, 8, 1, true, true)),
        ("mlp/costs.json".into(), mlp_costs()),
    ];
    for &(dp, mp, pp, m) in &GPT_MIXES {
        out.push((format!("gpt2/strategies/{dp}x{mp}x{pp}_{m}.json"), gpt2_strategy(dp, mp, pp, m)));
    }
    out
}

/// File text for a fixture value.
pub fn fixture_text(v: &Value) -> String {
    serde_json::to_string_pretty(v).unwrap() + "\n"
}

pub fn prepare(model: &Value, strategy: &Value) -> (ModelGraph, StrategyTree) {
    let g = prepare_model(&model.to_string()).expect("model");
    let t = prepare_strategy(&g, &strategy.to_string()).expect("strategy");
    (g, t)
}

pub fn cluster(v: &Value) -> ClusterSpec {
    parse_cluster(&v.to_string()).expect("cluster")
}

pub fn costs(v: &Value) -> ComputeCostTable {
    parse_cost_table(&v.to_string()).expect("costs")
}

/// Compiles and annotates with unit correction factors.
pub fn build(
    model: &Value,
    strategy: &Value,
    c: &ClusterSpec,
    table: &ComputeCostTable,
) -> ExecutionGraph {
    let (g, t) = prepare(model, strategy);
    let mut eg = compile(&g, &t, c).expect("compile");
    annotate_costs(&mut eg, table, c, &CorrectionFactors::default()).expect("annotate");
    eg
}

pub fn sim(eg: &ExecutionGraph, c: &ClusterSpec, opts: &SimOptions) -> SimReport {
    let r = simulate_with(eg, c, opts).expect("simulate");
    assert_resident_is_persistent(&r);
    r
}

pub fn assert_resident_is_persistent(r: &SimReport) {
    for d in &r.devices {
        assert_eq!(
            d.final_bytes, d.persistent_bytes,
            "device {} ends with {} resident bytes, {} persistent",
            d.device, d.final_bytes, d.persistent_bytes
        );
    }
}

pub fn peak(r: &SimReport) -> u64 {
    r.devices.iter().map(|d| d.peak_bytes).max().unwrap_or(0)
}

/// Prints one acceptance line and returns whether it passed.
pub fn report(n: u32, name: &str, res: Result<String, String>) -> bool {
    match res {
        Ok(detail) => {
            println!("criterion {n:>2} PASS  {name}: {detail}");
            true
        }
        Err(why) => {
            println!("criterion {n:>2} FAIL  {name}: {why}");
            false
        }
    }
}
