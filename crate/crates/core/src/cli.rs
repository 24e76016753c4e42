//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cost::{collective_cost, load_corrections, load_cost_table, CorrectionFactors};
use crate::error::Error;
use crate::layout::{
    infer_transform, layout_of, plan_volume, verify_plan, LayoutSource, PlacementLayout,
};
use crate::model::{validate_graph, ModelGraph, Phase};
use crate::sim::{SimOptions, SimReport};
use crate::strategy::{validate_strategy, StrategyTree};
use crate::{compile, load_cluster, prepare_model, prepare_strategy, ClusterSpec};

#[derive(Debug, Parser)]
#[command(
    name = "stratsim",
    version,
    about = "Compile and simulate parallelization strategies for DNN training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    pub format: Format,
    /// Write the main output here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub costs: PathBuf,
    #[arg(long)]
    pub corrections: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a model, and optionally a strategy against a cluster.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<PathBuf>,
    },
    /// Lower a strategy into an execution graph.
    Compile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: PathBuf,
        /// Write the full graph as JSON.
        #[arg(long)]
        dump_graph: Option<PathBuf>,
    },
    /// Predict iteration time and memory for one strategy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: PathBuf,
        #[command(flatten)]
        cost: CostArgs,
        #[arg(long)]
        dump_graph: Option<PathBuf>,
        /// Write a trace-viewer timeline.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Rank several strategies by predicted throughput.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        strategy: Vec<PathBuf>,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Show the communication inferred between two layouts of a tensor.
    ExplainTransform {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: PathBuf,
        #[arg(long)]
        tensor: String,
        /// memory | producer | consumer:<op> (op as name or layer/name)
        #[arg(long)]
        src: String,
        #[arg(long)]
        dst: String,
    },
    /// Print the fully propagated strategy.
    DumpStrategy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: PathBuf,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_OOM: i32 = 2;

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Other(format!("cannot read {}: {e}", path.display())))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| Error::Other(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut s = std::io::stdout().lock();
            let _ = s.write_all(text.as_bytes());
            if !text.ends_with('\n') {
                let _ = s.write_all(b"\n");
            }
            Ok(())
        }
    }
}

fn write_file(p: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(p, text).map_err(|e| Error::Other(format!("cannot write {}: {e}", p.display())))
}

fn cluster(c: &Common) -> Result<ClusterSpec, Error> {
    let p = c
        .cluster
        .as_ref()
        .ok_or_else(|| Error::Other("--cluster is required for this command".into()))?;
    Ok(load_cluster(p)?)
}

fn strategy(model: &ModelGraph, path: &Path) -> Result<StrategyTree, Error> {
    prepare_strategy(model, &read(path)?)
}

fn corrections(c: &CostArgs) -> Result<CorrectionFactors, Error> {
    Ok(match &c.corrections {
        Some(p) => load_corrections(p)?,
        None => CorrectionFactors::default(),
    })
}

fn execute(cmd: Command) -> Result<i32, Error> {
    match cmd {
        Command::Validate {
            common,
            strategy: s,
        } => {
            let model = prepare_model(&read(&common.model)?)?;
            let mut diags = validate_graph(&model);
            let mut notes = Vec::new();
            if let Some(s) = s {
                let tree = strategy(&model, &s)?;
                notes = tree.notes.clone();
                if common.cluster.is_some() {
                    diags.extend(validate_strategy(&tree, &model, &cluster(&common)?));
                }
            }
            let text = match common.format {
                Format::Json => serde_json::to_string_pretty(&serde_json::json!({
                    "valid": diags.is_empty(), "errors": diags, "notes": notes,
                }))
                .expect("json"),
                Format::Text => {
                    let mut t = String::new();
                    for d in &diags {
                        t.push_str(&format!("error: {d}\n"));
                    }
                    for n in &notes {
                        t.push_str(&format!("note: {n}\n"));
                    }
                    if diags.is_empty() {
                        t.push_str(&format!(
                            "ok: {} layers, {} operators, {} tensors\n",
                            model.layers.len(),
                            model.ops.len(),
                            model.tensors.len()
                        ));
                    }
                    t
                }
            };
            emit(&common.output, &text)?;
            Ok(if diags.is_empty() {
                EXIT_OK
            } else {
                EXIT_INPUT
            })
        }
        Command::Compile {
            common,
            strategy: s,
            dump_graph,
        } => {
            let model = prepare_model(&read(&common.model)?)?;
            let cl = cluster(&common)?;
            let tree = strategy(&model, &s)?;
            check(&tree, &model, &cl)?;
            let g = compile(&model, &tree, &cl)?;
            if let Some(p) = dump_graph {
                write_file(&p, &serde_json::to_string(&g.to_json()).expect("json"))?;
            }
            let summary = serde_json::json!({
                "units": g.units.len(),
                "subgraphs": g.subgraphs.len(),
                "tasks": g.tasks.len(),
                "compute_tasks": g.count(crate::TaskKind::Compute),
                "feature_comm_tasks": g.count(crate::TaskKind::FeatureComm),
                "gradient_comm_tasks": g.count(crate::TaskKind::GradientComm),
                "shards": g.shards.len(),
                "control_edges": g.control_edges().len(),
            });
            let text = match common.format {
                Format::Json => serde_json::to_string_pretty(&summary).expect("json"),
                Format::Text => format!(
                    "{} stage unit(s), {} subgraph instance(s), {} tasks ({} compute, {} feature comm, {} gradient comm), {} control edges\n",
                    g.units.len(),
                    g.subgraphs.len(),
                    g.tasks.len(),
                    summary["compute_tasks"],
                    summary["feature_comm_tasks"],
                    summary["gradient_comm_tasks"],
                    summary["control_edges"]
                ),
            };
            emit(&common.output, &text)?;
            Ok(EXIT_OK)
        }
        Command::Simulate {
            common,
            strategy: s,
            cost,
            dump_graph,
            trace,
        } => {
            let model = prepare_model(&read(&common.model)?)?;
            let cl = cluster(&common)?;
            let tree = strategy(&model, &s)?;
            let table = load_cost_table(&cost.costs)?;
            let corr = corrections(&cost)?;
            let (g, r) = crate::run(
                &model,
                &tree,
                &cl,
                &table,
                &corr,
                &SimOptions {
                    gamma: cost.gamma,
                    ..Default::default()
                },
            )?;
            if let Some(p) = dump_graph {
                write_file(&p, &serde_json::to_string(&g.to_json()).expect("json"))?;
            }
            if let Some(p) = trace {
                write_file(&p, &r.chrome_trace())?;
            }
            let text = match common.format {
                Format::Json => r.to_json(),
                Format::Text => r.to_text(),
            };
            emit(&common.output, &text)?;
            Ok(if r.oom { EXIT_OOM } else { EXIT_OK })
        }
        Command::Compare {
            common,
            strategy: list,
            cost,
        } => {
            let model = prepare_model(&read(&common.model)?)?;
            let cl = cluster(&common)?;
            let table = load_cost_table(&cost.costs)?;
            let corr = corrections(&cost)?;
            let mut inputs = Vec::new();
            for p in &list {
                let tree = strategy(&model, p)?;
                let label = strategy_label(&tree, &model, p);
                inputs.push((label, tree));
            }
            let opts = SimOptions {
                gamma: cost.gamma,
                ..Default::default()
            };
            let results: Vec<Result<SimReport, Error>> = std::thread::scope(|s| {
                let handles: Vec<_> = inputs
                    .iter()
                    .map(|(_, tree)| {
                        s.spawn(|| crate::run(&model, tree, &cl, &table, &corr, &opts).map(|x| x.1))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("simulation thread"))
                    .collect()
            });
            let mut reports = Vec::new();
            for ((label, _), r) in inputs.into_iter().zip(results) {
                reports.push((label, r?));
            }
            let cmp = ComparisonReport::new(reports.iter().map(|(l, r)| (l.clone(), r)));
            if cmp.ranking.is_empty() {
                eprintln!("warning: every strategy is predicted to run out of memory");
            }
            let text = match common.format {
                Format::Json => serde_json::to_string_pretty(&cmp).expect("json"),
                Format::Text => cmp.to_text(),
            };
            emit(&common.output, &text)?;
            Ok(EXIT_OK)
        }
        Command::ExplainTransform {
            common,
            strategy: s,
            tensor,
            src,
            dst,
        } => {
            let model = prepare_model(&read(&common.model)?)?;
            let cl = cluster(&common)?;
            let tree = strategy(&model, &s)?;
            let t = model
                .tensor_by_name(&tensor)
                .ok_or_else(|| Error::Other(format!("unknown tensor '{tensor}'")))?;
            let a = endpoint(&model, &tree, t, &src)?;
            let b = endpoint(&model, &tree, t, &dst)?;
            let plan = infer_transform(&a, &b)?;
            let ok = verify_plan(&a, &b, &plan);
            let volume = plan_volume(&plan, &cl);
            let costs = plan
                .steps
                .iter()
                .map(|st| collective_cost(st.primitive, st.bytes, &st.group, &cl, &CorrectionFactors::default()))
                .collect::<Result<Vec<_>, _>>()?;
            let text = match common.format {
                Format::Json => serde_json::to_string_pretty(&serde_json::json!({
                    "tensor": tensor, "src": a, "dst": b, "plan": plan, "verified": ok, "step_costs": costs,
                    "volume_by_level": volume.iter().map(|(l, v)| (l.as_str(), *v)).collect::<std::collections::BTreeMap<_, _>>(),
                }))
                .expect("json"),
                Format::Text => {
                    let mut out = format!("{tensor}: {} step(s), verified: {ok}\n", plan.steps.len());
                    for (st, c) in plan.steps.iter().zip(&costs) {
                        out.push_str(&format!(
                            "  stage {} {} over {:?}, {} bytes, {:.6e} s ({} bottleneck, {:.3e} B/s)\n",
                            st.stage,
                            st.primitive.as_str(),
                            st.group,
                            st.bytes,
                            c.duration,
                            c.bottleneck.as_str(),
                            c.bandwidth
                        ));
                    }
                    for (l, v) in &volume {
                        out.push_str(&format!("  {}: {:.0} bytes on the wire\n", l.as_str(), v));
                    }
                    out
                }
            };
            emit(&common.output, &text)?;
            Ok(EXIT_OK)
        }
        Command::DumpStrategy {
            common,
            strategy: s,
        } => {
            let model = prepare_model(&read(&common.model)?)?;
            let tree = strategy(&model, &s)?;
            emit(&common.output, &tree.dump(&model))?;
            Ok(EXIT_OK)
        }
    }
}

fn check(tree: &StrategyTree, model: &ModelGraph, cl: &ClusterSpec) -> Result<(), Error> {
    let d = validate_strategy(tree, model, cl);
    if d.is_empty() {
        Ok(())
    } else {
        Err(Error::Other(d.join("\n")))
    }
}

fn endpoint(
    model: &ModelGraph,
    tree: &StrategyTree,
    t: usize,
    spec: &str,
) -> Result<PlacementLayout, Error> {
    let ten = &model.tensors[t];
    let missing = || Error::Other(format!("'{}' has no config", ten.name));
    if spec == "memory" {
        return Ok(layout_of(
            ten,
            LayoutSource::Memory(tree.tensor_config(t).ok_or_else(missing)?),
        ));
    }
    if spec == "producer" {
        let o = model
            .producer(t)
            .ok_or_else(|| Error::Other(format!("'{}' has no producer", ten.name)))?;
        let op = &model.ops[o];
        return Ok(layout_of(
            ten,
            LayoutSource::OpOutput(op, tree.op_config(o).ok_or_else(missing)?),
        ));
    }
    if let Some(name) = spec.strip_prefix("consumer:") {
        let found: Vec<usize> = ten
            .consumers
            .iter()
            .copied()
            .filter(|&c| {
                let op = &model.ops[c];
                op.name == name || format!("{}/{}", model.layers[op.layer].name, op.name) == name
            })
            .collect();
        let o = match found.as_slice() {
            [o] => *o,
            [] => {
                return Err(Error::Other(format!(
                    "'{name}' does not consume '{}'",
                    ten.name
                )))
            }
            _ => return Err(Error::Other(format!("'{name}' is ambiguous; use layer/op"))),
        };
        let op = &model.ops[o];
        return Ok(layout_of(
            ten,
            LayoutSource::OpInput(op, tree.op_config(o).ok_or_else(missing)?),
        ));
    }
    Err(Error::Other(format!(
        "bad layout endpoint '{spec}'; use memory, producer or consumer:<op>"
    )))
}

/// DPxMPxPP(n_micro_batch) derived from the forward configs, or the file's label.
pub fn strategy_label(tree: &StrategyTree, model: &ModelGraph, path: &Path) -> String {
    if let Some(l) = &tree.label {
        return l.clone();
    }
    let mut dp = 1;
    let mut mp = 1;
    for o in model.ops_in_phase(Phase::Forward) {
        if let Some(c) = tree.op_config(o) {
            let b = c.partition.degree(&model.batch_dim) as usize;
            dp = dp.max(b * c.map.0.first().map_or(1, |r| r.len()));
            mp = mp.max(c.partition.parts() / b);
        }
    }
    match crate::compiler::divide_subgraphs(tree, model) {
        Ok(units) => {
            let m = tree.schedule(units[0].schedule_node).n_micro_batch;
            format!("{dp}x{mp}x{}({m})", units.len())
        }
        Err(_) => path.display().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonEntry {
    pub label: String,
    pub iteration_time: f64,
    pub throughput: f64,
    pub peak_bytes: u64,
    pub oom: bool,
    /// 1-based rank by throughput; `None` when OOM.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub entries: Vec<ComparisonEntry>,
    /// Labels of non-OOM strategies, fastest first.
    pub ranking: Vec<String>,
}

impl ComparisonReport {
    pub fn new<'a>(reports: impl IntoIterator<Item = (String, &'a SimReport)>) -> Self {
        let mut entries: Vec<ComparisonEntry> = reports
            .into_iter()
            .map(|(label, r)| ComparisonEntry {
                label,
                iteration_time: r.iteration_time,
                throughput: r.throughput,
                peak_bytes: r.devices.iter().map(|d| d.peak_bytes).max().unwrap_or(0),
                oom: r.oom,
                rank: None,
            })
            .collect();
        let mut order: Vec<usize> = (0..entries.len()).filter(|&i| !entries[i].oom).collect();
        order.sort_by(|&a, &b| {
            entries[b]
                .throughput
                .total_cmp(&entries[a].throughput)
                .then(a.cmp(&b))
        });
        for (r, &i) in order.iter().enumerate() {
            entries[i].rank = Some(r + 1);
        }
        let ranking = order.iter().map(|&i| entries[i].label.clone()).collect();
        ComparisonReport { entries, ranking }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24} {:>14} {:>16} {:>12} {:>5} {:>5}\n",
            "strategy", "iteration s", "samples/s", "peak MiB", "oom", "rank"
        );
        let mut rows: Vec<&ComparisonEntry> = self.entries.iter().collect();
        rows.sort_by_key(|e| (e.rank.is_none(), e.rank));
        for e in rows {
            s.push_str(&format!(
                "{:<24} {:>14.6} {:>16.3} {:>12.1} {:>5} {:>5}\n",
                e.label,
                e.iteration_time,
                e.throughput,
                e.peak_bytes as f64 / (1 << 20) as f64,
                if e.oom { "yes" } else { "no" },
                e.rank.map_or("-".to_string(), |r| r.to_string())
            ));
        }
        s
    }
}
