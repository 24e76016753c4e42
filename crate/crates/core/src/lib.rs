//! Performance modeling for distributed DNN training.
//!
//! A model graph and a hierarchical strategy tree are lowered into an
//! execution graph of compute and communication tasks, which an event-driven
//! simulator runs against a cluster description to predict iteration time and
//! per-device memory.

pub mod cli;
pub mod cluster;
pub mod compiler;
pub mod cost;
pub mod error;
pub mod layout;
pub mod model;
pub mod sim;
pub mod strategy;

pub use cluster::{load_cluster, parse_cluster, ClusterSpec, LinkLevel};
pub use compiler::{compile, divide_subgraphs, split_operator, ExecutionGraph, TaskKind};
pub use cost::{
    annotate_costs, collective_cost, load_corrections, load_cost_table, parse_cost_table,
    ComputeCostTable, CorrectionFactors,
};
pub use error::Error;
pub use layout::{infer_transform, verify_plan, CommPlan, PlacementLayout, Primitive};
pub use model::{derive_backward, load_model, parse_model, validate_graph, ModelGraph};
pub use sim::{simulate, simulate_with, SimOptions, SimReport};
pub use strategy::{construct_tree, load_strategy, parse_strategy, StrategyTree};

/// Parses a model and derives its backward and optimizer phases.
pub fn prepare_model(text: &str) -> Result<ModelGraph, Error> {
    Ok(derive_backward(&parse_model(text)?))
}

/// Builds the tree for `model`, applies a strategy file and propagates it.
pub fn prepare_strategy(model: &ModelGraph, text: &str) -> Result<StrategyTree, Error> {
    let tree = construct_tree(model)?;
    let mut tree = parse_strategy(&tree, model, text)?;
    tree.propagate(model)?;
    Ok(tree)
}

/// Compiles, annotates and simulates one strategy.
pub fn run(
    model: &ModelGraph,
    tree: &StrategyTree,
    cluster: &ClusterSpec,
    costs: &ComputeCostTable,
    corrections: &CorrectionFactors,
    opts: &SimOptions,
) -> Result<(ExecutionGraph, SimReport), Error> {
    let diags = strategy::validate_strategy(tree, model, cluster);
    if !diags.is_empty() {
        return Err(Error::Other(diags.join("\n")));
    }
    let mut g = compile(model, tree, cluster)?;
    annotate_costs(&mut g, costs, cluster, corrections)?;
    let r = simulate_with(&g, cluster, opts)?;
    Ok((g, r))
}
