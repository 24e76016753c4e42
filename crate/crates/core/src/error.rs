use thiserror::Error;

use crate::cost::CostError;
use crate::layout::TransformError;

/// Problems found while loading or validating a model description.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("model schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("empty model")]
    Empty,
    #[error("{path}: unknown operator type '{ty}'")]
    UnknownOpType { path: String, ty: String },
    #[error("{path}: dangling tensor reference '{name}'")]
    DanglingTensor { path: String, name: String },
    #[error("{path}: duplicate name '{name}'")]
    Duplicate { path: String, name: String },
    #[error("invalid model:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("strategy schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("inconsistent module paths: '{0}' is both a layer and a module")]
    InconsistentPath(String),
    #[error("duplicate layer path '{0}'")]
    DuplicateLayer(String),
    #[error("unknown tree node '{0}'")]
    UnknownNode(String),
    #[error("node '{node}' has no operator or tensor named '{name}'")]
    UnknownObject { node: String, name: String },
    #[error("node '{0}' is not a leaf; only leaves carry operator and tensor configs")]
    NotLeaf(String),
    #[error("dim '{dim}' is not parallelizable for {object}")]
    BadDim { dim: String, object: String },
    #[error("{object}: map has {map} entries but partition has {parts} parts")]
    MapSize {
        object: String,
        map: usize,
        parts: usize,
    },
    #[error("{object}: {message}")]
    BadConfig { object: String, message: String },
    #[error("underdetermined configs (no rule reaches them): {}", .0.join(", "))]
    Underdetermined(Vec<String>),
    #[error("node '{0}' has an unconfigured descendant")]
    Unconfigured(String),
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cluster schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid cluster: {0}")]
    Invalid(String),
    #[error("communication group needs at least 2 devices, got {0:?}")]
    SingletonGroup(Vec<usize>),
    #[error("device {0} does not exist")]
    NoDevice(usize),
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("tensor '{tensor}': {source}")]
    Transform {
        tensor: String,
        source: TransformError,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("dependency cycle closed by control edge {from} -> {to}")]
    Cycle { from: String, to: String },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("task {0} has no duration; annotate costs first")]
    Unannotated(usize),
    #[error("deadlock at t={time}: stuck frontier {frontier:?}")]
    Deadlock { time: f64, frontier: Vec<String> },
    #[error("gamma must be finite and non-negative, got {0}")]
    BadGamma(f64),
}

/// Umbrella error used by the command-line front end and the C ABI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("{0}")]
    Other(String),
}

/// Parses JSON and reports failures with the element path where they happened.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(
    text: &str,
) -> Result<T, (String, String)> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        (
            if path.is_empty() { ".".into() } else { path },
            inner.to_string(),
        )
    })
}
