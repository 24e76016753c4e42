//! Layer-level model IR: tensors over named dims, operators, and layers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{parse_json, ModelError};

pub type TensorId = usize;
pub type OpId = usize;
pub type LayerId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimName {
    pub label: String,
    pub extent: u64,
}

impl DimName {
    pub fn new(label: &str, extent: u64) -> Self {
        DimName {
            label: label.to_string(),
            extent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Activation,
    Parameter,
    Gradient,
    OptimizerState,
}

impl TensorKind {
    /// Parameters and optimizer states survive across iterations.
    pub fn is_persistent(self) -> bool {
        matches!(self, TensorKind::Parameter | TensorKind::OptimizerState)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Matmul,
    Conv,
    Elementwise,
    Embedding,
    Norm,
    Pool,
    OptimizerStep,
}

impl OpType {
    pub fn parse(s: &str) -> Option<OpType> {
        Some(match s {
            "matmul" | "linear" => OpType::Matmul,
            "conv" => OpType::Conv,
            "elementwise" => OpType::Elementwise,
            "embedding" | "embedding_lookup" => OpType::Embedding,
            "norm" => OpType::Norm,
            "pool" => OpType::Pool,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpType::Matmul => "matmul",
            OpType::Conv => "conv",
            OpType::Elementwise => "elementwise",
            OpType::Embedding => "embedding",
            OpType::Norm => "norm",
            OpType::Pool => "pool",
            OpType::OptimizerStep => "optimizer_step",
        }
    }

    /// Input positions that never receive a gradient.
    fn non_differentiable(self, idx: usize) -> bool {
        matches!(self, OpType::Embedding) && idx == 0
    }

    /// Whether the grad op for input `i` reads input `i` itself.
    fn grad_reads_self(self) -> bool {
        matches!(self, OpType::Elementwise | OpType::Norm | OpType::Pool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    Optimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSpec {
    pub id: TensorId,
    pub name: String,
    pub layer: LayerId,
    pub shape: Vec<DimName>,
    pub elem_bytes: u64,
    pub kind: TensorKind,
    pub requires_grad: bool,
    /// For gradients: the tensor being differentiated.
    pub grad_of: Option<TensorId>,
    /// For optimizer states: the parameter they belong to.
    pub state_of: Option<TensorId>,
    pub producers: Vec<OpId>,
    pub consumers: Vec<OpId>,
    /// Ops that update this tensor in place (optimizer steps).
    pub updated_by: Vec<OpId>,
}

impl TensorSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|d| d.extent).product()
    }

    pub fn bytes(&self) -> u64 {
        self.numel() * self.elem_bytes
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.shape.iter().map(|d| d.label.as_str())
    }

    pub fn has_dim(&self, label: &str) -> bool {
        self.shape.iter().any(|d| d.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorSpec {
    pub id: OpId,
    pub name: String,
    pub layer: LayerId,
    pub op_type: OpType,
    pub phase: Phase,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub updates: Vec<TensorId>,
    pub cost_key: String,
    /// Unique dims in first-appearance order over inputs, outputs, updates.
    pub dims: Vec<DimName>,
    pub excluded_dims: BTreeSet<String>,
    pub new_dims: BTreeSet<String>,
    pub parallel_dims: BTreeSet<String>,
    pub reduction_dims: BTreeSet<String>,
    pub forward_of: Option<OpId>,
}

impl OperatorSpec {
    pub fn extent(&self, label: &str) -> Option<u64> {
        self.dims
            .iter()
            .find(|d| d.label == label)
            .map(|d| d.extent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerNode {
    pub id: LayerId,
    pub name: String,
    pub module_path: Vec<String>,
    pub forward_ops: Vec<OpId>,
    pub backward_ops: Vec<OpId>,
    pub optimizer_ops: Vec<OpId>,
    pub tensors: Vec<TensorId>,
}

impl LayerNode {
    /// Slash-joined module path plus the layer name.
    pub fn path(&self) -> String {
        let mut p = self.module_path.join("/");
        if !p.is_empty() {
            p.push('/');
        }
        p.push_str(&self.name);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGraph {
    pub name: String,
    pub batch_size: u64,
    pub batch_dim: String,
    pub optimizer_state_multiplier: f64,
    pub optimizer_cost_key: String,
    pub layers: Vec<LayerNode>,
    pub tensors: Vec<TensorSpec>,
    pub ops: Vec<OperatorSpec>,
    pub backward_derived: bool,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(default)]
    name: Option<String>,
    batch_size: u64,
    #[serde(default)]
    batch_dim: Option<String>,
    #[serde(default)]
    optimizer_state_multiplier: Option<f64>,
    #[serde(default)]
    optimizer_cost_key: Option<String>,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    name: String,
    #[serde(default)]
    module_path: Vec<String>,
    #[serde(default)]
    tensors: Vec<TensorFile>,
    #[serde(default)]
    ops: Vec<OpFile>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    name: String,
    dims: Vec<DimName>,
    dtype_bytes: u64,
    kind: String,
    #[serde(default = "yes")]
    requires_grad: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct OpFile {
    #[serde(default)]
    name: Option<String>,
    #[serde(rename = "type")]
    ty: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    cost_key: String,
    #[serde(default)]
    exclude_dims: Vec<String>,
    #[serde(default)]
    new_dims: Vec<String>,
}

/// Loads and validates a model description file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<ModelGraph, ModelError> {
    let file: ModelFile =
        parse_json(text).map_err(|(path, message)| ModelError::Schema { path, message })?;
    build_model(file)
}

fn build_model(file: ModelFile) -> Result<ModelGraph, ModelError> {
    if file.layers.is_empty() {
        return Err(ModelError::Empty);
    }
    let mut g = ModelGraph {
        name: file.name.unwrap_or_else(|| "model".into()),
        batch_size: file.batch_size,
        batch_dim: file.batch_dim.unwrap_or_else(|| "b".into()),
        optimizer_state_multiplier: file.optimizer_state_multiplier.unwrap_or(2.0),
        optimizer_cost_key: file
            .optimizer_cost_key
            .unwrap_or_else(|| "optimizer_step".into()),
        layers: Vec::new(),
        tensors: Vec::new(),
        ops: Vec::new(),
        backward_derived: false,
    };
    if !(g.optimizer_state_multiplier >= 0.0 && g.optimizer_state_multiplier.is_finite()) {
        return Err(ModelError::Schema {
            path: "optimizer_state_multiplier".into(),
            message: "must be a finite non-negative number".into(),
        });
    }
    let mut by_name: HashMap<String, TensorId> = HashMap::new();
    for (li, lf) in file.layers.iter().enumerate() {
        g.layers.push(LayerNode {
            id: li,
            name: lf.name.clone(),
            module_path: lf.module_path.clone(),
            forward_ops: Vec::new(),
            backward_ops: Vec::new(),
            optimizer_ops: Vec::new(),
            tensors: Vec::new(),
        });
        for (ti, tf) in lf.tensors.iter().enumerate() {
            let at = format!("layers[{li}].tensors[{ti}]");
            if by_name.contains_key(&tf.name) {
                return Err(ModelError::Duplicate {
                    path: at,
                    name: tf.name.clone(),
                });
            }
            let kind = match tf.kind.as_str() {
                "activation" => TensorKind::Activation,
                "parameter" => TensorKind::Parameter,
                other => {
                    return Err(ModelError::Schema {
                        path: format!("{at}.kind"),
                        message: format!(
                            "'{other}' is not a declarable kind (activation or parameter)"
                        ),
                    })
                }
            };
            let id = g.tensors.len();
            by_name.insert(tf.name.clone(), id);
            g.tensors.push(TensorSpec {
                id,
                name: tf.name.clone(),
                layer: li,
                shape: tf.dims.clone(),
                elem_bytes: tf.dtype_bytes,
                kind,
                requires_grad: tf.requires_grad,
                grad_of: None,
                state_of: None,
                producers: Vec::new(),
                consumers: Vec::new(),
                updated_by: Vec::new(),
            });
            g.layers[li].tensors.push(id);
        }
    }
    for (li, lf) in file.layers.iter().enumerate() {
        let mut names = BTreeSet::new();
        for (oi, of) in lf.ops.iter().enumerate() {
            let at = format!("layers[{li}].ops[{oi}]");
            let ty = OpType::parse(&of.ty).ok_or_else(|| ModelError::UnknownOpType {
                path: format!("{at}.type"),
                ty: of.ty.clone(),
            })?;
            let name = of.name.clone().unwrap_or_else(|| format!("{}_{oi}", of.ty));
            if !names.insert(name.clone()) {
                return Err(ModelError::Duplicate { path: at, name });
            }
            let resolve = |list: &[String], field: &str| -> Result<Vec<TensorId>, ModelError> {
                list.iter()
                    .enumerate()
                    .map(|(k, n)| {
                        by_name
                            .get(n)
                            .copied()
                            .ok_or_else(|| ModelError::DanglingTensor {
                                path: format!("{at}.{field}[{k}]"),
                                name: n.clone(),
                            })
                    })
                    .collect()
            };
            let inputs = resolve(&of.inputs, "inputs")?;
            let outputs = resolve(&of.outputs, "outputs")?;
            let id = g.add_op(
                name,
                li,
                ty,
                Phase::Forward,
                inputs,
                outputs,
                Vec::new(),
                of.cost_key.clone(),
                of.exclude_dims.iter().cloned().collect(),
                of.new_dims.iter().cloned().collect(),
                None,
            );
            g.layers[li].forward_ops.push(id);
        }
    }
    let diags = validate_graph(&g);
    if !diags.is_empty() {
        return Err(ModelError::Invalid(diags));
    }
    Ok(g)
}

impl ModelGraph {
    #[allow(clippy::too_many_arguments)]
    fn add_op(
        &mut self,
        name: String,
        layer: LayerId,
        op_type: OpType,
        phase: Phase,
        inputs: Vec<TensorId>,
        outputs: Vec<TensorId>,
        updates: Vec<TensorId>,
        cost_key: String,
        excluded_dims: BTreeSet<String>,
        new_dims: BTreeSet<String>,
        forward_of: Option<OpId>,
    ) -> OpId {
        let id = self.ops.len();
        let mut op = OperatorSpec {
            id,
            name,
            layer,
            op_type,
            phase,
            inputs,
            outputs,
            updates,
            cost_key,
            dims: Vec::new(),
            excluded_dims,
            new_dims,
            parallel_dims: BTreeSet::new(),
            reduction_dims: BTreeSet::new(),
            forward_of,
        };
        self.fill_dims(&mut op);
        for &t in &op.inputs {
            self.tensors[t].consumers.push(id);
        }
        for &t in &op.outputs {
            self.tensors[t].producers.push(id);
        }
        for &t in &op.updates {
            self.tensors[t].updated_by.push(id);
        }
        self.ops.push(op);
        id
    }

    fn fill_dims(&self, op: &mut OperatorSpec) {
        let mut dims: Vec<DimName> = Vec::new();
        for &t in op.inputs.iter().chain(&op.outputs).chain(&op.updates) {
            for d in &self.tensors[t].shape {
                if !dims.iter().any(|x| x.label == d.label) {
                    dims.push(d.clone());
                }
            }
        }
        let in_labels: BTreeSet<&str> = op
            .inputs
            .iter()
            .flat_map(|&t| self.tensors[t].labels())
            .collect();
        let out_labels: BTreeSet<&str> = op
            .outputs
            .iter()
            .chain(&op.updates)
            .flat_map(|&t| self.tensors[t].labels())
            .collect();
        op.parallel_dims = dims
            .iter()
            .filter(|d| !op.excluded_dims.contains(&d.label))
            .map(|d| d.label.clone())
            .collect();
        op.reduction_dims = in_labels
            .difference(&out_labels)
            .filter(|l| op.parallel_dims.contains(**l))
            .map(|l| l.to_string())
            .collect();
        op.dims = dims;
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn op_in_layer(&self, layer: LayerId, name: &str) -> Option<OpId> {
        self.ops
            .iter()
            .find(|o| o.layer == layer && o.name == name)
            .map(|o| o.id)
    }

    /// Sum of every tensor's byte size.
    pub fn total_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.bytes()).sum()
    }

    /// The single forward or backward producer of `t`, if any.
    pub fn producer(&self, t: TensorId) -> Option<OpId> {
        self.tensors[t].producers.first().copied()
    }

    pub fn ops_in_phase(&self, phase: Phase) -> Vec<OpId> {
        self.ops
            .iter()
            .filter(|o| o.phase == phase)
            .map(|o| o.id)
            .collect()
    }

    /// Forward ops in a deterministic topological order (Kahn, lowest id first).
    pub fn forward_topo(&self) -> Vec<OpId> {
        self.topo(Phase::Forward).unwrap_or_default()
    }

    /// Backward ops in a topological order of the backward graph.
    pub fn backward_topo(&self) -> Vec<OpId> {
        self.topo(Phase::Backward).unwrap_or_default()
    }

    fn topo(&self, phase: Phase) -> Option<Vec<OpId>> {
        let ops = self.ops_in_phase(phase);
        let member: BTreeSet<OpId> = ops.iter().copied().collect();
        let mut indeg: BTreeMap<OpId, usize> = ops.iter().map(|&o| (o, 0)).collect();
        let mut succ: BTreeMap<OpId, Vec<OpId>> = BTreeMap::new();
        for &o in &ops {
            let mut preds = BTreeSet::new();
            for &t in &self.ops[o].inputs {
                for &p in &self.tensors[t].producers {
                    if member.contains(&p) && p != o {
                        preds.insert(p);
                    }
                }
            }
            for p in preds {
                *indeg.get_mut(&o).unwrap() += 1;
                succ.entry(p).or_default().push(o);
            }
        }
        let mut ready: BTreeSet<OpId> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&o, _)| o)
            .collect();
        let mut out = Vec::with_capacity(ops.len());
        while let Some(o) = ready.pop_first() {
            out.push(o);
            for &s in succ.get(&o).map(|v| v.as_slice()).unwrap_or(&[]) {
                let d = indeg.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(s);
                }
            }
        }
        (out.len() == ops.len()).then_some(out)
    }

    /// Inter-layer data edges of one phase as (tensor, producing layer, consuming layer).
    pub fn layer_edges(&self, phase: Phase) -> Vec<(TensorId, LayerId, LayerId)> {
        let mut edges = BTreeSet::new();
        for t in &self.tensors {
            for &p in &t.producers {
                if self.ops[p].phase != phase {
                    continue;
                }
                for &c in &t.consumers {
                    let (a, b) = (self.ops[p].layer, self.ops[c].layer);
                    if self.ops[c].phase == phase && a != b {
                        edges.insert((t.id, a, b));
                    }
                }
            }
        }
        edges.into_iter().collect()
    }

    /// Extent of `label` after micro-batching; only the batch dim shrinks.
    pub fn micro_extent(&self, d: &DimName, n_micro_batch: u64) -> u64 {
        if d.label == self.batch_dim {
            d.extent / n_micro_batch.max(1)
        } else {
            d.extent
        }
    }
}

/// Checks every structural invariant and returns one message per violation.
pub fn validate_graph(g: &ModelGraph) -> Vec<String> {
    let mut diags = Vec::new();
    if g.layers.is_empty() {
        diags.push("empty model".to_string());
    }
    if g.batch_size == 0 {
        diags.push("batch_size must be at least 1".into());
    }
    for t in &g.tensors {
        let mut seen = BTreeSet::new();
        for d in &t.shape {
            if !seen.insert(d.label.as_str()) {
                diags.push(format!("tensor '{}': dim '{}' repeated", t.name, d.label));
            }
            if d.extent == 0 {
                diags.push(format!(
                    "tensor '{}': dim '{}' has extent 0",
                    t.name, d.label
                ));
            }
            if d.label == g.batch_dim && d.extent != g.batch_size {
                diags.push(format!(
                    "tensor '{}': batch dim '{}' has extent {} but batch_size is {}",
                    t.name, d.label, d.extent, g.batch_size
                ));
            }
        }
        if t.elem_bytes == 0 {
            diags.push(format!(
                "tensor '{}': dtype_bytes must be at least 1",
                t.name
            ));
        }
        if t.layer >= g.layers.len() {
            diags.push(format!(
                "tensor '{}': owning layer {} is not in the graph",
                t.name, t.layer
            ));
        }
        for &c in &t.consumers {
            if c >= g.ops.len() || !g.ops[c].inputs.contains(&t.id) {
                diags.push(format!(
                    "dangling consumer: tensor '{}' lists op {} which does not read it",
                    t.name, c
                ));
            } else if g.ops[c].layer >= g.layers.len() {
                diags.push(format!(
                    "dangling consumer: tensor '{}' is consumed by layer {} which is not in the graph",
                    t.name, g.ops[c].layer
                ));
            }
        }
        for &p in &t.producers {
            if p >= g.ops.len() || !g.ops[p].outputs.contains(&t.id) {
                diags.push(format!(
                    "dangling producer: tensor '{}' lists op {} which does not write it",
                    t.name, p
                ));
            }
        }
        let fwd_producers = t
            .producers
            .iter()
            .filter(|&&p| p < g.ops.len() && g.ops[p].phase == Phase::Forward)
            .count();
        if fwd_producers > 1 {
            diags.push(format!(
                "tensor '{}' has {} forward producers",
                t.name, fwd_producers
            ));
        }
    }
    for op in &g.ops {
        let who = format!("op '{}'", op.name);
        if op.layer >= g.layers.len() {
            diags.push(format!("{who}: layer {} is not in the graph", op.layer));
        }
        let ids: Vec<TensorId> = op
            .inputs
            .iter()
            .chain(&op.outputs)
            .chain(&op.updates)
            .copied()
            .collect();
        if let Some(bad) = ids.iter().find(|&&t| t >= g.tensors.len()) {
            diags.push(format!("{who}: tensor {bad} is not in the graph"));
            continue;
        }
        let mut extents: BTreeMap<&str, u64> = BTreeMap::new();
        for &t in &ids {
            for d in &g.tensors[t].shape {
                if let Some(&e) = extents.get(d.label.as_str()) {
                    if e != d.extent {
                        diags.push(format!(
                            "{who}: dim '{}' has inconsistent extents {} and {}",
                            d.label, e, d.extent
                        ));
                    }
                } else {
                    extents.insert(&d.label, d.extent);
                }
            }
        }
        let in_labels: BTreeSet<&str> = op
            .inputs
            .iter()
            .flat_map(|&t| g.tensors[t].labels())
            .collect();
        for &t in &op.outputs {
            for l in g.tensors[t].labels() {
                if !in_labels.contains(l) && !op.new_dims.contains(l) {
                    diags.push(format!(
                        "{who}: output dim '{l}' is not in any input and not declared"
                    ));
                }
            }
        }
        let unique: BTreeSet<String> = extents.keys().map(|s| s.to_string()).collect();
        let expected: BTreeSet<String> = unique.difference(&op.excluded_dims).cloned().collect();
        if expected != op.parallel_dims {
            diags.push(format!(
                "{who}: parallelizable dims {:?} differ from the unique input/output dims {:?}",
                op.parallel_dims, expected
            ));
        }
        for d in &op.excluded_dims {
            if !unique.contains(d) {
                diags.push(format!("{who}: excluded dim '{d}' does not occur"));
            }
        }
        let out_labels: BTreeSet<&str> = op
            .outputs
            .iter()
            .chain(&op.updates)
            .flat_map(|&t| g.tensors[t].labels())
            .collect();
        for r in &op.reduction_dims {
            if !in_labels.contains(r.as_str()) || out_labels.contains(r.as_str()) {
                diags.push(format!("{who}: reduction dim '{r}' must be input-only"));
            }
        }
    }
    if g.topo(Phase::Forward).is_none() {
        diags.push("forward graph has a cycle".into());
    }
    if g.backward_derived {
        for op in g.ops.iter().filter(|o| o.phase == Phase::Forward) {
            for &t in &op.inputs {
                let ten = &g.tensors[t];
                if ten.kind == TensorKind::Parameter && ten.requires_grad {
                    let has = g.ops.iter().any(|b| {
                        b.forward_of == Some(op.id)
                            && b.outputs.iter().any(|&o| g.tensors[o].grad_of == Some(t))
                    });
                    if !has {
                        diags.push(format!(
                            "op '{}': no backward op produces the gradient of '{}'",
                            op.name, ten.name
                        ));
                    }
                }
            }
        }
    }
    diags
}

/// Adds backward ops, gradient tensors, optimizer states and optimizer steps.
///
/// Uses a fixed per-type rule: one grad op per differentiable input, reading
/// the output gradients plus the forward inputs the rule needs. Parameter
/// gradients of several micro-batches accumulate into one tensor.
pub fn derive_backward(g: &ModelGraph) -> ModelGraph {
    if g.backward_derived {
        return g.clone();
    }
    let mut out = g.clone();
    out.backward_derived = true;
    let fwd = g.forward_topo();
    let mut grad: BTreeMap<TensorId, TensorId> = BTreeMap::new();

    // Inputs whose gradient someone needs: parameters, gradient-requiring
    // graph inputs, and activations computed from either.
    let mut depends: BTreeSet<TensorId> = BTreeSet::new();
    let wants = |depends: &BTreeSet<TensorId>, op: &OperatorSpec, i: usize, x: TensorId| {
        let xt = &g.tensors[x];
        xt.requires_grad
            && matches!(xt.kind, TensorKind::Activation | TensorKind::Parameter)
            && !op.op_type.non_differentiable(i)
            && (xt.kind == TensorKind::Parameter || xt.producers.is_empty() || depends.contains(&x))
    };
    for &o in &fwd {
        let op = &g.ops[o];
        if op.inputs.iter().enumerate().any(|(i, &x)| wants(&depends, op, i, x)) {
            depends.extend(op.outputs.iter().copied());
        }
    }

    // Terminal outputs get a seed gradient with no producer.
    for &o in &fwd {
        for &t in g.ops[o].outputs.iter().filter(|t| depends.contains(t)) {
            let consumed = g.tensors[t]
                .consumers
                .iter()
                .any(|&c| g.ops[c].phase == Phase::Forward);
            if !consumed && !grad.contains_key(&t) {
                let id = add_grad_tensor(&mut out, t);
                grad.insert(t, id);
            }
        }
    }
    for &o in fwd.iter().rev() {
        let op = g.ops[o].clone();
        let out_grads: Vec<TensorId> = op
            .outputs
            .iter()
            .filter_map(|t| grad.get(t).copied())
            .collect();
        if out_grads.is_empty() {
            continue;
        }
        for (i, &x) in op.inputs.iter().enumerate() {
            if !wants(&depends, &op, i, x) {
                continue;
            }
            let dx = match grad.get(&x) {
                Some(&d) => d,
                None => {
                    let d = add_grad_tensor(&mut out, x);
                    grad.insert(x, d);
                    d
                }
            };
            let mut inputs = out_grads.clone();
            for (j, &other) in op.inputs.iter().enumerate() {
                if j != i || op.op_type.grad_reads_self() {
                    inputs.push(other);
                }
            }
            // dims the gradient is scattered over (an embedding table's rows)
            let seen: BTreeSet<&str> = inputs.iter().flat_map(|&t| out.tensors[t].labels()).collect();
            let scattered: BTreeSet<String> = out.tensors[dx]
                .labels()
                .filter(|l| !seen.contains(l))
                .map(str::to_string)
                .collect();
            let id = out.add_op(
                format!("{}.grad{}", op.name, i),
                op.layer,
                op.op_type,
                Phase::Backward,
                inputs,
                vec![dx],
                Vec::new(),
                format!("{}.grad_in{}", op.cost_key, i),
                op.excluded_dims.clone(),
                scattered,
                Some(op.id),
            );
            out.layers[op.layer].backward_ops.push(id);
        }
    }
    let params: Vec<TensorId> = g
        .tensors
        .iter()
        .filter(|t| t.kind == TensorKind::Parameter && grad.contains_key(&t.id))
        .map(|t| t.id)
        .collect();
    for w in params {
        let dw = grad[&w];
        let mut inputs = vec![w, dw];
        let mut updates = vec![w];
        let bytes = (g.tensors[w].elem_bytes as f64 * g.optimizer_state_multiplier).round() as u64;
        if bytes > 0 {
            let wt = &g.tensors[w];
            let sid = out.tensors.len();
            out.tensors.push(TensorSpec {
                id: sid,
                name: format!("{}.opt_state", wt.name),
                layer: wt.layer,
                shape: wt.shape.clone(),
                elem_bytes: bytes,
                kind: TensorKind::OptimizerState,
                requires_grad: false,
                grad_of: None,
                state_of: Some(w),
                producers: Vec::new(),
                consumers: Vec::new(),
                updated_by: Vec::new(),
            });
            out.layers[wt.layer].tensors.push(sid);
            inputs.push(sid);
            updates.push(sid);
        }
        let layer = g.tensors[w].layer;
        let id = out.add_op(
            format!("{}.step", g.tensors[w].name),
            layer,
            OpType::OptimizerStep,
            Phase::Optimizer,
            inputs,
            Vec::new(),
            updates,
            g.optimizer_cost_key.clone(),
            BTreeSet::new(),
            BTreeSet::new(),
            None,
        );
        out.layers[layer].optimizer_ops.push(id);
    }
    out
}

fn add_grad_tensor(g: &mut ModelGraph, of: TensorId) -> TensorId {
    let src = g.tensors[of].clone();
    let id = g.tensors.len();
    g.tensors.push(TensorSpec {
        id,
        name: format!("{}.grad", src.name),
        layer: src.layer,
        shape: src.shape.clone(),
        elem_bytes: src.elem_bytes,
        kind: TensorKind::Gradient,
        requires_grad: false,
        grad_of: Some(of),
        state_of: None,
        producers: Vec::new(),
        consumers: Vec::new(),
        updated_by: Vec::new(),
    });
    g.layers[src.layer].tensors.push(id);
    id
}

impl ModelGraph {
    /// True for gradients of parameters (they are synchronized, not streamed).
    pub fn is_param_grad(&self, t: TensorId) -> bool {
        self.tensors[t]
            .grad_of
            .is_some_and(|w| self.tensors[w].kind == TensorKind::Parameter)
    }

    /// True when the tensor's content depends on the micro-batch.
    pub fn is_per_micro_batch(&self, t: TensorId) -> bool {
        let ten = &self.tensors[t];
        !(ten.kind.is_persistent() || self.is_param_grad(t))
    }
}
