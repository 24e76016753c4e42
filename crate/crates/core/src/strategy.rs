//! Hierarchical strategy tree: per-object partition/map configs at the leaves,
//! schedule configs at interior nodes, plus loading, propagation and dumping.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSpec;
use crate::error::{parse_json, StrategyError};
use crate::model::{DimName, LayerId, ModelGraph, OpId, Phase, TensorId};

pub type NodeId = usize;
pub type DeviceId = usize;

/// Dim label to parallel degree. Degree-1 entries are dropped on construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionSpec(pub BTreeMap<String, u32>);

impl PartitionSpec {
    pub fn new<'a>(entries: impl IntoIterator<Item = (&'a str, u32)>) -> Self {
        PartitionSpec(
            entries
                .into_iter()
                .filter(|(_, d)| *d != 1)
                .map(|(l, d)| (l.to_string(), d))
                .collect(),
        )
    }

    pub fn parts(&self) -> usize {
        self.0.values().map(|&d| d as usize).product()
    }

    pub fn degree(&self, label: &str) -> u32 {
        self.0.get(label).copied().unwrap_or(1)
    }
}

/// Device set per part: a singleton shards, a group replicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MapSpec(pub Vec<Vec<DeviceId>>);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardingConfig {
    #[serde(default)]
    pub partition: PartitionSpec,
    pub map: MapSpec,
}

/// Partition and placement of an operator.
pub type ComputationConfig = ShardingConfig;
/// Partition and placement of a stored tensor.
pub type MemoryConfig = ShardingConfig;

impl ShardingConfig {
    pub fn new(partition: PartitionSpec, map: Vec<Vec<DeviceId>>) -> Self {
        ShardingConfig {
            partition,
            map: MapSpec(map),
        }
    }

    /// Fully replicated over `devices`.
    pub fn replicated(devices: impl IntoIterator<Item = DeviceId>) -> Self {
        ShardingConfig::new(
            PartitionSpec::default(),
            vec![devices.into_iter().collect()],
        )
    }

    pub fn devices(&self) -> BTreeSet<DeviceId> {
        self.map.0.iter().flatten().copied().collect()
    }
}

/// Row-major enumeration of the parts of a partitioned object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartGrid {
    pub dims: Vec<(String, u32)>,
}

impl PartGrid {
    /// Partitioned labels taken in the object's canonical dim order.
    pub fn new<'a>(order: impl IntoIterator<Item = &'a str>, p: &PartitionSpec) -> Self {
        PartGrid {
            dims: order
                .into_iter()
                .filter_map(|l| {
                    let d = p.degree(l);
                    (d > 1).then(|| (l.to_string(), d))
                })
                .collect(),
        }
    }

    pub fn parts(&self) -> usize {
        self.dims.iter().map(|(_, d)| *d as usize).product()
    }

    pub fn coords(&self, mut p: usize) -> Vec<u32> {
        let mut c = vec![0; self.dims.len()];
        for i in (0..self.dims.len()).rev() {
            let d = self.dims[i].1 as usize;
            c[i] = (p % d) as u32;
            p /= d;
        }
        c
    }

    pub fn index(&self, coords: &[u32]) -> usize {
        let mut p = 0;
        for (i, &(_, d)) in self.dims.iter().enumerate() {
            p = p * d as usize + coords[i] as usize;
        }
        p
    }

    pub fn coord_of(&self, label: &str, coords: &[u32]) -> Option<u32> {
        self.dims
            .iter()
            .position(|(l, _)| l == label)
            .map(|i| coords[i])
    }
}

/// Re-expresses `cfg` (over an object with dim order `src`) on an object with
/// dim order `dst`: partitions on labels `dst` lacks collapse, and the parts
/// that collapse together merge their device sets.
pub fn project(cfg: &ShardingConfig, src: &[&str], dst: &[&str]) -> ShardingConfig {
    let sg = PartGrid::new(src.iter().copied(), &cfg.partition);
    let kept = PartitionSpec(
        cfg.partition
            .0
            .iter()
            .filter(|(l, _)| dst.contains(&l.as_str()) && src.contains(&l.as_str()))
            .map(|(l, d)| (l.clone(), *d))
            .collect(),
    );
    let dg = PartGrid::new(dst.iter().copied(), &kept);
    let mut entries = vec![BTreeSet::new(); dg.parts()];
    for p in 0..sg.parts() {
        let c = sg.coords(p);
        let dc: Vec<u32> = dg
            .dims
            .iter()
            .map(|(l, _)| sg.coord_of(l, &c).unwrap_or(0))
            .collect();
        if let Some(devs) = cfg.map.0.get(p) {
            entries[dg.index(&dc)].extend(devs.iter().copied());
        }
    }
    ShardingConfig::new(
        kept,
        entries
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n_micro_batch: u32,
    #[serde(alias = "max_ongoing", default)]
    pub max_ongoing_micro_batch: u32,
    #[serde(alias = "recompute", default)]
    pub recomputation: bool,
}

impl ScheduleConfig {
    pub const SERIAL: ScheduleConfig = ScheduleConfig {
        n_micro_batch: 1,
        max_ongoing_micro_batch: 1,
        recomputation: false,
    };

    fn normalized(mut self) -> Self {
        if self.max_ongoing_micro_batch == 0 {
            self.max_ongoing_micro_batch = self.n_micro_batch;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigSlot {
    pub config: ShardingConfig,
    pub explicit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub name: String,
    pub path: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub layer: Option<LayerId>,
    pub schedule: Option<ScheduleConfig>,
    pub schedule_explicit: bool,
    /// Computation config applied to unconfigured operators in this subtree.
    pub default_config: Option<ShardingConfig>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.layer.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyTree {
    pub label: Option<String>,
    pub nodes: Vec<TreeNode>,
    pub layer_leaf: Vec<NodeId>,
    pub op_cfg: Vec<Option<ConfigSlot>>,
    pub tensor_cfg: Vec<Option<ConfigSlot>>,
    /// Layout mismatches propagation left for the compiler to transform.
    pub notes: Vec<String>,
}

pub const ROOT: NodeId = 0;

/// Builds the tree from module paths, depth first in layer order.
pub fn construct_tree(g: &ModelGraph) -> Result<StrategyTree, StrategyError> {
    let mut t = StrategyTree {
        label: None,
        nodes: vec![TreeNode {
            id: ROOT,
            name: String::new(),
            path: String::new(),
            parent: None,
            children: Vec::new(),
            layer: None,
            schedule: None,
            schedule_explicit: false,
            default_config: None,
        }],
        layer_leaf: Vec::with_capacity(g.layers.len()),
        op_cfg: vec![None; g.ops.len()],
        tensor_cfg: vec![None; g.tensors.len()],
        notes: Vec::new(),
    };
    let mut by_path: HashMap<String, NodeId> = HashMap::from([(String::new(), ROOT)]);
    for layer in &g.layers {
        let mut cur = ROOT;
        let mut path = String::new();
        for seg in &layer.module_path {
            if !path.is_empty() {
                path.push('/');
            }
            path.push_str(seg);
            cur = match by_path.get(&path) {
                Some(&n) if t.nodes[n].is_leaf() => {
                    return Err(StrategyError::InconsistentPath(path))
                }
                Some(&n) => n,
                None => {
                    let n = t.add_node(seg, &path, cur, None);
                    by_path.insert(path.clone(), n);
                    n
                }
            };
        }
        let lp = layer.path();
        match by_path.get(&lp) {
            Some(&n) if t.nodes[n].is_leaf() => return Err(StrategyError::DuplicateLayer(lp)),
            Some(_) => return Err(StrategyError::InconsistentPath(lp)),
            None => {
                let n = t.add_node(&layer.name, &lp, cur, Some(layer.id));
                by_path.insert(lp, n);
                t.layer_leaf.push(n);
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct StrategyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    nodes: Vec<NodeEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default: Option<ShardingConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    ops: BTreeMap<String, ShardingConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: BTreeMap<String, ShardingConfig>,
}

/// Reads a strategy file and attaches its configs to `tree`.
pub fn load_strategy(
    tree: &StrategyTree,
    model: &ModelGraph,
    path: impl AsRef<Path>,
) -> Result<StrategyTree, StrategyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| StrategyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_strategy(tree, model, &text)
}

pub fn parse_strategy(
    tree: &StrategyTree,
    model: &ModelGraph,
    text: &str,
) -> Result<StrategyTree, StrategyError> {
    let file: StrategyFile =
        parse_json(text).map_err(|(path, message)| StrategyError::Schema { path, message })?;
    let mut t = tree.clone();
    if file.label.is_some() {
        t.label = file.label;
    }
    for entry in file.nodes {
        let n = t
            .find(&entry.path)
            .ok_or_else(|| StrategyError::UnknownNode(entry.path.clone()))?;
        if let Some(s) = entry.schedule {
            let s = s.normalized();
            check_schedule(&s).map_err(|message| StrategyError::BadConfig {
                object: format!("schedule of '{}'", entry.path),
                message,
            })?;
            t.nodes[n].schedule = Some(s);
            t.nodes[n].schedule_explicit = true;
        }
        if let Some(d) = entry.default {
            let cfg = canonical(d);
            let labels: Vec<&str> = cfg.partition.0.keys().map(|s| s.as_str()).collect();
            check_map(&format!("default of '{}'", entry.path), &labels, &cfg)?;
            t.nodes[n].default_config = Some(cfg);
        }
        if entry.ops.is_empty() && entry.tensors.is_empty() {
            continue;
        }
        let layer = t.nodes[n]
            .layer
            .ok_or_else(|| StrategyError::NotLeaf(entry.path.clone()))?;
        for (name, cfg) in entry.ops {
            let op =
                model
                    .op_in_layer(layer, &name)
                    .ok_or_else(|| StrategyError::UnknownObject {
                        node: entry.path.clone(),
                        name: name.clone(),
                    })?;
            let cfg = canonical(cfg);
            check_op_config(model, op, &cfg)?;
            t.op_cfg[op] = Some(ConfigSlot {
                config: cfg,
                explicit: true,
            });
        }
        for (name, cfg) in entry.tensors {
            let ten = model
                .tensor_by_name(&name)
                .filter(|&x| model.tensors[x].layer == layer)
                .ok_or_else(|| StrategyError::UnknownObject {
                    node: entry.path.clone(),
                    name: name.clone(),
                })?;
            let cfg = canonical(cfg);
            check_tensor_config(model, ten, &cfg)?;
            t.tensor_cfg[ten] = Some(ConfigSlot {
                config: cfg,
                explicit: true,
            });
        }
    }
    Ok(t)
}

fn canonical(mut cfg: ShardingConfig) -> ShardingConfig {
    cfg.partition.0.retain(|_, d| *d != 1);
    cfg
}

fn check_schedule(s: &ScheduleConfig) -> Result<(), String> {
    if s.n_micro_batch == 0 {
        return Err("n_micro_batch must be at least 1".into());
    }
    if s.max_ongoing_micro_batch == 0 || s.max_ongoing_micro_batch > s.n_micro_batch {
        return Err(format!(
            "max_ongoing_micro_batch must lie in [1, {}], got {}",
            s.n_micro_batch, s.max_ongoing_micro_batch
        ));
    }
    Ok(())
}

fn check_op_config(
    model: &ModelGraph,
    op: OpId,
    cfg: &ShardingConfig,
) -> Result<(), StrategyError> {
    let o = &model.ops[op];
    let object = format!("operator '{}'", o.name);
    for l in cfg.partition.0.keys() {
        if !o.parallel_dims.contains(l) {
            return Err(StrategyError::BadDim {
                dim: l.clone(),
                object,
            });
        }
    }
    check_extents(&object, &o.dims, cfg)?;
    let order: Vec<&str> = o.dims.iter().map(|d| d.label.as_str()).collect();
    check_map(&object, &order, cfg)
}

fn check_tensor_config(
    model: &ModelGraph,
    t: TensorId,
    cfg: &ShardingConfig,
) -> Result<(), StrategyError> {
    let ten = &model.tensors[t];
    let object = format!("tensor '{}'", ten.name);
    for l in cfg.partition.0.keys() {
        if !ten.has_dim(l) {
            return Err(StrategyError::BadDim {
                dim: l.clone(),
                object,
            });
        }
    }
    check_extents(&object, &ten.shape, cfg)?;
    let order: Vec<&str> = ten.labels().collect();
    check_map(&object, &order, cfg)
}

fn check_extents(
    object: &str,
    dims: &[DimName],
    cfg: &ShardingConfig,
) -> Result<(), StrategyError> {
    for (l, &deg) in &cfg.partition.0 {
        if deg == 0 {
            return Err(StrategyError::BadConfig {
                object: object.into(),
                message: format!("degree of '{l}' must be at least 1"),
            });
        }
        if let Some(d) = dims.iter().find(|d| &d.label == l) {
            if d.extent % deg as u64 != 0 {
                return Err(StrategyError::BadConfig {
                    object: object.into(),
                    message: format!(
                        "degree {deg} does not divide extent {} of dim '{l}'",
                        d.extent
                    ),
                });
            }
        }
    }
    Ok(())
}

fn check_map(object: &str, order: &[&str], cfg: &ShardingConfig) -> Result<(), StrategyError> {
    for l in cfg.partition.0.keys() {
        if !order.contains(&l.as_str()) {
            return Err(StrategyError::BadDim {
                dim: l.clone(),
                object: object.into(),
            });
        }
    }
    let parts = cfg.partition.parts();
    if cfg.map.0.len() != parts {
        return Err(StrategyError::MapSize {
            object: object.into(),
            map: cfg.map.0.len(),
            parts,
        });
    }
    let bad = |message: String| StrategyError::BadConfig {
        object: object.into(),
        message,
    };
    let mut seen = BTreeSet::new();
    let size = cfg.map.0.first().map(|e| e.len()).unwrap_or(0);
    for (i, e) in cfg.map.0.iter().enumerate() {
        if e.is_empty() {
            return Err(bad(format!("map entry {i} is empty")));
        }
        if e.len() != size {
            return Err(bad("replica groups have unequal sizes".into()));
        }
        for &d in e {
            if !seen.insert(d) {
                return Err(bad(format!("device {d} appears in more than one map slot")));
            }
        }
    }
    Ok(())
}

impl StrategyTree {
    fn add_node(
        &mut self,
        name: &str,
        path: &str,
        parent: NodeId,
        layer: Option<LayerId>,
    ) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            name: name.to_string(),
            path: path.to_string(),
            parent: Some(parent),
            children: Vec::new(),
            layer,
            schedule: None,
            schedule_explicit: false,
            default_config: None,
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Looks a node up by its slash-joined module path; "" and "/" name the root.
    pub fn find(&self, path: &str) -> Option<NodeId> {
        let p = path.trim_matches('/');
        self.nodes.iter().position(|n| n.path == p)
    }

    pub fn is_descendant(&self, node: NodeId, ancestor: NodeId) -> bool {
        let mut cur = Some(node);
        while let Some(n) = cur {
            if n == ancestor {
                return true;
            }
            cur = self.nodes[n].parent;
        }
        false
    }

    /// Descendant leaves of `node` in layer order.
    pub fn leaves_under(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if self.nodes[n].is_leaf() {
                out.push(n);
            }
            stack.extend(self.nodes[n].children.iter().rev());
        }
        out.sort_by_key(|&n| self.nodes[n].layer);
        out
    }

    pub fn schedule(&self, node: NodeId) -> ScheduleConfig {
        self.nodes[node].schedule.unwrap_or(ScheduleConfig::SERIAL)
    }

    pub fn op_config(&self, op: OpId) -> Option<&ShardingConfig> {
        self.op_cfg[op].as_ref().map(|s| &s.config)
    }

    pub fn tensor_config(&self, t: TensorId) -> Option<&ShardingConfig> {
        self.tensor_cfg[t].as_ref().map(|s| &s.config)
    }

    /// Completes schedules top-down, then tensor and operator configs in a
    /// forward pass, a backward pass and an optimizer pass.
    pub fn propagate(&mut self, model: &ModelGraph) -> Result<(), StrategyError> {
        let mut queue = VecDeque::from([ROOT]);
        while let Some(n) = queue.pop_front() {
            if self.nodes[n].schedule.is_none() {
                let s = match self.nodes[n].parent {
                    Some(p) => self.nodes[p].schedule,
                    None => Some(ScheduleConfig::SERIAL),
                };
                self.nodes[n].schedule = s;
            }
            queue.extend(self.nodes[n].children.iter().copied());
        }
        self.notes.clear();
        for op in model.forward_topo() {
            self.infer_op(model, op);
        }
        for t in &model.tensors {
            if self.tensor_cfg[t.id].is_some() {
                continue;
            }
            let owner = if model.is_param_grad(t.id) {
                t.grad_of
            } else {
                t.state_of
            };
            if let Some(w) = owner {
                if let Some(slot) = &self.tensor_cfg[w] {
                    self.tensor_cfg[t.id] = Some(ConfigSlot {
                        config: slot.config.clone(),
                        explicit: false,
                    });
                }
            }
        }
        for op in model.backward_topo() {
            self.infer_op(model, op);
        }
        for op in model.ops_in_phase(Phase::Optimizer) {
            self.infer_op(model, op);
        }
        let mut missing = Vec::new();
        for o in &model.ops {
            if self.op_cfg[o.id].is_none() {
                missing.push(format!("operator '{}'", o.name));
            }
        }
        for t in &model.tensors {
            if self.tensor_cfg[t.id].is_none() {
                missing.push(format!("tensor '{}'", t.name));
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(StrategyError::Underdetermined(missing))
        }
    }

    fn scope_of(&self, layer: LayerId) -> Option<NodeId> {
        let mut cur = Some(self.layer_leaf[layer]);
        while let Some(n) = cur {
            if self.nodes[n].default_config.is_some() {
                return Some(n);
            }
            cur = self.nodes[n].parent;
        }
        None
    }

    fn infer_op(&mut self, model: &ModelGraph, op: OpId) {
        let o = &model.ops[op];
        let op_dims: Vec<&str> = o.dims.iter().map(|d| d.label.as_str()).collect();
        if self.op_cfg[op].is_none() {
            let scope = self.scope_of(o.layer);
            let mut found = None;
            // a backward op runs where its forward op ran
            if let Some(f) = o.forward_of {
                if let Some(slot) = &self.op_cfg[f] {
                    let fo = &model.ops[f];
                    let src: Vec<&str> = fo.dims.iter().map(|d| d.label.as_str()).collect();
                    let dst: Vec<&str> = op_dims
                        .iter()
                        .copied()
                        .filter(|l| o.parallel_dims.contains(*l))
                        .collect();
                    found = Some(project(&slot.config, &src, &dst));
                }
            }
            for &t in o.inputs.iter().filter(|_| found.is_none()) {
                let Some(slot) = &self.tensor_cfg[t] else {
                    continue;
                };
                // inside a default scope a parameter's layout is storage only (ZeRO)
                let stored_only = scope.is_some() && model.tensors[t].kind.is_persistent();
                let usable = !stored_only
                    && (slot.explicit
                        || match scope {
                            None => true,
                            Some(s) => model.tensors[t].producers.iter().all(|&p| {
                                self.is_descendant(self.layer_leaf[model.ops[p].layer], s)
                            }),
                        });
                let fits = slot
                    .config
                    .partition
                    .0
                    .keys()
                    .all(|l| o.parallel_dims.contains(l));
                if usable && fits {
                    let td: Vec<&str> = model.tensors[t].labels().collect();
                    found = Some(project(&slot.config, &td, &op_dims));
                    break;
                }
            }
            if found.is_none() {
                if let Some(s) = scope {
                    let d = self.nodes[s].default_config.as_ref().unwrap();
                    let order: Vec<&str> = d.partition.0.keys().map(|s| s.as_str()).collect();
                    let allowed: Vec<&str> = op_dims
                        .iter()
                        .copied()
                        .filter(|l| o.parallel_dims.contains(*l))
                        .collect();
                    found = Some(project(d, &order, &allowed));
                }
            }
            match found {
                Some(c) => {
                    self.op_cfg[op] = Some(ConfigSlot {
                        config: c,
                        explicit: false,
                    })
                }
                None => return,
            }
        }
        let cfg = self.op_cfg[op].as_ref().unwrap().config.clone();
        for &t in &o.inputs {
            let td: Vec<&str> = model.tensors[t].labels().collect();
            let req = project(&cfg, &op_dims, &td);
            match &self.tensor_cfg[t] {
                None if model.tensors[t].producers.is_empty() => {
                    self.tensor_cfg[t] = Some(ConfigSlot {
                        config: req,
                        explicit: false,
                    })
                }
                Some(slot) if slot.config != req => self.notes.push(format!(
                    "operator '{}' reads tensor '{}' in a different layout; a transformation is inserted",
                    o.name, model.tensors[t].name
                )),
                _ => {}
            }
        }
        for &t in o.outputs.iter().chain(&o.updates) {
            if self.tensor_cfg[t].is_none() {
                let td: Vec<&str> = model.tensors[t].labels().collect();
                self.tensor_cfg[t] = Some(ConfigSlot {
                    config: project(&cfg, &op_dims, &td),
                    explicit: false,
                });
            }
        }
    }

    /// Devices named by the operator configs in the subtree of `node`, plus
    /// those holding its parameters, optimizer states and parameter gradients.
    pub fn dev_group(
        &self,
        model: &ModelGraph,
        node: NodeId,
    ) -> Result<BTreeSet<DeviceId>, StrategyError> {
        let mut out = BTreeSet::new();
        for leaf in self.leaves_under(node) {
            let layer = &model.layers[self.nodes[leaf].layer.unwrap()];
            let ops = layer
                .forward_ops
                .iter()
                .chain(&layer.backward_ops)
                .chain(&layer.optimizer_ops);
            for &o in ops {
                let c = self
                    .op_config(o)
                    .ok_or_else(|| StrategyError::Unconfigured(self.display_path(node)))?;
                out.extend(c.devices());
            }
            // activations crossing a stage boundary live on the neighbor and do not widen the group
            for &t in layer
                .tensors
                .iter()
                .filter(|&&t| model.tensors[t].kind.is_persistent() || model.is_param_grad(t))
            {
                let c = self
                    .tensor_config(t)
                    .ok_or_else(|| StrategyError::Unconfigured(self.display_path(node)))?;
                out.extend(c.devices());
            }
        }
        if out.is_empty() {
            return Err(StrategyError::Unconfigured(self.display_path(node)));
        }
        Ok(out)
    }

    pub fn display_path(&self, node: NodeId) -> String {
        if node == ROOT {
            "/".into()
        } else {
            self.nodes[node].path.clone()
        }
    }

    /// Serializes schedules and all leaf configs in the strategy-file schema.
    pub fn dump(&self, model: &ModelGraph) -> String {
        let mut nodes = Vec::new();
        for (id, n) in self.nodes.iter().enumerate() {
            let mut e = NodeEntry {
                path: self.display_path(id),
                schedule: if n.is_leaf() { None } else { n.schedule },
                default: if n.layer.is_none() && self.op_cfg.iter().any(|c| c.is_none()) {
                    n.default_config.clone()
                } else {
                    None
                },
                ops: BTreeMap::new(),
                tensors: BTreeMap::new(),
            };
            if let Some(l) = n.layer {
                let layer = &model.layers[l];
                let ops = layer
                    .forward_ops
                    .iter()
                    .chain(&layer.backward_ops)
                    .chain(&layer.optimizer_ops);
                for &o in ops {
                    if let Some(c) = self.op_config(o) {
                        e.ops.insert(model.ops[o].name.clone(), c.clone());
                    }
                }
                for &t in &layer.tensors {
                    if let Some(c) = self.tensor_config(t) {
                        e.tensors.insert(model.tensors[t].name.clone(), c.clone());
                    }
                }
            }
            if e.schedule.is_some()
                || e.default.is_some()
                || !e.ops.is_empty()
                || !e.tensors.is_empty()
            {
                nodes.push(e);
            }
        }
        let f = StrategyFile {
            label: self.label.clone(),
            nodes,
        };
        serde_json::to_string_pretty(&f).expect("strategy serializes")
    }
}

/// Checks every config against the type invariants and the cluster.
pub fn validate_strategy(
    tree: &StrategyTree,
    model: &ModelGraph,
    cluster: &ClusterSpec,
) -> Vec<String> {
    let mut diags = Vec::new();
    let n_dev = cluster.n_devices();
    let mut check = |object: String,
                     order: Vec<&str>,
                     dims: &[DimName],
                     allowed: &dyn Fn(&str) -> bool,
                     cfg: &ShardingConfig| {
        for l in cfg.partition.0.keys() {
            if !allowed(l) {
                diags.push(format!("{object}: dim '{l}' is not parallelizable"));
            }
        }
        if let Err(e) = check_extents(&object, dims, cfg) {
            diags.push(e.to_string());
        }
        if let Err(e) = check_map(&object, &order, cfg) {
            diags.push(e.to_string());
        }
        let missing: Vec<String> = cfg
            .devices()
            .into_iter()
            .filter(|&d| d >= n_dev)
            .map(|d| d.to_string())
            .collect();
        if !missing.is_empty() {
            diags.push(format!(
                "{object}: devices {} do not exist in a cluster of {n_dev}",
                missing.join(", ")
            ));
        }
    };
    for o in &model.ops {
        if let Some(c) = tree.op_config(o.id) {
            let order = o.dims.iter().map(|d| d.label.as_str()).collect();
            check(
                format!("operator '{}'", o.name),
                order,
                &o.dims,
                &|l| o.parallel_dims.contains(l),
                c,
            );
        }
    }
    for t in &model.tensors {
        if let Some(c) = tree.tensor_config(t.id) {
            let order = t.labels().collect();
            check(
                format!("tensor '{}'", t.name),
                order,
                &t.shape,
                &|l| t.has_dim(l),
                c,
            );
        }
    }
    for n in &tree.nodes {
        if let Some(s) = n.schedule {
            if let Err(m) = check_schedule(&s) {
                diags.push(format!("schedule of '{}': {m}", tree.display_path(n.id)));
            } else if !model.batch_size.is_multiple_of(s.n_micro_batch as u64) {
                diags.push(format!(
                    "schedule of '{}': n_micro_batch {} does not divide batch size {}",
                    tree.display_path(n.id),
                    s.n_micro_batch,
                    model.batch_size
                ));
            }
        }
    }
    diags
}
