//! Cluster description and the physical link hierarchy.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{parse_json, ClusterError};
use crate::strategy::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    Pcie,
    Nvlink,
}

/// Hierarchy levels, ordered bottom-up so `max` picks the highest level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkLevel {
    DevicePort,
    IntraNode,
    InterSocket,
    Nic,
}

impl LinkLevel {
    pub const ALL: [LinkLevel; 4] = [
        LinkLevel::DevicePort,
        LinkLevel::IntraNode,
        LinkLevel::InterSocket,
        LinkLevel::Nic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinkLevel::DevicePort => "device_port",
            LinkLevel::IntraNode => "intra_node",
            LinkLevel::InterSocket => "inter_socket",
            LinkLevel::Nic => "nic",
        }
    }
}

/// One physical link (or bundle of parallel links) of the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Link {
    Port(DeviceId),
    Fabric { node: usize, socket: usize },
    InterSocket { node: usize },
    Nic { node: usize },
}

impl Link {
    pub fn level(self) -> LinkLevel {
        match self {
            Link::Port(_) => LinkLevel::DevicePort,
            Link::Fabric { .. } => LinkLevel::IntraNode,
            Link::InterSocket { .. } => LinkLevel::InterSocket,
            Link::Nic { .. } => LinkLevel::Nic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntraLink {
    pub class: LinkClass,
    pub bandwidth: f64,
    #[serde(default = "default_intra_alpha")]
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub bandwidth: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinksPerLevel {
    #[serde(default = "one")]
    pub intra_node: u32,
    #[serde(default = "one")]
    pub inter_socket: u32,
    #[serde(default = "one")]
    pub nic: u32,
}

impl Default for LinksPerLevel {
    fn default() -> Self {
        LinksPerLevel {
            intra_node: 1,
            inter_socket: 1,
            nic: 1,
        }
    }
}

fn one() -> u32 {
    1
}

pub const DEFAULT_INTRA_ALPHA: f64 = 1e-6;
pub const DEFAULT_SOCKET_ALPHA: f64 = 1e-6;
pub const DEFAULT_NIC_ALPHA: f64 = 5e-6;

fn default_intra_alpha() -> f64 {
    DEFAULT_INTRA_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub n_nodes: usize,
    pub devices_per_node: usize,
    pub device_type: String,
    pub device_memory: u64,
    pub intra_node_link: IntraLink,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_socket_link: Option<LinkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nic: Option<LinkSpec>,
    #[serde(default = "one_usize")]
    pub sockets_per_node: usize,
    /// Socket of each device within a node; contiguous blocks when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub socket_assignment: Option<Vec<usize>>,
    #[serde(default)]
    pub links_per_level: LinksPerLevel,
    /// Per-device injection bandwidth; defaults to the intra-node link bandwidth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_port_bandwidth: Option<f64>,
}

fn one_usize() -> usize {
    1
}

/// The channels a group communicates over.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSet {
    pub channels: Vec<Channel>,
    pub aggregate: f64,
    pub bottleneck: LinkLevel,
    /// Latency of the highest level crossed.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Channel {
    pub bottleneck: LinkLevel,
    pub bandwidth: f64,
}

pub fn load_cluster(path: impl AsRef<Path>) -> Result<ClusterSpec, ClusterError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ClusterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cluster(&text)
}

pub fn parse_cluster(text: &str) -> Result<ClusterSpec, ClusterError> {
    let c: ClusterSpec =
        parse_json(text).map_err(|(path, message)| ClusterError::Schema { path, message })?;
    c.validate()?;
    Ok(c)
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: String| Err(ClusterError::Invalid(m));
        if self.n_nodes == 0 || self.devices_per_node == 0 {
            return bad("n_nodes and devices_per_node must be at least 1".into());
        }
        if self.device_memory == 0 {
            return bad("device_memory must be positive".into());
        }
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !pos(self.intra_node_link.bandwidth) || !nonneg(self.intra_node_link.alpha) {
            return bad("intra_node_link needs bandwidth > 0 and alpha >= 0".into());
        }
        if let Some(s) = &self.inter_socket_link {
            if !pos(s.bandwidth) || !s.alpha.is_none_or(nonneg) {
                return bad("inter_socket_link needs bandwidth > 0 and alpha >= 0".into());
            }
        }
        match &self.nic {
            Some(n) if !pos(n.bandwidth) || !n.alpha.is_none_or(nonneg) => {
                return bad("nic needs bandwidth > 0 and alpha >= 0".into())
            }
            None if self.n_nodes > 1 => return bad("a nic is required when n_nodes > 1".into()),
            _ => {}
        }
        if let Some(p) = self.device_port_bandwidth {
            if !pos(p) {
                return bad("device_port_bandwidth must be > 0".into());
            }
        }
        if self.sockets_per_node == 0 || self.sockets_per_node > self.devices_per_node {
            return bad("sockets_per_node must lie in [1, devices_per_node]".into());
        }
        if let Some(a) = &self.socket_assignment {
            if a.len() != self.devices_per_node || a.iter().any(|&s| s >= self.sockets_per_node) {
                return bad(format!(
                    "socket_assignment must list {} sockets below {}",
                    self.devices_per_node, self.sockets_per_node
                ));
            }
        }
        let l = &self.links_per_level;
        if l.intra_node == 0 || l.inter_socket == 0 || l.nic == 0 {
            return bad("links_per_level entries must be at least 1".into());
        }
        Ok(())
    }

    pub fn n_devices(&self) -> usize {
        self.n_nodes * self.devices_per_node
    }

    pub fn node_of(&self, d: DeviceId) -> usize {
        d / self.devices_per_node
    }

    pub fn socket_of(&self, d: DeviceId) -> usize {
        let local = d % self.devices_per_node;
        match &self.socket_assignment {
            Some(a) => a[local],
            None => local * self.sockets_per_node / self.devices_per_node,
        }
    }

    /// The highest level traffic between two devices must cross.
    pub fn lowest_common_level(&self, a: DeviceId, b: DeviceId) -> LinkLevel {
        if a == b {
            LinkLevel::DevicePort
        } else if self.node_of(a) != self.node_of(b) {
            LinkLevel::Nic
        } else if self.socket_of(a) != self.socket_of(b) {
            LinkLevel::InterSocket
        } else {
            LinkLevel::IntraNode
        }
    }

    pub fn port_bandwidth(&self) -> f64 {
        self.device_port_bandwidth
            .unwrap_or(self.intra_node_link.bandwidth)
    }

    pub fn level_alpha(&self, level: LinkLevel) -> f64 {
        match level {
            LinkLevel::DevicePort | LinkLevel::IntraNode => self.intra_node_link.alpha,
            LinkLevel::InterSocket => self
                .inter_socket_link
                .as_ref()
                .and_then(|l| l.alpha)
                .unwrap_or(DEFAULT_SOCKET_ALPHA),
            LinkLevel::Nic => self
                .nic
                .as_ref()
                .and_then(|l| l.alpha)
                .unwrap_or(DEFAULT_NIC_ALPHA),
        }
    }

    /// Bandwidth of one link bundle at `level`.
    pub fn link_capacity(&self, link: Link) -> f64 {
        let l = &self.links_per_level;
        match link {
            Link::Port(_) => self.port_bandwidth(),
            Link::Fabric { .. } => self.intra_node_link.bandwidth * l.intra_node as f64,
            Link::InterSocket { .. } => {
                self.inter_socket_link
                    .as_ref()
                    .map_or(self.intra_node_link.bandwidth, |s| s.bandwidth)
                    * l.inter_socket as f64
            }
            Link::Nic { .. } => {
                self.nic.as_ref().map_or(f64::INFINITY, |n| n.bandwidth) * l.nic as f64
            }
        }
    }

    /// Every link a collective over `group` puts traffic on.
    pub fn group_links(&self, group: &[DeviceId]) -> Vec<Link> {
        let mut links = BTreeSet::new();
        if group.len() < 2 {
            return Vec::new();
        }
        let mut per_node: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for &d in group {
            links.insert(Link::Port(d));
            let (n, s) = (self.node_of(d), self.socket_of(d));
            per_node.entry(n).or_default().insert(s);
            links.insert(Link::Fabric { node: n, socket: s });
        }
        let multi_node = per_node.len() > 1;
        for (&n, sockets) in &per_node {
            if sockets.len() > 1 {
                links.insert(Link::InterSocket { node: n });
            }
            if multi_node {
                links.insert(Link::Nic { node: n });
            }
        }
        links.into_iter().collect()
    }

    pub fn levels_crossed(&self, group: &[DeviceId]) -> BTreeSet<LinkLevel> {
        self.group_links(group)
            .into_iter()
            .map(|l| l.level())
            .filter(|&l| l != LinkLevel::DevicePort)
            .collect()
    }

    /// Hierarchy-bottleneck channel estimate for a communication group.
    pub fn channels(&self, group: &[DeviceId]) -> Result<ChannelSet, ClusterError> {
        let distinct: BTreeSet<DeviceId> = group.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(ClusterError::SingletonGroup(group.to_vec()));
        }
        if let Some(&d) = distinct.iter().find(|&&d| d >= self.n_devices()) {
            return Err(ClusterError::NoDevice(d));
        }
        let group: Vec<DeviceId> = distinct.into_iter().collect();
        let mut best: Option<(f64, Link)> = None;
        for link in self.group_links(&group) {
            let cap = self.link_capacity(link);
            // ties go to the higher level
            let better = match best {
                None => true,
                Some((b, l)) => cap < b || (cap == b && link.level() > l.level()),
            };
            if better {
                best = Some((cap, link));
            }
        }
        let (aggregate, link) = best.expect("group of two crosses a link");
        let bottleneck = link.level();
        let n_ch = match bottleneck {
            LinkLevel::DevicePort => 1,
            LinkLevel::IntraNode => self.links_per_level.intra_node,
            LinkLevel::InterSocket => self.links_per_level.inter_socket,
            LinkLevel::Nic => self.links_per_level.nic,
        };
        let top = self
            .levels_crossed(&group)
            .into_iter()
            .max()
            .unwrap_or(LinkLevel::IntraNode);
        Ok(ChannelSet {
            channels: (0..n_ch)
                .map(|_| Channel {
                    bottleneck,
                    bandwidth: aggregate / n_ch as f64,
                })
                .collect(),
            aggregate,
            bottleneck,
            alpha: self.level_alpha(top),
        })
    }

    /// For each group, the number of groups sharing its busiest link per level.
    pub fn shared_links(&self, groups: &[Vec<DeviceId>]) -> Vec<BTreeMap<LinkLevel, u32>> {
        let links: Vec<Vec<Link>> = groups.iter().map(|g| self.group_links(g)).collect();
        let mut count: BTreeMap<Link, u32> = BTreeMap::new();
        for ls in &links {
            for &l in ls {
                *count.entry(l).or_default() += 1;
            }
        }
        links
            .iter()
            .map(|ls| {
                let mut m: BTreeMap<LinkLevel, u32> =
                    LinkLevel::ALL.iter().map(|&l| (l, 1)).collect();
                for &l in ls {
                    let e = m.get_mut(&l.level()).unwrap();
                    *e = (*e).max(count[&l]);
                }
                m
            })
            .collect()
    }
}
