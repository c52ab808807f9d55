//! Three-tier node graph: central cloud, edge modules and IoT gateways,
//! joined by symmetric links with latency and bandwidth, plus per-node
//! resource accounting.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{LinkId, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("node `{0}` already exists")]
    DuplicateNodeId(NodeId),
    #[error("link `{0}` already exists")]
    DuplicateLinkId(LinkId),
    #[error("node `{0}` has a non-positive capacity")]
    InvalidCapacity(NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
    #[error("link endpoints must differ (got `{0}` twice)")]
    SelfLoop(NodeId),
    #[error("link bandwidth must be positive")]
    NonPositiveBandwidth,
    #[error("no up path between `{0}` and `{1}`")]
    Unreachable(NodeId, NodeId),
    #[error("node `{node}` cannot fit {demand} (free {free})")]
    InsufficientCapacity {
        node: NodeId,
        demand: ResourceVector,
        free: ResourceVector,
    },
    #[error("release of {demand} on `{node}` exceeds allocation {alloc}")]
    ReleaseUnderflow {
        node: NodeId,
        demand: ResourceVector,
        alloc: ResourceVector,
    },
}

pub type Result<T> = std::result::Result<T, TopologyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    CentralCloud,
    EdgeModule,
    Gateway,
}

impl Tier {
    /// Default hardware of each tier, in (millicores, MB, MB).
    ///
    /// Gateways are Raspberry Pi 3 class (quad core, 1 GB RAM, 16 GB SD),
    /// edge modules are mini-ITX boxes with 16 GB RAM and a 480 GB SSD, and
    /// the cloud is two compute servers of 2x8 cores / 96 GB each with 11 TB
    /// of block storage. CPU in millicores is our own convention.
    pub fn default_capacity(self) -> ResourceVector {
        match self {
            Tier::Gateway => ResourceVector::new(4_000, 1_024, 16 * 1_024),
            Tier::EdgeModule => ResourceVector::new(8_000, 16 * 1_024, 480 * 1_024),
            Tier::CentralCloud => ResourceVector::new(64_000, 2 * 96 * 1_024, 11 * 1_024 * 1_024),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::CentralCloud => "central_cloud",
            Tier::EdgeModule => "edge_module",
            Tier::Gateway => "gateway",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// CPU in millicores, memory and storage in MB.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceVector {
    pub cpu: u64,
    pub mem: u64,
    pub storage: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector { cpu: 0, mem: 0, storage: 0 };

    pub const fn new(cpu: u64, mem: u64, storage: u64) -> Self {
        Self { cpu, mem, storage }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    /// Component-wise `self <= other`.
    pub fn fits_within(&self, other: &ResourceVector) -> bool {
        self.cpu <= other.cpu && self.mem <= other.mem && self.storage <= other.storage
    }

    pub fn checked_add(&self, other: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector {
            cpu: self.cpu.checked_add(other.cpu)?,
            mem: self.mem.checked_add(other.mem)?,
            storage: self.storage.checked_add(other.storage)?,
        })
    }

    pub fn checked_sub(&self, other: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector {
            cpu: self.cpu.checked_sub(other.cpu)?,
            mem: self.mem.checked_sub(other.mem)?,
            storage: self.storage.checked_sub(other.storage)?,
        })
    }

    pub fn checked_mul(&self, n: u64) -> Option<ResourceVector> {
        Some(ResourceVector {
            cpu: self.cpu.checked_mul(n)?,
            mem: self.mem.checked_mul(n)?,
            storage: self.storage.checked_mul(n)?,
        })
    }

    /// Largest component-wise fraction `self / capacity`.
    pub fn bottleneck_share(&self, capacity: &ResourceVector) -> Share {
        [
            Share::new(self.cpu, capacity.cpu),
            Share::new(self.mem, capacity.mem),
            Share::new(self.storage, capacity.storage),
        ]
        .into_iter()
        .max()
        .unwrap_or(Share::ZERO)
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    fn add(self, rhs: Self) -> Self {
        self.checked_add(&rhs).expect("resource vector overflow")
    }
}

impl Sub for ResourceVector {
    type Output = ResourceVector;

    fn sub(self, rhs: Self) -> Self {
        self.checked_sub(&rhs).expect("resource vector underflow")
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[cpu={}m mem={}MB storage={}MB]", self.cpu, self.mem, self.storage)
    }
}

/// An exact non-negative fraction, ordered by value.
///
/// Placement tie-breaks compare free capacity fractions; comparing them as
/// rationals keeps the ordering independent of float rounding.
#[derive(Debug, Clone, Copy)]
pub struct Share {
    num: u64,
    den: u64,
}

impl Share {
    pub const ZERO: Share = Share { num: 0, den: 1 };

    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "share with zero denominator");
        Self { num, den }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// A fraction in [0, 1] rounded to millionths.
    pub fn from_f64(x: f64) -> Share {
        Share::new((x.clamp(0.0, 1.0) * 1_000_000.0).round() as u64, 1_000_000)
    }
}

impl PartialEq for Share {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Share {}

impl PartialOrd for Share {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Share {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub tier: Tier,
    pub capacity: ResourceVector,
    pub alloc: ResourceVector,
    /// Number of active faults holding this node down.
    pub down_faults: u32,
}

impl Node {
    pub fn new(id: impl Into<NodeId>, tier: Tier, capacity: ResourceVector) -> Self {
        Self {
            id: id.into(),
            tier,
            capacity,
            alloc: ResourceVector::ZERO,
            down_faults: 0,
        }
    }

    pub fn with_default_capacity(id: impl Into<NodeId>, tier: Tier) -> Self {
        Self::new(id, tier, tier.default_capacity())
    }

    pub fn is_up(&self) -> bool {
        self.down_faults == 0
    }

    pub fn free(&self) -> ResourceVector {
        self.capacity - self.alloc
    }

    /// Bottleneck utilization: the largest of the three allocation fractions.
    pub fn utilization(&self) -> f64 {
        self.utilization_share().as_f64()
    }

    pub fn utilization_share(&self) -> Share {
        self.alloc.bottleneck_share(&self.capacity)
    }

    /// Smallest free fraction across the three dimensions.
    pub fn free_share(&self) -> Share {
        let free = self.free();
        [
            Share::new(free.cpu, self.capacity.cpu),
            Share::new(free.mem, self.capacity.mem),
            Share::new(free.storage, self.capacity.storage),
        ]
        .into_iter()
        .min()
        .unwrap_or(Share::ZERO)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub latency_ms: u64,
    pub bandwidth_mbps: u64,
    /// Number of active faults holding this link down.
    pub down_faults: u32,
}

impl Link {
    pub fn is_up(&self) -> bool {
        self.down_faults == 0
    }

    pub fn touches(&self, node: &NodeId) -> bool {
        &self.a == node || &self.b == node
    }

    pub fn other_end(&self, node: &NodeId) -> Option<&NodeId> {
        if &self.a == node {
            Some(&self.b)
        } else if &self.b == node {
            Some(&self.a)
        } else {
            None
        }
    }
}

/// A shortest path: total latency and the links it traverses in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub latency_ms: u64,
    pub links: Vec<LinkId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<LinkId, Link>,
    /// Bumped on every up/down transition of a node or link.
    generation: u64,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: Node) -> Result<NodeId> {
        if self.nodes.contains_key(&node.id) {
            return Err(TopologyError::DuplicateNodeId(node.id));
        }
        let cap = node.capacity;
        if cap.cpu == 0 || cap.mem == 0 || cap.storage == 0 {
            return Err(TopologyError::InvalidCapacity(node.id));
        }
        let id = node.id.clone();
        self.nodes.insert(
            id.clone(),
            Node {
                alloc: ResourceVector::ZERO,
                down_faults: 0,
                ..node
            },
        );
        Ok(id)
    }

    /// Adds a link with a generated id (`a~b`, suffixed when parallel links exist).
    pub fn add_link(
        &mut self,
        a: &NodeId,
        b: &NodeId,
        latency_ms: u64,
        bandwidth_mbps: u64,
    ) -> Result<LinkId> {
        let base = format!("{a}~{b}");
        let mut id = LinkId::new(base.clone());
        let mut n = 1;
        while self.links.contains_key(&id) {
            n += 1;
            id = LinkId::new(format!("{base}#{n}"));
        }
        self.insert_link(id, a, b, latency_ms, bandwidth_mbps)
    }

    pub fn insert_link(
        &mut self,
        id: LinkId,
        a: &NodeId,
        b: &NodeId,
        latency_ms: u64,
        bandwidth_mbps: u64,
    ) -> Result<LinkId> {
        for n in [a, b] {
            if !self.nodes.contains_key(n) {
                return Err(TopologyError::UnknownNode(n.clone()));
            }
        }
        if a == b {
            return Err(TopologyError::SelfLoop(a.clone()));
        }
        if bandwidth_mbps == 0 {
            return Err(TopologyError::NonPositiveBandwidth);
        }
        if self.links.contains_key(&id) {
            return Err(TopologyError::DuplicateLinkId(id));
        }
        self.links.insert(
            id.clone(),
            Link {
                id: id.clone(),
                a: a.clone(),
                b: b.clone(),
                latency_ms,
                bandwidth_mbps,
                down_faults: 0,
            },
        );
        Ok(id)
    }

    pub fn node(&self, id: &NodeId) -> Result<&Node> {
        self.nodes.get(id).ok_or_else(|| TopologyError::UnknownNode(id.clone()))
    }

    pub fn link(&self, id: &LinkId) -> Result<&Link> {
        self.links.get(id).ok_or_else(|| TopologyError::UnknownLink(id.clone()))
    }

    pub fn contains_node(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn contains_link(&self, id: &LinkId) -> bool {
        self.links.contains_key(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn nodes_in_tier(&self, tier: Tier) -> impl Iterator<Item = &Node> {
        self.nodes.values().filter(move |n| n.tier == tier)
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Shortest up-path by latency. Ties go to the lexicographically smaller
    /// predecessor so that routes are reproducible.
    pub fn route(&self, from: &NodeId, to: &NodeId) -> Result<Route> {
        self.node(from)?;
        self.node(to)?;
        if from == to {
            return Ok(Route {
                latency_ms: 0,
                links: Vec::new(),
            });
        }

        let mut dist: BTreeMap<&NodeId, u64> = BTreeMap::new();
        let mut via: BTreeMap<&NodeId, &Link> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        dist.insert(from, 0);
        heap.push(Reverse((0u64, from)));

        while let Some(Reverse((d, node))) = heap.pop() {
            if dist.get(node).is_some_and(|best| d > *best) {
                continue;
            }
            if node == to {
                break;
            }
            for link in self.links.values().filter(|l| l.is_up()) {
                let Some(next) = link.other_end(node) else {
                    continue;
                };
                let nd = d + link.latency_ms;
                let better = match dist.get(next) {
                    None => true,
                    Some(&cur) => nd < cur,
                };
                if better {
                    dist.insert(next, nd);
                    via.insert(next, link);
                    heap.push(Reverse((nd, next)));
                }
            }
        }

        let Some(&latency_ms) = dist.get(to) else {
            return Err(TopologyError::Unreachable(from.clone(), to.clone()));
        };
        let mut links = Vec::new();
        let mut cur = to;
        while cur != from {
            let link = via[cur];
            links.push(link.id.clone());
            cur = link.other_end(cur).expect("route link touches node");
        }
        links.reverse();
        Ok(Route { latency_ms, links })
    }

    pub fn path_latency(&self, from: &NodeId, to: &NodeId) -> Result<u64> {
        self.route(from, to).map(|r| r.latency_ms)
    }

    /// All-or-nothing reservation.
    pub fn reserve(&mut self, id: &NodeId, demand: &ResourceVector) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TopologyError::UnknownNode(id.clone()))?;
        match node.alloc.checked_add(demand) {
            Some(next) if next.fits_within(&node.capacity) => {
                node.alloc = next;
                Ok(())
            }
            _ => Err(TopologyError::InsufficientCapacity {
                node: id.clone(),
                demand: *demand,
                free: node.free(),
            }),
        }
    }

    pub fn release(&mut self, id: &NodeId, demand: &ResourceVector) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TopologyError::UnknownNode(id.clone()))?;
        match node.alloc.checked_sub(demand) {
            Some(next) => {
                node.alloc = next;
                Ok(())
            }
            None => Err(TopologyError::ReleaseUnderflow {
                node: id.clone(),
                demand: *demand,
                alloc: node.alloc,
            }),
        }
    }

    pub fn can_fit(&self, id: &NodeId, demand: &ResourceVector) -> bool {
        self.nodes.get(id).is_some_and(|n| {
            n.alloc
                .checked_add(demand)
                .is_some_and(|next| next.fits_within(&n.capacity))
        })
    }

    pub fn utilization(&self, id: &NodeId) -> Result<f64> {
        self.node(id).map(Node::utilization)
    }

    /// Marks a link down. Faults stack: the link comes back only when every
    /// fault holding it has been lifted.
    pub fn link_down(&mut self, id: &LinkId) -> Result<()> {
        let link = self
            .links
            .get_mut(id)
            .ok_or_else(|| TopologyError::UnknownLink(id.clone()))?;
        link.down_faults += 1;
        self.generation += 1;
        Ok(())
    }

    pub fn link_up(&mut self, id: &LinkId) -> Result<()> {
        let link = self
            .links
            .get_mut(id)
            .ok_or_else(|| TopologyError::UnknownLink(id.clone()))?;
        link.down_faults = link.down_faults.saturating_sub(1);
        self.generation += 1;
        Ok(())
    }

    /// A down node is cut off: every incident link goes down with it and the
    /// node stops being a placement candidate.
    pub fn node_down(&mut self, id: &NodeId) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TopologyError::UnknownNode(id.clone()))?;
        node.down_faults += 1;
        for link in self.links.values_mut().filter(|l| l.touches(id)) {
            link.down_faults += 1;
        }
        self.generation += 1;
        Ok(())
    }

    pub fn node_up(&mut self, id: &NodeId) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TopologyError::UnknownNode(id.clone()))?;
        node.down_faults = node.down_faults.saturating_sub(1);
        for link in self.links.values_mut().filter(|l| l.touches(id)) {
            link.down_faults = link.down_faults.saturating_sub(1);
        }
        self.generation += 1;
        Ok(())
    }

    /// Links incident to `id`, in id order.
    pub fn incident_links(&self, id: &NodeId) -> Vec<LinkId> {
        self.links
            .values()
            .filter(|l| l.touches(id))
            .map(|l| l.id.clone())
            .collect()
    }
}
