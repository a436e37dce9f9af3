//! The structured ring overlay: identity, neighbor maintenance, harmonic
//! shortcuts, and greedy routing.
//!
//! All nodes live in one [`Overlay`] value that acts as the simulator's
//! single owner of node state. Protocol steps (join, stabilization, routing)
//! are methods that read only the state a node would learn by talking to
//! its connections.

pub mod id;
pub mod table;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use id::{new_node_id, ring_distance, select_shortcut_target, Direction, NodeId, RingAddress, U160};
pub use table::{ConnectionTable, Edge, EdgeKind, EdgeMeta};

use crate::relays::{self, RelayEdge, RelayPolicy};
use crate::time::SimTime;
use crate::transport::Transport;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OverlayError {
    #[error("no live bootstrap node is reachable")]
    AllBootstrapsUnreachable,
    #[error("node id {0:?} is already in use")]
    IdCollision(NodeId),
    #[error("unknown or departed node {0:?}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("hop budget exhausted after {0} hops")]
    TtlExceeded(usize),
    #[error("node {0:?} has no connections")]
    NoRoute(NodeId),
    #[error("unknown or departed node {0:?}")]
    UnknownNode(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Route,
    Dht,
    RelayControl,
    VpnData,
    RevocationBroadcast,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlayMessage {
    pub src: NodeId,
    pub dst: RingAddress,
    pub ttl_hops: u32,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

impl OverlayMessage {
    pub fn new(src: NodeId, dst: RingAddress, kind: MessageKind) -> Self {
        OverlayMessage { src, dst, ttl_hops: DEFAULT_TTL, kind, payload: Vec::new() }
    }
}

pub const DEFAULT_TTL: u32 = 128;

/// Result of greedy routing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteTrace {
    /// Overlay hops after the source; empty for local delivery.
    pub hops: Vec<NodeId>,
    /// Every transport endpoint in order, starting at the source. Relay
    /// hops contribute their intermediate node.
    pub path: Vec<NodeId>,
}

impl RouteTrace {
    pub fn delivered_at(&self) -> NodeId {
        *self.path.last().expect("path starts at the source")
    }

    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }
}

#[derive(Clone, Debug)]
pub struct OverlayConfig {
    /// Lower bound on near neighbors per side.
    pub min_near: usize,
    /// Fixed neighbors per side, bypassing the size estimate.
    pub near_override: Option<usize>,
    pub shortcuts: bool,
    /// Fixed shortcut count, bypassing `ceil(log2 N)`.
    pub shortcut_override: Option<usize>,
    pub shortcut_refresh_ticks: u64,
    /// Overlays at or below this size become a full mesh.
    pub mesh_threshold: usize,
    pub tick_interval: Duration,
    pub relay_policy: RelayPolicy,
    pub relay_active_k: usize,
    pub seed: u64,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            min_near: 2,
            near_override: None,
            shortcuts: true,
            shortcut_override: None,
            shortcut_refresh_ticks: 10,
            mesh_threshold: 20,
            tick_interval: Duration::from_secs(10),
            relay_policy: RelayPolicy::Latency,
            relay_active_k: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct ShortcutSlot {
    target: RingAddress,
    peer: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub table: ConnectionTable,
    slots: Vec<ShortcutSlot>,
    mesh: BTreeSet<NodeId>,
    /// Peers linked because application traffic asked for it.
    demand: BTreeSet<NodeId>,
    hints: BTreeSet<NodeId>,
    ticks: u64,
    near_k: usize,
    rng: ChaCha8Rng,
}

impl Node {
    fn new(id: NodeId, seed: u64) -> Self {
        let mixed = seed ^ u64::from_be_bytes(id.to_be_bytes()[..8].try_into().unwrap());
        Node {
            id,
            table: ConnectionTable::new(id),
            slots: Vec::new(),
            mesh: BTreeSet::new(),
            demand: BTreeSet::new(),
            hints: BTreeSet::new(),
            ticks: 0,
            near_k: 0,
            rng: ChaCha8Rng::seed_from_u64(mixed),
        }
    }

    pub fn shortcut_targets(&self) -> impl Iterator<Item = RingAddress> + '_ {
        self.slots.iter().map(|s| s.target)
    }
}

/// Total ordering used by greedy forwarding and ownership: smaller ring gap
/// first, then the candidate on the clockwise side of `dst`, then lower id.
pub fn closeness_key(candidate: NodeId, dst: RingAddress) -> (U160, bool, NodeId) {
    let right = ring_distance(dst, candidate, Direction::Right);
    let left = ring_distance(dst, candidate, Direction::Left);
    (right.min(left), right > left, candidate)
}

pub struct Overlay {
    nodes: BTreeMap<NodeId, Node>,
    pub transport: Transport,
    pub config: OverlayConfig,
    now: SimTime,
    ticks: u64,
    table_changes: u64,
    /// (refuser, refused): the refuser will not hold any link to the peer.
    refusals: BTreeSet<(NodeId, NodeId)>,
}

impl Overlay {
    pub fn new(config: OverlayConfig, transport: Transport) -> Self {
        Overlay { nodes: BTreeMap::new(), transport, config, now: SimTime::ZERO, ticks: 0, table_changes: 0, refusals: BTreeSet::new() }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn advance(&mut self, d: Duration) {
        self.now += d;
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Count of near-list and shortcut changes since creation.
    pub fn table_changes(&self) -> u64 {
        self.table_changes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn live_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(&id)
    }

    pub fn table(&self, id: NodeId) -> Option<&ConnectionTable> {
        self.nodes.get(&id).map(|n| &n.table)
    }

    pub fn table_mut(&mut self, id: NodeId) -> Option<&mut ConnectionTable> {
        self.nodes.get_mut(&id).map(|n| &mut n.table)
    }

    fn connectable(&self, a: NodeId, b: NodeId) -> bool {
        self.transport.can_connect(a, b) && !self.refused(a, b)
    }

    /// Either side refuses the other.
    pub fn refused(&self, a: NodeId, b: NodeId) -> bool {
        self.refusals.contains(&(a, b)) || self.refusals.contains(&(b, a))
    }

    /// `a` drops any link to `b` and will not accept one again, directly or
    /// relayed.
    pub fn refuse(&mut self, a: NodeId, b: NodeId) {
        self.refusals.insert((a, b));
        for (x, y) in [(a, b), (b, a)] {
            if let Some(n) = self.nodes.get_mut(&x) {
                if n.table.remove(y).is_some() {
                    self.table_changes += 1;
                }
                n.mesh.remove(&y);
                n.demand.remove(&y);
                n.hints.remove(&y);
                for s in n.slots.iter_mut() {
                    if s.peer == Some(y) {
                        s.peer = None;
                    }
                }
            }
        }
        // Relays through a refused link no longer work.
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            let node = self.nodes.get_mut(&id).unwrap();
            let peers: Vec<NodeId> = node.table.relay_edges().map(|(p, _)| p).collect();
            for p in peers {
                if let Some(e) = node.table.edge_mut(p) {
                    if let Some(r) = e.relay.as_mut() {
                        if (id == a || p == a) && r.overlap.contains(&b) || (id == b || p == b) && r.overlap.contains(&a) {
                            r.overlap.retain(|x| *x != a && *x != b);
                        }
                    }
                }
            }
        }
    }

    // ----- membership -----------------------------------------------------

    /// Join through the first live, directly reachable bootstrap node.
    pub fn join(&mut self, id: NodeId, bootstrap: &[NodeId]) -> Result<(), OverlayError> {
        if self.nodes.contains_key(&id) {
            return Err(OverlayError::IdCollision(id));
        }
        if self.nodes.is_empty() {
            self.nodes.insert(id, Node::new(id, self.config.seed));
            return Ok(());
        }
        let Some(boot) = bootstrap
            .iter()
            .copied()
            .find(|b| *b != id && self.is_live(*b) && self.connectable(id, *b))
        else {
            return Err(OverlayError::AllBootstrapsUnreachable);
        };
        self.nodes.insert(id, Node::new(id, self.config.seed));
        self.connect_direct(id, boot, EdgeKind::Leaf);

        // Route a join request to our own address, skipping ourselves, to
        // find the current owner of the position we are taking.
        let owner = self
            .route_from(boot, id, Some(id), DEFAULT_TTL)
            .map(|t| t.delivered_at())
            .unwrap_or(boot);
        let mut candidates: BTreeSet<NodeId> = BTreeSet::from([boot, owner]);
        if let Some(t) = self.table(owner) {
            candidates.extend(t.left_neighbors().iter().chain(t.right_neighbors()).copied());
        }
        candidates.remove(&id);
        self.refresh_near(id, candidates);

        // Chosen neighbors integrate the newcomer right away.
        let near: Vec<NodeId> = {
            let t = &self.nodes[&id].table;
            t.left_neighbors().iter().chain(t.right_neighbors()).copied().collect()
        };
        for p in near {
            if let Some(t) = self.table(p) {
                let mut c: BTreeSet<NodeId> =
                    t.left_neighbors().iter().chain(t.right_neighbors()).copied().collect();
                c.insert(id);
                self.refresh_near(p, c);
            }
        }
        Ok(())
    }

    /// Remove a node. A graceful leave hands each neighbor the departing
    /// node's opposite-side neighbors and closes connections immediately;
    /// a crash leaves peers to discover the loss on their next tick.
    pub fn leave(&mut self, id: NodeId, graceful: bool) -> Result<(), OverlayError> {
        let node = self.nodes.remove(&id).ok_or(OverlayError::UnknownNode(id))?;
        if graceful {
            let left = node.table.left_neighbors().to_vec();
            let right = node.table.right_neighbors().to_vec();
            for p in node.table.peers() {
                if let Some(n) = self.nodes.get_mut(&p) {
                    n.table.remove(id);
                    n.hints.extend(left.iter().chain(&right).copied().filter(|x| *x != p));
                    self.table_changes += 1;
                }
            }
        }
        Ok(())
    }

    pub fn kill(&mut self, id: NodeId) -> Result<(), OverlayError> {
        self.leave(id, false)
    }

    // ----- connections ----------------------------------------------------

    fn kind_rank(k: EdgeKind) -> u8 {
        match k {
            EdgeKind::Near => 0,
            EdgeKind::Shortcut => 1,
            EdgeKind::Relay => 2,
            EdgeKind::Overlap => 3,
            EdgeKind::Leaf => 4,
            EdgeKind::Inbound => 5,
        }
    }

    fn set_kind(&mut self, a: NodeId, b: NodeId, kind: EdgeKind) {
        if let Some(e) = self.nodes.get_mut(&a).and_then(|n| n.table.edge_mut(b)) {
            e.kind = kind;
        }
    }

    /// Open (or re-label) a direct connection from `a` to `b`.
    pub fn connect_direct(&mut self, a: NodeId, b: NodeId, kind: EdgeKind) -> bool {
        if a == b || !self.is_live(a) || !self.is_live(b) || !self.connectable(a, b) {
            return false;
        }
        if let Some(existing) = self.nodes[&a].table.edge(b) {
            if existing.is_direct() {
                self.set_kind(a, b, kind);
                return true;
            }
            // Upgrade a relayed peer to a direct link.
        }
        let latency_ms = self.transport.ping_ms(a, b);
        let meta = EdgeMeta { created_at: self.now, latency_ms };
        let keep_kind = |t: &ConnectionTable| t.kind(a);
        let far_kind = keep_kind(&self.nodes[&b].table).unwrap_or(EdgeKind::Inbound);
        self.nodes.get_mut(&a).unwrap().table.insert(b, Edge { kind, relay: None, meta });
        self.nodes.get_mut(&b).unwrap().table.insert(a, Edge { kind: far_kind, relay: None, meta });
        true
    }

    /// Install a relayed connection on both endpoints.
    pub(crate) fn install_relay(&mut self, a: NodeId, b: NodeId, edge: RelayEdge, kind: EdgeKind) {
        let latency_ms = self.relay_rtt(&edge);
        let meta = EdgeMeta { created_at: self.now, latency_ms };
        for (x, y, k) in [(a, b, Some(kind)), (b, a, None)] {
            let Some(node) = self.nodes.get_mut(&x) else { continue };
            match node.table.edge_mut(y) {
                Some(e) => {
                    if let Some(k) = k {
                        e.kind = k;
                    }
                    if !e.is_direct() || e.relay.is_none() {
                        e.relay = Some(edge.clone());
                    }
                }
                None => node.table.insert(
                    y,
                    Edge { kind: k.unwrap_or(EdgeKind::Inbound), relay: Some(edge.clone()), meta },
                ),
            }
        }
    }

    fn relay_rtt(&self, edge: &RelayEdge) -> f64 {
        let (a, b) = edge.endpoints;
        match edge.first_live(|p| self.is_live(p)) {
            Some(r) => {
                self.transport.latency.rtt_between(a, r) / 2.0
                    + self.transport.latency.rtt_between(r, b) / 2.0
                    + self.transport.latency.rtt_between(b, r) / 2.0
                    + self.transport.latency.rtt_between(r, a) / 2.0
            }
            None => 0.0,
        }
    }

    /// Connect directly when possible, otherwise through a two-hop relay.
    pub fn connect(&mut self, a: NodeId, b: NodeId, kind: EdgeKind) -> bool {
        if self.connect_direct(a, b, kind) {
            return true;
        }
        if !self.is_live(a) || !self.is_live(b) || self.refused(a, b) {
            return false;
        }
        if let Some(e) = self.nodes[&a].table.edge(b) {
            if e.relay.as_ref().is_some_and(|r| r.first_live(|p| self.is_live(p)).is_some()) {
                self.set_kind(a, b, kind);
                return true;
            }
        }
        match relays::establish(self, a, b) {
            Ok(edge) => {
                self.install_relay(a, b, edge, kind);
                true
            }
            Err(_) => false,
        }
    }

    /// Keep a link from `a` to `b` for application traffic: direct when
    /// reachable, otherwise relayed. Returns whether the link is direct, or
    /// `None` when neither works.
    pub fn demand_link(&mut self, a: NodeId, b: NodeId) -> Option<bool> {
        if self.connect_direct(a, b, EdgeKind::Shortcut) {
            let n = self.nodes.get_mut(&a).unwrap();
            n.demand.insert(b);
            if n.table.kind(b) != Some(EdgeKind::Near) {
                n.table.edge_mut(b).unwrap().kind = EdgeKind::Shortcut;
            }
            return Some(true);
        }
        match relays::request_relay(self, a, b) {
            Ok(_) => {
                let n = self.nodes.get_mut(&a).unwrap();
                n.demand.insert(b);
                Some(n.table.has_direct(b))
            }
            Err(_) => None,
        }
    }

    /// Drop `a`'s interest in `b`. The shared connection closes only when
    /// `b` has no interest of its own.
    fn release(&mut self, a: NodeId, b: NodeId) {
        let Some(node) = self.nodes.get(&a) else { return };
        if node.demand.contains(&b) {
            let direct = node.table.has_direct(b);
            self.set_kind(a, b, if direct { EdgeKind::Shortcut } else { EdgeKind::Relay });
            return;
        }
        if node.slots.iter().any(|s| s.peer == Some(b)) || node.mesh.contains(&b) {
            self.set_kind(a, b, EdgeKind::Shortcut);
            return;
        }
        let relays_use_b = node.table.relay_edges().any(|(_, r)| r.overlap.contains(&b));
        if relays_use_b {
            self.set_kind(a, b, EdgeKind::Overlap);
            return;
        }
        let b_wants = self
            .table(b)
            .and_then(|t| t.kind(a))
            .is_some_and(|k| k != EdgeKind::Inbound);
        if b_wants {
            self.set_kind(a, b, EdgeKind::Inbound);
        } else {
            if let Some(n) = self.nodes.get_mut(&a) {
                n.table.remove(b);
            }
            if let Some(n) = self.nodes.get_mut(&b) {
                n.table.remove(a);
            }
        }
    }

    // ----- neighbor maintenance -------------------------------------------

    /// Size estimate from local state: exact when the neighbor lists wrap
    /// around the ring, otherwise from neighbor density on both sides.
    pub fn estimate_size(&self, id: NodeId) -> u64 {
        let Some(node) = self.nodes.get(&id) else { return 1 };
        let t = &node.table;
        let left: BTreeSet<NodeId> = t.left_neighbors().iter().copied().collect();
        let right: BTreeSet<NodeId> = t.right_neighbors().iter().copied().collect();
        if left.intersection(&right).next().is_some() {
            return (left.union(&right).count() + 1) as u64;
        }
        let (l, r) = (t.left_neighbors(), t.right_neighbors());
        if l.is_empty() || r.is_empty() {
            return 1 + (l.len() + r.len()) as u64;
        }
        let span = ring_distance(id, r[r.len() - 1], Direction::Right).to_f64()
            + ring_distance(id, l[l.len() - 1], Direction::Left).to_f64();
        let est = ((l.len() + r.len()) as f64 / (span / 2f64.powi(160))).round() as u64;
        est.max((l.len() + r.len() + 1) as u64)
    }

    /// Size estimate for drawing shortcut distances: the ring size divided by
    /// the mean gap to the first four right neighbors.
    pub fn gap_estimate(&self, id: NodeId) -> u64 {
        let Some(node) = self.nodes.get(&id) else { return 1 };
        let r = node.table.right_neighbors();
        if r.is_empty() {
            return 1;
        }
        if r.contains(&id) || node.table.left_neighbors().iter().any(|p| r.contains(p)) {
            return self.estimate_size(id);
        }
        let m = r.len().min(4);
        let span = ring_distance(id, r[m - 1], Direction::Right).to_f64() / 2f64.powi(160);
        ((m as f64 / span).round() as u64).max(1)
    }

    pub fn near_per_side(&self, n_estimate: u64) -> usize {
        self.config.near_override.unwrap_or_else(|| {
            let log = (n_estimate.max(1) as f64).log2().ceil() as usize;
            log.max(self.config.min_near)
        })
    }

    /// Per-side neighbor count for `id`. The estimate depends on how many
    /// neighbors are held, so k grows only once the estimate clears its
    /// power-of-two band by 25%, one step at a time, and shrinks only once
    /// it halves; otherwise lists can flap.
    fn near_k_with_hysteresis(&mut self, id: NodeId) -> usize {
        if let Some(k) = self.config.near_override {
            return k;
        }
        let est = self.estimate_size(id) as f64;
        let desired = self.near_per_side(est as u64);
        let node = self.nodes.get_mut(&id).unwrap();
        let k = node.near_k;
        let lower = if k > 0 { 2f64.powi(k as i32 - 1) / 2.0 } else { f64::INFINITY };
        let grow = k == 0 || (desired > k && est > 1.25 * 2f64.powi(k as i32));
        let shrink = desired < k && est < lower;
        if k == 0 || shrink {
            node.near_k = desired;
        } else if grow {
            node.near_k = k + 1;
        }
        node.near_k
    }

    /// Pick the nearest reachable candidates on each side and connect.
    fn refresh_near(&mut self, id: NodeId, candidates: BTreeSet<NodeId>) {
        if !self.is_live(id) {
            return;
        }
        let k = self.near_k_with_hysteresis(id);
        let live: Vec<NodeId> =
            candidates.into_iter().filter(|c| *c != id && self.is_live(*c)).collect();

        // Direct links first so relays find overlap among them.
        let mut right = live.clone();
        right.sort_by_key(|c| ring_distance(id, *c, Direction::Right));
        let mut left = live;
        left.sort_by_key(|c| ring_distance(id, *c, Direction::Left));

        let mut chosen_right = Vec::new();
        let mut chosen_left = Vec::new();
        let mut pending: Vec<(Direction, NodeId)> = Vec::new();
        for (dir, list, chosen) in [
            (Direction::Right, &right, &mut chosen_right),
            (Direction::Left, &left, &mut chosen_left),
        ] {
            let mut taken = 0;
            for c in list.iter().copied() {
                if taken == k {
                    break;
                }
                let reachable = self.nodes[&id].table.contains(c) || self.connectable(id, c);
                if reachable {
                    chosen.push(c);
                    taken += 1;
                } else {
                    pending.push((dir, c));
                    chosen.push(c);
                    taken += 1;
                }
            }
        }
        // Establish links: direct ones first, relayed ones after.
        let mut failed = BTreeSet::new();
        for c in chosen_left.iter().chain(&chosen_right).copied().collect::<BTreeSet<_>>() {
            if pending.iter().any(|(_, p)| *p == c) {
                continue;
            }
            if !self.connect(id, c, EdgeKind::Near) {
                failed.insert(c);
            }
        }
        for c in pending.iter().map(|(_, c)| *c).collect::<BTreeSet<_>>() {
            if !self.connect(id, c, EdgeKind::Near) {
                failed.insert(c);
            }
        }
        // Refill sides that lost entries to unreachable candidates.
        let refill = |chosen: &mut Vec<NodeId>, all: &[NodeId], failed: &BTreeSet<NodeId>, me: &Self| {
            chosen.retain(|c| !failed.contains(c));
            for c in all {
                if chosen.len() >= k {
                    break;
                }
                if failed.contains(c) || chosen.contains(c) {
                    continue;
                }
                if me.nodes[&id].table.contains(*c) {
                    chosen.push(*c);
                }
            }
        };
        refill(&mut chosen_right, &right, &failed, self);
        refill(&mut chosen_left, &left, &failed, self);
        chosen_right.sort_by_key(|c| ring_distance(id, *c, Direction::Right));
        chosen_left.sort_by_key(|c| ring_distance(id, *c, Direction::Left));
        for c in chosen_right.iter().chain(&chosen_left) {
            self.set_kind(id, *c, EdgeKind::Near);
        }

        let old: BTreeSet<NodeId> = self.nodes[&id].table.of_kind(EdgeKind::Near).collect();
        let new: BTreeSet<NodeId> = chosen_left.iter().chain(&chosen_right).copied().collect();
        let before = (
            self.nodes[&id].table.left_neighbors().to_vec(),
            self.nodes[&id].table.right_neighbors().to_vec(),
        );
        if before != (chosen_left.clone(), chosen_right.clone()) {
            self.table_changes += 1;
        }
        {
            let node = self.nodes.get_mut(&id).unwrap();
            node.table.set_near(chosen_left, chosen_right);
            for s in node.slots.iter_mut() {
                if s.peer.is_some_and(|p| new.contains(&p)) {
                    s.peer = None;
                }
            }
            node.mesh.retain(|p| !new.contains(p));
        }
        for gone in old.difference(&new) {
            self.release(id, *gone);
        }
        for p in &new {
            if let Some(n) = self.nodes.get_mut(p) {
                n.hints.insert(id);
            }
        }
    }

    /// One maintenance round for `id`: liveness, relay upkeep, neighbor
    /// gossip and shortcut upkeep.
    pub fn stabilize_tick(&mut self, id: NodeId) {
        if !self.is_live(id) {
            return;
        }
        self.drop_dead_edges(id);
        relays::relay_maintenance_tick(self, id);

        let mut candidates: BTreeSet<NodeId> = std::mem::take(&mut self.nodes.get_mut(&id).unwrap().hints);
        {
            let t = &self.nodes[&id].table;
            let near: Vec<NodeId> = t.of_kind(EdgeKind::Near).collect();
            candidates.extend(near.iter().copied());
            candidates.extend(t.of_kind(EdgeKind::Leaf));
            // Inbound peers that chose us as a neighbor are candidates too.
            for (p, e) in t.edges() {
                if e.kind == EdgeKind::Inbound
                    && self.table(p).is_some_and(|pt| pt.kind(id) == Some(EdgeKind::Near))
                {
                    candidates.insert(p);
                }
            }
            for p in near {
                if let Some(pt) = self.table(p) {
                    candidates.extend(pt.left_neighbors().iter().chain(pt.right_neighbors()).copied());
                }
            }
        }
        candidates.remove(&id);
        self.refresh_near(id, candidates);

        let has_near = !self.nodes[&id].table.left_neighbors().is_empty();
        if has_near {
            let leaves: Vec<NodeId> = self.nodes[&id].table.of_kind(EdgeKind::Leaf).collect();
            for l in leaves {
                self.release(id, l);
            }
        }
        self.maintain_shortcuts(id);
        self.drop_unused_overlap(id);
        self.nodes.get_mut(&id).unwrap().ticks += 1;
    }

    fn drop_dead_edges(&mut self, id: NodeId) {
        let dead: Vec<NodeId> =
            self.nodes[&id].table.peers().filter(|p| !self.nodes.contains_key(p)).collect();
        if dead.is_empty() {
            return;
        }
        let node = self.nodes.get_mut(&id).unwrap();
        for p in &dead {
            node.table.remove(*p);
            node.mesh.remove(p);
            node.demand.remove(p);
            for s in node.slots.iter_mut() {
                if s.peer == Some(*p) {
                    s.peer = None;
                }
            }
        }
        self.table_changes += 1;
    }

    fn drop_unused_overlap(&mut self, id: NodeId) {
        let t = &self.nodes[&id].table;
        let used: BTreeSet<NodeId> = t.relay_edges().flat_map(|(_, r)| r.overlap.iter().copied()).collect();
        let unused: Vec<NodeId> = t.of_kind(EdgeKind::Overlap).filter(|p| !used.contains(p)).collect();
        for p in unused {
            self.set_kind(id, p, EdgeKind::Inbound);
            self.release(id, p);
        }
    }

    fn desired_shortcuts(&self, n: u64) -> usize {
        if !self.config.shortcuts {
            return 0;
        }
        self.config
            .shortcut_override
            .unwrap_or_else(|| (n.max(2) as f64).log2().ceil() as usize)
    }

    /// Peers seen within two hops; used to detect a small overlay.
    fn two_hop_view(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut view = BTreeSet::new();
        for p in self.nodes[&id].table.peers() {
            if let Some(pt) = self.table(p) {
                view.insert(p);
                view.extend(pt.peers());
            }
        }
        view.remove(&id);
        view.retain(|p| self.is_live(*p));
        view
    }

    fn maintain_shortcuts(&mut self, id: NodeId) {
        if !self.config.shortcuts {
            return;
        }
        let n = self.estimate_size(id);
        let threshold = self.config.mesh_threshold;

        // Small overlays: connect to everyone in view.
        let mesh_target: BTreeSet<NodeId> = if threshold > 0 && n <= 8 * threshold as u64 {
            let view = self.two_hop_view(id);
            if view.len() < threshold {
                view
            } else {
                BTreeSet::new()
            }
        } else {
            BTreeSet::new()
        };
        let old_mesh = std::mem::take(&mut self.nodes.get_mut(&id).unwrap().mesh);
        let mut mesh = BTreeSet::new();
        for p in &mesh_target {
            if self.nodes[&id].table.is_near(*p) {
                continue;
            }
            if self.nodes[&id].table.has_direct(*p) {
                let k = self.nodes[&id].table.kind(*p).unwrap();
                if Self::kind_rank(k) > Self::kind_rank(EdgeKind::Shortcut) {
                    self.set_kind(id, *p, EdgeKind::Shortcut);
                }
                mesh.insert(*p);
            } else if self.connect_direct(id, *p, EdgeKind::Shortcut) {
                mesh.insert(*p);
                self.table_changes += 1;
            }
        }
        self.nodes.get_mut(&id).unwrap().mesh = mesh.clone();
        for p in old_mesh.difference(&mesh) {
            if self.nodes[&id].table.kind(*p) == Some(EdgeKind::Shortcut)
                && !self.nodes[&id].slots.iter().any(|s| s.peer == Some(*p))
                && !self.nodes[&id].demand.contains(p)
            {
                self.set_kind(id, *p, EdgeKind::Inbound);
                self.release(id, *p);
                self.table_changes += 1;
            }
        }

        // Harmonic slots.
        let want = self.desired_shortcuts(n);
        let refresh = {
            let node = &self.nodes[&id];
            self.config.shortcut_refresh_ticks > 0 && node.ticks.is_multiple_of(self.config.shortcut_refresh_ticks)
        };
        while self.nodes[&id].slots.len() > want {
            let slot = self.nodes.get_mut(&id).unwrap().slots.pop().unwrap();
            if let Some(p) = slot.peer {
                self.drop_shortcut(id, p);
            }
        }
        let gap_n = self.gap_estimate(id);
        while self.nodes[&id].slots.len() < want {
            let node = self.nodes.get_mut(&id).unwrap();
            let target = select_shortcut_target(id, gap_n, &mut node.rng);
            node.slots.push(ShortcutSlot { target, peer: None });
            let idx = node.slots.len() - 1;
            self.resolve_slot(id, idx);
            self.table_changes += 1;
        }
        if refresh {
            for idx in 0..self.nodes[&id].slots.len() {
                self.resolve_slot(id, idx);
            }
        }
    }

    fn drop_shortcut(&mut self, id: NodeId, peer: NodeId) {
        let still_used = self.nodes[&id].slots.iter().any(|s| s.peer == Some(peer))
            || self.nodes[&id].mesh.contains(&peer)
            || self.nodes[&id].demand.contains(&peer);
        if !still_used && self.nodes[&id].table.kind(peer) == Some(EdgeKind::Shortcut) {
            self.set_kind(id, peer, EdgeKind::Inbound);
            self.release(id, peer);
        }
    }

    /// Route to the slot's target and hold a direct link to its owner.
    fn resolve_slot(&mut self, id: NodeId, idx: usize) {
        let slot = self.nodes[&id].slots[idx].clone();
        let owner = match self.route_from(id, slot.target, None, DEFAULT_TTL) {
            Ok(t) => t.delivered_at(),
            Err(_) => return,
        };
        if Some(owner) == slot.peer && self.nodes[&id].table.contains(owner) {
            return;
        }
        if let Some(old) = slot.peer {
            self.nodes.get_mut(&id).unwrap().slots[idx].peer = None;
            self.drop_shortcut(id, old);
        }
        if owner == id || self.nodes[&id].table.is_near(owner) {
            return;
        }
        // Shortcuts must be direct links; relays do not count.
        let existing = self.nodes[&id].table.edge(owner).map(|e| (e.kind, e.is_direct()));
        let ok = match existing {
            Some((_, true)) => {
                let k = self.nodes[&id].table.kind(owner).unwrap();
                if Self::kind_rank(k) > Self::kind_rank(EdgeKind::Shortcut) {
                    self.set_kind(id, owner, EdgeKind::Shortcut);
                }
                true
            }
            Some((_, false)) => false,
            None => self.connect_direct(id, owner, EdgeKind::Shortcut),
        };
        if ok {
            self.nodes.get_mut(&id).unwrap().slots[idx].peer = Some(owner);
            self.table_changes += 1;
        }
    }

    /// One maintenance round for every live node, in id order, then advance
    /// the clock by one tick interval.
    pub fn tick(&mut self) {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            self.stabilize_tick(id);
        }
        self.ticks += 1;
        self.now += self.config.tick_interval;
    }

    // ----- routing --------------------------------------------------------

    pub fn route_greedy(&self, node: NodeId, msg: &OverlayMessage) -> Result<RouteTrace, RouteError> {
        self.route_from(node, msg.dst, None, msg.ttl_hops)
    }

    pub fn route_to(&self, node: NodeId, dst: RingAddress) -> Result<RouteTrace, RouteError> {
        self.route_from(node, dst, None, DEFAULT_TTL)
    }

    /// Greedy forwarding: move to the live connection strictly closer to
    /// `dst`, otherwise deliver locally. `exclude` is never chosen as a
    /// next hop (a joining node routes to its own address this way).
    pub fn route_from(
        &self,
        start: NodeId,
        dst: RingAddress,
        exclude: Option<NodeId>,
        ttl: u32,
    ) -> Result<RouteTrace, RouteError> {
        let first = self.nodes.get(&start).ok_or(RouteError::UnknownNode(start))?;
        let mut trace = RouteTrace { hops: Vec::new(), path: vec![start] };
        if start == dst {
            return Ok(trace);
        }
        if first.table.is_empty() && self.nodes.len() > 1 {
            return Err(RouteError::NoRoute(start));
        }
        let mut cur = start;
        let mut ttl = ttl;
        loop {
            let node = &self.nodes[&cur];
            let here = closeness_key(cur, dst);
            let best = node
                .table
                .edges()
                .filter(|(p, _)| Some(*p) != exclude && self.nodes.contains_key(p))
                .filter(|(_, e)| e.relay.as_ref().is_none_or(|r| r.first_live(|x| self.is_live(x)).is_some()))
                .map(|(p, e)| (closeness_key(p, dst), p, e))
                .min_by(|a, b| a.0.cmp(&b.0));
            let Some((key, next, edge)) = best else { return Ok(trace) };
            if key.0 >= here.0 {
                return Ok(trace);
            }
            if ttl == 0 {
                return Err(RouteError::TtlExceeded(trace.hops.len()));
            }
            ttl -= 1;
            if let Some(r) = &edge.relay {
                let via = r.first_live(|x| self.is_live(x)).expect("filtered above");
                trace.path.push(via);
            }
            trace.path.push(next);
            trace.hops.push(next);
            cur = next;
        }
    }

    /// Sum of one-way link latencies along a transport path, in ms.
    pub fn path_latency_ms(&self, path: &[NodeId]) -> f64 {
        path.windows(2).map(|w| self.transport.latency.one_way_ms(w[0], w[1])).sum()
    }

    // ----- bulk helpers ---------------------------------------------------

    /// Join `ids` in order, without ticking. Each node tries the earliest
    /// joined nodes first; one that cannot reach any of them is retried
    /// after the rest.
    pub fn join_all(&mut self, ids: &[NodeId]) -> Result<(), OverlayError> {
        let mut joined: Vec<NodeId> = self.nodes.keys().copied().collect();
        let mut pending: Vec<NodeId> = ids.to_vec();
        while !pending.is_empty() {
            let mut deferred = Vec::new();
            for id in &pending {
                match self.join(*id, &joined) {
                    Ok(()) => joined.push(*id),
                    Err(OverlayError::AllBootstrapsUnreachable) => deferred.push(*id),
                    Err(e) => return Err(e),
                }
            }
            if deferred.len() == pending.len() {
                return Err(OverlayError::AllBootstrapsUnreachable);
            }
            pending = deferred;
        }
        Ok(())
    }

    /// Tick until the ring passes two consecutive consistency checks with
    /// stable neighbor lists. Returns the ticks used, or `None` when
    /// `max_ticks` ran out first.
    pub fn stabilize_until_steady(&mut self, max_ticks: usize) -> Option<usize> {
        let mut streak = 0;
        for i in 0..max_ticks {
            let before = self.near_snapshot();
            self.tick();
            let stable = before == self.near_snapshot();
            if stable && self.ring_consistent() {
                streak += 1;
                if streak >= 2 && i >= 1 {
                    return Some(i + 1);
                }
            } else {
                streak = 0;
            }
        }
        None
    }

    fn near_snapshot(&self) -> Vec<(NodeId, Vec<NodeId>, Vec<NodeId>)> {
        self.nodes
            .values()
            .map(|n| (n.id, n.table.left_neighbors().to_vec(), n.table.right_neighbors().to_vec()))
            .collect()
    }

    /// Mutual first/second neighbor agreement at every live node.
    pub fn ring_consistent(&self) -> bool {
        self.nodes.keys().all(|id| crate::experiments::crawl::node_congruence(self, *id).is_empty())
    }
}
