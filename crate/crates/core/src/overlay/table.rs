//! Per-node connection state.

use std::collections::BTreeMap;

use crate::overlay::id::{ring_distance, Direction, NodeId};
use crate::relays::RelayEdge;
use crate::time::SimTime;

/// Why a node holds a connection. Every peer has exactly one kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    /// Ring neighbor, listed in `left` or `right`.
    Near,
    /// Long-range link from a harmonic slot, or a demand-created link.
    Shortcut,
    /// On-demand two-hop link between blocked peers.
    Relay,
    /// Opened only to create relay overlap with a blocked peer.
    Overlap,
    /// Transient link to the bootstrap node during join.
    Leaf,
    /// The peer chose this connection; we keep it because it is shared.
    Inbound,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeMeta {
    pub created_at: SimTime,
    pub latency_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub kind: EdgeKind,
    /// Set when the peer is reached through a relay instead of directly.
    pub relay: Option<RelayEdge>,
    pub meta: EdgeMeta,
}

impl Edge {
    pub fn is_direct(&self) -> bool {
        self.relay.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct ConnectionTable {
    owner: NodeId,
    left: Vec<NodeId>,
    right: Vec<NodeId>,
    edges: BTreeMap<NodeId, Edge>,
}

impl ConnectionTable {
    pub fn new(owner: NodeId) -> Self {
        ConnectionTable { owner, left: Vec::new(), right: Vec::new(), edges: BTreeMap::new() }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    /// Nearest first.
    pub fn left_neighbors(&self) -> &[NodeId] {
        &self.left
    }

    /// Nearest first.
    pub fn right_neighbors(&self) -> &[NodeId] {
        &self.right
    }

    pub fn neighbors(&self, dir: Direction) -> &[NodeId] {
        match dir {
            Direction::Left => &self.left,
            Direction::Right => &self.right,
        }
    }

    pub fn shortcuts(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.of_kind(EdgeKind::Shortcut)
    }

    pub fn of_kind(&self, kind: EdgeKind) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.iter().filter(move |(_, e)| e.kind == kind).map(|(p, _)| *p)
    }

    /// Peers reached through a relay, with the relay path.
    pub fn relay_edges(&self) -> impl Iterator<Item = (NodeId, &RelayEdge)> + '_ {
        self.edges.iter().filter_map(|(p, e)| e.relay.as_ref().map(|r| (*p, r)))
    }

    pub fn edge_meta(&self, peer: NodeId) -> Option<EdgeMeta> {
        self.edges.get(&peer).map(|e| e.meta)
    }

    pub fn edge(&self, peer: NodeId) -> Option<&Edge> {
        self.edges.get(&peer)
    }

    pub(crate) fn edge_mut(&mut self, peer: NodeId) -> Option<&mut Edge> {
        self.edges.get_mut(&peer)
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, &Edge)> + '_ {
        self.edges.iter().map(|(p, e)| (*p, e))
    }

    pub fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.keys().copied()
    }

    pub fn direct_peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.iter().filter(|(_, e)| e.is_direct()).map(|(p, _)| *p)
    }

    pub fn contains(&self, peer: NodeId) -> bool {
        self.edges.contains_key(&peer)
    }

    pub fn has_direct(&self, peer: NodeId) -> bool {
        self.edges.get(&peer).is_some_and(Edge::is_direct)
    }

    pub fn kind(&self, peer: NodeId) -> Option<EdgeKind> {
        self.edges.get(&peer).map(|e| e.kind)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn is_near(&self, peer: NodeId) -> bool {
        self.kind(peer) == Some(EdgeKind::Near)
    }

    pub(crate) fn insert(&mut self, peer: NodeId, edge: Edge) {
        self.edges.insert(peer, edge);
    }

    pub(crate) fn remove(&mut self, peer: NodeId) -> Option<Edge> {
        self.left.retain(|p| *p != peer);
        self.right.retain(|p| *p != peer);
        self.edges.remove(&peer)
    }

    /// Replace the ordered neighbor lists. Entries must already be edges.
    pub(crate) fn set_near(&mut self, left: Vec<NodeId>, right: Vec<NodeId>) {
        debug_assert!(left.iter().chain(&right).all(|p| self.edges.contains_key(p)));
        self.left = left;
        self.right = right;
    }

    /// Overwrite a neighbor slot without touching edges. Used by crawl
    /// fault-injection tests to fabricate stale state.
    pub fn inject_stale_neighbor(&mut self, dir: Direction, index: usize, peer: NodeId) {
        let list = match dir {
            Direction::Left => &mut self.left,
            Direction::Right => &mut self.right,
        };
        if index < list.len() {
            list[index] = peer;
        } else {
            list.push(peer);
        }
    }

    /// Structural invariants: ordered neighbor lists, near entries backed by
    /// `Near` edges, and sane metadata.
    pub fn check_invariants(&self, now: SimTime) -> Result<(), String> {
        for (dir, list) in [(Direction::Left, &self.left), (Direction::Right, &self.right)] {
            for w in list.windows(2) {
                let (a, b) = (
                    ring_distance(self.owner, w[0], dir),
                    ring_distance(self.owner, w[1], dir),
                );
                if a >= b {
                    return Err(format!("{dir:?} list not ordered nearest-first"));
                }
            }
            for p in list {
                if !self.is_near(*p) {
                    return Err(format!("{p:?} listed as neighbor without a near edge"));
                }
            }
        }
        for (p, e) in &self.edges {
            if e.kind == EdgeKind::Near && !self.left.contains(p) && !self.right.contains(p) {
                return Err(format!("near edge {p:?} missing from neighbor lists"));
            }
            if e.meta.created_at > now || e.meta.latency_ms < 0.0 || !e.meta.latency_ms.is_finite() {
                return Err(format!("bad metadata on edge {p:?}"));
            }
        }
        Ok(())
    }
}
