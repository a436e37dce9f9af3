//! Two-hop relays between peers that cannot connect directly.
//!
//! Endpoints swap annotated neighbor sets, intersect them, and forward
//! through the best member of the overlap. When the sets are disjoint one
//! endpoint connects to the other's neighbors to create overlap.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::overlay::{EdgeKind, NodeId, Overlay};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum RelayPolicy {
    /// Lowest latency(a,r) + latency(r,b) first.
    #[default]
    Latency,
    /// Oldest connection first, using the younger of the two links.
    Stability,
    /// Every overlap member is active.
    All,
}

impl fmt::Display for RelayPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelayPolicy::Latency => "latency",
            RelayPolicy::Stability => "stability",
            RelayPolicy::All => "all",
        })
    }
}

impl FromStr for RelayPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "latency" => Ok(RelayPolicy::Latency),
            "stability" => Ok(RelayPolicy::Stability),
            "all" => Ok(RelayPolicy::All),
            other => Err(format!("unknown relay policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RelayError {
    #[error("no overlay path between {0:?} and {1:?}")]
    NoOverlayPath(NodeId, NodeId),
    #[error("no relay candidates")]
    EmptyCandidates,
    #[error("none of the cross-neighbors is reachable")]
    NoCandidateReachable,
    #[error("unknown or departed node {0:?}")]
    UnknownNode(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborEntry {
    pub peer: NodeId,
    pub age_s: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedNeighborSet {
    pub owner: NodeId,
    pub entries: Vec<NeighborEntry>,
}

impl AnnotatedNeighborSet {
    /// Direct peers of `owner`, annotated from its connection table.
    pub fn of(ov: &Overlay, owner: NodeId) -> Option<Self> {
        let table = ov.table(owner)?;
        let now = ov.now();
        let entries = table
            .edges()
            .filter(|(p, e)| e.is_direct() && ov.is_live(*p))
            .map(|(peer, e)| NeighborEntry {
                peer,
                age_s: now.saturating_sub(e.meta.created_at).as_secs_f64(),
                latency_ms: e.meta.latency_ms,
            })
            .collect();
        Some(AnnotatedNeighborSet { owner, entries })
    }

    pub fn get(&self, peer: NodeId) -> Option<&NeighborEntry> {
        self.entries.iter().find(|e| e.peer == peer)
    }
}

/// A common neighbor with both sides' annotations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelayCandidate {
    pub peer: NodeId,
    pub latency_a_ms: f64,
    pub latency_b_ms: f64,
    pub age_a_s: f64,
    pub age_b_s: f64,
}

impl RelayCandidate {
    pub fn latency_sum(&self) -> f64 {
        self.latency_a_ms + self.latency_b_ms
    }

    pub fn stability(&self) -> f64 {
        self.age_a_s.min(self.age_b_s)
    }
}

/// Members present in both sets, in id order. The endpoints themselves are
/// never candidates.
pub fn compute_overlap(a: &AnnotatedNeighborSet, b: &AnnotatedNeighborSet) -> Vec<RelayCandidate> {
    let bmap: BTreeMap<NodeId, &NeighborEntry> = b.entries.iter().map(|e| (e.peer, e)).collect();
    let mut out: Vec<RelayCandidate> = a
        .entries
        .iter()
        .filter(|e| e.peer != a.owner && e.peer != b.owner)
        .filter_map(|ea| {
            bmap.get(&ea.peer).map(|eb| RelayCandidate {
                peer: ea.peer,
                latency_a_ms: ea.latency_ms,
                latency_b_ms: eb.latency_ms,
                age_a_s: ea.age_s,
                age_b_s: eb.age_s,
            })
        })
        .collect();
    out.sort_by_key(|c| c.peer);
    out.dedup_by_key(|c| c.peer);
    out
}

/// Order candidates by policy; ties fall back to the lower id.
pub fn select_relays(
    candidates: &[RelayCandidate],
    policy: RelayPolicy,
    _k: usize,
) -> Result<Vec<NodeId>, RelayError> {
    if candidates.is_empty() {
        return Err(RelayError::EmptyCandidates);
    }
    let mut c = candidates.to_vec();
    match policy {
        RelayPolicy::Latency => c.sort_by(|x, y| {
            x.latency_sum().partial_cmp(&y.latency_sum()).unwrap_or(Ordering::Equal).then(x.peer.cmp(&y.peer))
        }),
        RelayPolicy::Stability => c.sort_by(|x, y| {
            y.stability().partial_cmp(&x.stability()).unwrap_or(Ordering::Equal).then(x.peer.cmp(&y.peer))
        }),
        RelayPolicy::All => c.sort_by_key(|x| x.peer),
    }
    Ok(c.into_iter().map(|x| x.peer).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelayEdge {
    pub endpoints: (NodeId, NodeId),
    /// Active members first, reserves after.
    pub overlap: Vec<NodeId>,
    pub policy: RelayPolicy,
    pub active_k: usize,
}

impl RelayEdge {
    pub fn active(&self) -> &[NodeId] {
        match self.policy {
            RelayPolicy::All => &self.overlap,
            _ => &self.overlap[..self.active_k.max(1).min(self.overlap.len())],
        }
    }

    pub fn reserves(&self) -> &[NodeId] {
        &self.overlap[self.active().len()..]
    }

    /// The relay traffic currently uses: the first live active member, else
    /// the first live reserve.
    pub fn first_live(&self, live: impl Fn(NodeId) -> bool) -> Option<NodeId> {
        self.overlap.iter().copied().find(|p| live(*p))
    }

    pub fn other(&self, me: NodeId) -> NodeId {
        if self.endpoints.0 == me {
            self.endpoints.1
        } else {
            self.endpoints.0
        }
    }
}

/// Either endpoint's view of how it reaches the other.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Link {
    Direct,
    Relay(RelayEdge),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProactiveReport {
    pub attempted: Vec<NodeId>,
    pub connected: Vec<NodeId>,
}

/// Connect `a` to `b`'s neighbors, then `b` to `a`'s, stopping at the first
/// success.
pub fn proactive_connect(ov: &mut Overlay, a: NodeId, b: NodeId) -> Result<ProactiveReport, RelayError> {
    let mut report = ProactiveReport::default();
    for (x, y) in [(a, b), (b, a)] {
        let set = AnnotatedNeighborSet::of(ov, y).ok_or(RelayError::UnknownNode(y))?;
        for e in set.entries {
            if e.peer == x || ov.table(x).is_some_and(|t| t.has_direct(e.peer)) {
                continue;
            }
            report.attempted.push(e.peer);
            if ov.connect_direct(x, e.peer, EdgeKind::Overlap) {
                report.connected.push(e.peer);
                return Ok(report);
            }
        }
    }
    Err(RelayError::NoCandidateReachable)
}

fn overlap_now(ov: &Overlay, a: NodeId, b: NodeId) -> Result<Vec<RelayCandidate>, RelayError> {
    let sa = AnnotatedNeighborSet::of(ov, a).ok_or(RelayError::UnknownNode(a))?;
    let sb = AnnotatedNeighborSet::of(ov, b).ok_or(RelayError::UnknownNode(b))?;
    Ok(compute_overlap(&sa, &sb))
}

/// Build a relay edge from the current neighbor sets, creating overlap if
/// needed. Does not install it.
pub(crate) fn establish(ov: &mut Overlay, a: NodeId, b: NodeId) -> Result<RelayEdge, RelayError> {
    let mut cands = overlap_now(ov, a, b)?;
    if cands.is_empty() {
        proactive_connect(ov, a, b)?;
        cands = overlap_now(ov, a, b)?;
    }
    let policy = ov.config.relay_policy;
    let overlap = select_relays(&cands, policy, ov.config.relay_active_k)?;
    Ok(RelayEdge { endpoints: (a, b), overlap, policy, active_k: ov.config.relay_active_k })
}

/// Connect `a` and `b`, through a relay when a direct link is impossible.
/// The neighbor-set exchange needs an overlay route from `a` to `b`.
pub fn request_relay(ov: &mut Overlay, a: NodeId, b: NodeId) -> Result<Link, RelayError> {
    if !ov.is_live(a) {
        return Err(RelayError::UnknownNode(a));
    }
    if !ov.is_live(b) {
        return Err(RelayError::UnknownNode(b));
    }
    if ov.transport.can_connect(a, b) {
        let kind = ov.table(a).and_then(|t| t.kind(b)).unwrap_or(EdgeKind::Shortcut);
        ov.connect_direct(a, b, kind);
        return Ok(Link::Direct);
    }
    let reached = ov.route_to(a, b).map(|t| t.delivered_at() == b).unwrap_or(false);
    if !reached {
        return Err(RelayError::NoOverlayPath(a, b));
    }
    let edge = establish(ov, a, b)?;
    let kind = ov.table(a).and_then(|t| t.kind(b)).unwrap_or(EdgeKind::Relay);
    ov.install_relay(a, b, edge.clone(), kind);
    Ok(Link::Relay(edge))
}

/// Refresh the relay edges held by `id`: drop departed or disconnected
/// overlap members, re-rank by policy, and rebuild the relay when the
/// overlap is gone. The lower endpoint maintains each shared edge.
pub fn relay_maintenance_tick(ov: &mut Overlay, id: NodeId) {
    let Some(table) = ov.table(id) else { return };
    let relayed: Vec<(NodeId, RelayEdge)> = table
        .relay_edges()
        .filter(|(p, _)| id < *p)
        .map(|(p, r)| (p, r.clone()))
        .collect();
    for (peer, old) in relayed {
        if !ov.is_live(peer) {
            continue;
        }
        let cands = match overlap_now(ov, id, peer) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let next = if cands.is_empty() {
            establish(ov, id, peer)
        } else {
            select_relays(&cands, old.policy, old.active_k).map(|overlap| RelayEdge { overlap, ..old.clone() })
        };
        match next {
            Ok(edge) if edge.overlap == old.overlap => {}
            Ok(edge) => {
                for (x, y) in [(id, peer), (peer, id)] {
                    if let Some(e) = ov.table_mut(x).and_then(|t| t.edge_mut(y)) {
                        e.relay = Some(edge.clone());
                    }
                }
            }
            Err(_) => {
                // Relay impossible; leave the stale edge for the next round
                // unless every member is gone.
                if old.first_live(|p| ov.is_live(p)).is_none() {
                    for (x, y) in [(id, peer), (peer, id)] {
                        if let Some(t) = ov.table_mut(x) {
                            t.remove(y);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u128) -> NodeId {
        NodeId::from_u128(n)
    }

    fn set(owner: u128, peers: &[(u128, f64, f64)]) -> AnnotatedNeighborSet {
        AnnotatedNeighborSet {
            owner: id(owner),
            entries: peers
                .iter()
                .map(|(p, age, lat)| NeighborEntry { peer: id(*p), age_s: *age, latency_ms: *lat })
                .collect(),
        }
    }

    #[test]
    fn overlap_is_intersection() {
        let a = set(1, &[(10, 1.0, 1.0), (11, 1.0, 1.0)]);
        let b = set(2, &[(11, 1.0, 1.0), (12, 1.0, 1.0)]);
        let o = compute_overlap(&a, &b);
        assert_eq!(o.iter().map(|c| c.peer).collect::<Vec<_>>(), vec![id(11)]);
        let c = set(3, &[(20, 1.0, 1.0)]);
        assert!(compute_overlap(&a, &c).is_empty());
    }

    #[test]
    fn latency_policy_is_argmin() {
        let a = set(1, &[(10, 0.0, 10.0), (11, 0.0, 5.0), (12, 0.0, 25.0)]);
        let b = set(2, &[(10, 0.0, 20.0), (11, 0.0, 7.0), (12, 0.0, 25.0)]);
        let cands = compute_overlap(&a, &b);
        let sums: Vec<f64> = cands.iter().map(|c| c.latency_sum()).collect();
        assert_eq!(sums, vec![30.0, 12.0, 50.0]);
        let order = select_relays(&cands, RelayPolicy::Latency, 1).unwrap();
        assert_eq!(order, vec![id(11), id(10), id(12)]);
        let edge = RelayEdge { endpoints: (id(1), id(2)), overlap: order, policy: RelayPolicy::Latency, active_k: 1 };
        assert_eq!(edge.active(), &[id(11)]);
        assert_eq!(edge.reserves().len(), 2);
    }

    #[test]
    fn stability_uses_younger_link() {
        let a = set(1, &[(10, 100.0, 1.0), (11, 50.0, 1.0)]);
        let b = set(2, &[(10, 5.0, 1.0), (11, 40.0, 1.0)]);
        let order = select_relays(&compute_overlap(&a, &b), RelayPolicy::Stability, 1).unwrap();
        assert_eq!(order, vec![id(11), id(10)]);
    }

    #[test]
    fn all_policy_and_single_candidate() {
        let a = set(1, &[(10, 0.0, 9.0), (11, 0.0, 1.0)]);
        let b = set(2, &[(10, 0.0, 9.0), (11, 0.0, 1.0)]);
        let c = compute_overlap(&a, &b);
        let order = select_relays(&c, RelayPolicy::All, 1).unwrap();
        let edge = RelayEdge { endpoints: (id(1), id(2)), overlap: order, policy: RelayPolicy::All, active_k: 1 };
        assert_eq!(edge.active().len(), 2);
        for p in [RelayPolicy::Latency, RelayPolicy::Stability, RelayPolicy::All] {
            assert_eq!(select_relays(&c[..1], p, 1).unwrap(), vec![id(10)]);
        }
        assert_eq!(select_relays(&[], RelayPolicy::Latency, 1), Err(RelayError::EmptyCandidates));
    }

    #[test]
    fn policy_parses() {
        for p in [RelayPolicy::Latency, RelayPolicy::Stability, RelayPolicy::All] {
            assert_eq!(p.to_string().parse::<RelayPolicy>().unwrap(), p);
        }
        assert!("fastest".parse::<RelayPolicy>().is_err());
    }
}
