//! Links created on demand when VPN traffic flows between two members.

use std::collections::BTreeMap;

use crate::overlay::{NodeId, Overlay, RouteError};

/// Packets seen on a multi-hop path before a link is requested.
pub const DEFAULT_SHORTCUT_THRESHOLD: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutOutcome {
    Direct,
    Relayed,
    /// Neither a direct link nor a relay could be set up; traffic keeps
    /// using overlay routing.
    Failed,
}

/// Transport hops from `a` to `b` over the overlay, relay hops counted.
pub fn path_hops(ov: &Overlay, a: NodeId, b: NodeId) -> Result<usize, RouteError> {
    let t = ov.route_to(a, b)?;
    if t.delivered_at() != b {
        return Err(RouteError::NoRoute(a));
    }
    Ok(t.path.len() - 1)
}

#[derive(Clone, Debug)]
pub struct ShortcutTracker {
    pub threshold: u64,
    seen: BTreeMap<(NodeId, NodeId), u64>,
    created: BTreeMap<(NodeId, NodeId), ShortcutOutcome>,
}

impl Default for ShortcutTracker {
    fn default() -> Self {
        Self::new(DEFAULT_SHORTCUT_THRESHOLD)
    }
}

impl ShortcutTracker {
    pub fn new(threshold: u64) -> Self {
        ShortcutTracker { threshold: threshold.max(1), seen: BTreeMap::new(), created: BTreeMap::new() }
    }

    pub fn outcome(&self, a: NodeId, b: NodeId) -> Option<ShortcutOutcome> {
        self.created.get(&(a, b)).copied()
    }

    pub fn created(&self) -> usize {
        self.created.len()
    }

    /// Note one VPN packet from `a` to `b` that travelled `hops` transport
    /// hops. Once the threshold is met on a path longer than one overlay
    /// edge, ask for a link.
    pub fn observe(&mut self, ov: &mut Overlay, a: NodeId, b: NodeId, hops: usize) -> Option<ShortcutOutcome> {
        if a == b || hops < 2 || self.created.contains_key(&(a, b)) {
            return None;
        }
        // A relayed overlay edge is already the best available.
        if ov.table(a).and_then(|t| t.edge(b)).is_some() {
            return None;
        }
        let n = self.seen.entry((a, b)).or_default();
        *n += 1;
        if *n < self.threshold {
            return None;
        }
        let outcome = demand_shortcut(ov, a, b);
        self.created.insert((a, b), outcome);
        Some(outcome)
    }
}

/// Try a direct link, falling back to a relay.
pub fn demand_shortcut(ov: &mut Overlay, a: NodeId, b: NodeId) -> ShortcutOutcome {
    match ov.demand_link(a, b) {
        Some(true) => ShortcutOutcome::Direct,
        Some(false) => ShortcutOutcome::Relayed,
        None => ShortcutOutcome::Failed,
    }
}
