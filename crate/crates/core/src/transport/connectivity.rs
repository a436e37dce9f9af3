//! NAT and firewall reachability between endpoints.

use std::collections::{BTreeMap, BTreeSet};

use crate::overlay::NodeId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NatKind {
    #[default]
    Public,
    ConeNat,
    SymmetricNat,
    FirewallBlocked,
}

/// Deterministic reachability: the outcome depends only on the endpoint
/// kinds and explicit pair blocks, never on a simulated handshake.
#[derive(Clone, Debug, Default)]
pub struct ConnectivityPolicy {
    kinds: BTreeMap<NodeId, NatKind>,
    explicit_block: BTreeSet<(NodeId, NodeId)>,
}

fn pair(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl ConnectivityPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unregistered nodes are treated as public.
    pub fn set_kind(&mut self, node: NodeId, kind: NatKind) {
        self.kinds.insert(node, kind);
    }

    pub fn kind(&self, node: NodeId) -> NatKind {
        self.kinds.get(&node).copied().unwrap_or_default()
    }

    pub fn block(&mut self, a: NodeId, b: NodeId) {
        self.explicit_block.insert(pair(a, b));
    }

    pub fn unblock(&mut self, a: NodeId, b: NodeId) {
        self.explicit_block.remove(&pair(a, b));
    }

    pub fn is_blocked(&self, a: NodeId, b: NodeId) -> bool {
        self.explicit_block.contains(&pair(a, b))
    }

    pub fn blocked_pairs(&self) -> usize {
        self.explicit_block.len()
    }

    pub fn can_connect(&self, a: NodeId, b: NodeId) -> bool {
        can_connect(a, b, self)
    }
}

pub fn can_connect(a: NodeId, b: NodeId, policy: &ConnectivityPolicy) -> bool {
    use NatKind::*;
    if a == b {
        return true;
    }
    if policy.is_blocked(a, b) {
        return false;
    }
    match (policy.kind(a), policy.kind(b)) {
        (FirewallBlocked, _) | (_, FirewallBlocked) => false,
        (Public, _) | (_, Public) => true,
        (ConeNat, ConeNat) => true,
        (SymmetricNat, _) | (_, SymmetricNat) => false,
    }
}
