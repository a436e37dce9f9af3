//! A public overlay with one group whose members have all bootstrapped the
//! private overlay.

use super::private::{BootstrapOutcome, PrivateOverlay};
use super::server::{Channel, GroupError, GroupServer};
use crate::dht::Dht;
use crate::experiments::dataset::synthetic_latency;
use crate::experiments::world::{build_overlay, seeded_ids};
use crate::overlay::{NodeId, Overlay, OverlayConfig};
use crate::transport::ConnectivityPolicy;

pub struct GroupWorld {
    pub server: GroupServer,
    pub public: Overlay,
    pub public_dht: Dht,
    pub private: PrivateOverlay,
    /// (user, node) in enrollment order; the first is the administrator.
    pub members: Vec<(String, NodeId)>,
    /// Public nodes that never joined the group.
    pub outsiders: Vec<NodeId>,
}

/// `members` users enroll and bootstrap; `outsiders` more nodes join only
/// the public overlay.
pub fn build_group(members: usize, outsiders: usize, seed: u64) -> Result<GroupWorld, GroupError> {
    let n = members + outsiders;
    let ids = seeded_ids(n, seed);
    let mut public =
        build_overlay(synthetic_latency(n, seed), ConnectivityPolicy::new(), OverlayConfig::default(), &ids)
            .map_err(|e| GroupError::Malformed(e.to_string()))?;
    public.stabilize_until_steady(100);
    let mut public_dht = Dht::new();
    let mut server = GroupServer::new(seed);
    let group = "lab";
    let ca = server.create_group("admin", group, "10.128.0.0/16".parse().unwrap())?.ca_public_key.clone();
    let mut private = PrivateOverlay::new(group, ca, &public, OverlayConfig { seed, ..OverlayConfig::default() });
    let mut enrolled = Vec::new();
    for (i, node) in ids.iter().take(members).enumerate() {
        let user = if i == 0 { "admin".to_string() } else { format!("user{i}") };
        if i > 0 {
            server.request_join(&user, group, "")?;
            server.approve("admin", group, &user)?;
        }
        let blob = server.issue_blob(&user, group, Channel::Secure)?;
        let cert = server.sign_csr(&blob.shared_key, *node)?;
        match private.bootstrap(&public, &mut public_dht, *node, cert)? {
            BootstrapOutcome::FirstMember | BootstrapOutcome::Joined { .. } => {}
        }
        enrolled.push((user, *node));
        if i % 8 == 7 {
            private.overlay.tick();
        }
    }
    private.overlay.stabilize_until_steady(100);
    private.subscribe_revocations(&public, &mut public_dht)?;
    Ok(GroupWorld {
        server,
        public,
        public_dht,
        private,
        members: enrolled,
        outsiders: ids[members..].to_vec(),
    })
}
