//! Members-only overlays bootstrapped through the public overlay's DHT.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use super::crypto::{Certificate, KeyedMacScheme, VerifyingKey};
use super::server::GroupError;
use crate::dht::{self, Dht};
use crate::overlay::{NodeId, Overlay, OverlayConfig};
use crate::time::SimTime;
use crate::transport::sim::{Simulator, Target};

#[derive(Clone, Debug)]
pub struct Member {
    pub user: String,
    pub cert: Certificate,
    /// Users this member has learned are revoked.
    pub known_revoked: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BootstrapOutcome {
    /// Nobody was listed; the node started the ring and published itself.
    FirstMember,
    Joined { accepted: Vec<NodeId> },
}

pub struct PrivateOverlay {
    pub group: String,
    pub ca_key: VerifyingKey,
    scheme: KeyedMacScheme,
    pub overlay: Overlay,
    pub dht: Dht,
    members: BTreeMap<NodeId, Member>,
    cert_checks: u64,
}

impl PrivateOverlay {
    /// A private ring that shares the public overlay's latency and
    /// reachability.
    pub fn new(group: &str, ca_key: VerifyingKey, public: &Overlay, config: OverlayConfig) -> Self {
        PrivateOverlay {
            group: group.into(),
            ca_key,
            scheme: KeyedMacScheme,
            overlay: Overlay::new(config, public.transport.clone()),
            dht: Dht::new(),
            members: BTreeMap::new(),
            cert_checks: 0,
        }
    }

    pub fn members(&self) -> impl Iterator<Item = (NodeId, &Member)> + '_ {
        self.members.iter().map(|(k, v)| (*k, v))
    }

    pub fn member(&self, id: NodeId) -> Option<&Member> {
        self.members.get(&id)
    }

    pub fn is_member(&self, id: NodeId) -> bool {
        self.members.contains_key(&id) && self.overlay.is_live(id)
    }

    /// Certificate checks performed by peers; none involve the server.
    pub fn cert_checks(&self) -> u64 {
        self.cert_checks
    }

    /// Offline validation of `cert` from `member`'s point of view.
    pub fn accepts(&self, member: NodeId, cert: &Certificate) -> bool {
        let Some(m) = self.members.get(&member) else { return false };
        cert.group == self.group && cert.verify(&self.scheme, &self.ca_key) && !m.known_revoked.contains(&cert.user)
    }

    /// Fetch the member list from the public DHT, exchange certificates
    /// with each listed member over the public overlay, join the private
    /// ring through those that accept, and publish ourselves.
    pub fn bootstrap(
        &mut self,
        public: &Overlay,
        public_dht: &mut Dht,
        node: NodeId,
        cert: Certificate,
    ) -> Result<BootstrapOutcome, GroupError> {
        if !public.is_live(node) {
            return Err(GroupError::Malformed(format!("{node:?} has not joined the public overlay")));
        }
        if self.is_member(node) {
            return Err(GroupError::AlreadyMember(cert.user));
        }
        if cert.subject_node != node {
            return Err(GroupError::CertRejected(0));
        }
        let key = dht::private_key(&self.group);
        let listed: Vec<NodeId> = public_dht
            .get(public, node, &key)
            .map_err(|e| GroupError::Malformed(e.to_string()))?
            .iter()
            .filter_map(|v| dht::decode_node_id(v))
            .filter(|id| *id != node && self.is_member(*id))
            .collect();

        let newcomer = Member { user: cert.user.clone(), cert: cert.clone(), known_revoked: BTreeSet::new() };
        if listed.is_empty() {
            self.overlay.join(node, &[]).map_err(|e| GroupError::Malformed(e.to_string()))?;
            self.members.insert(node, newcomer);
            public_dht
                .put(public, node, &key, &dht::encode_node_id(node), dht::DEFAULT_TTL)
                .map_err(|e| GroupError::Malformed(e.to_string()))?;
            return Ok(BootstrapOutcome::FirstMember);
        }

        let mut accepted = Vec::new();
        let mut contacted = 0;
        for m in listed {
            let reachable = public.route_to(node, m).map(|t| t.delivered_at() == m).unwrap_or(false);
            if !reachable {
                continue;
            }
            contacted += 1;
            self.cert_checks += 2;
            let they_accept = self.accepts(m, &cert);
            let peer_cert = &self.members[&m].cert;
            let we_accept = peer_cert.group == self.group && peer_cert.verify(&self.scheme, &self.ca_key);
            if they_accept && we_accept {
                accepted.push(m);
            }
        }
        if accepted.is_empty() {
            return Err(GroupError::CertRejected(contacted));
        }
        self.overlay.join(node, &accepted).map_err(|e| GroupError::Malformed(e.to_string()))?;
        self.members.insert(node, newcomer);
        public_dht
            .put(public, node, &key, &dht::encode_node_id(node), dht::DEFAULT_TTL)
            .map_err(|e| GroupError::Malformed(e.to_string()))?;
        Ok(BootstrapOutcome::Joined { accepted })
    }

    /// Remove a member from the private ring (it keeps its record so a
    /// later bootstrap can be attempted).
    pub fn depart(&mut self, node: NodeId) {
        let _ = self.overlay.leave(node, true);
    }

    /// `member` learns that `user` is revoked and cuts every link to nodes
    /// certified for that user.
    pub fn learn_revocation(&mut self, member: NodeId, user: &str) {
        let Some(m) = self.members.get_mut(&member) else { return };
        if !m.known_revoked.insert(user.to_string()) {
            return;
        }
        let targets: Vec<NodeId> =
            self.members.iter().filter(|(_, x)| x.cert.user == user).map(|(id, _)| *id).collect();
        for t in targets {
            if t != member {
                self.overlay.refuse(member, t);
            }
        }
    }

    pub fn knows_revoked(&self, member: NodeId, user: &str) -> bool {
        self.members.get(&member).is_some_and(|m| m.known_revoked.contains(user))
    }

    /// Every edge joins two members whose certificates verify and whom the
    /// other side has not learned to be revoked.
    pub fn check_membership_closure(&self) -> Result<(), String> {
        for id in self.overlay.live_ids() {
            let Some(me) = self.members.get(&id) else {
                return Err(format!("{id:?} is in the private ring without membership"));
            };
            for peer in self.overlay.table(id).into_iter().flat_map(|t| t.peers()) {
                let Some(p) = self.members.get(&peer) else {
                    return Err(format!("{id:?} links to non-member {peer:?}"));
                };
                if !self.accepts(id, &p.cert) || !self.accepts(peer, &me.cert) {
                    return Err(format!("edge {id:?}-{peer:?} has a rejected certificate"));
                }
            }
        }
        Ok(())
    }

    /// Each member subscribes to revocation events for every other member,
    /// under `ipop:revoke:<user>` in the public DHT.
    pub fn subscribe_revocations(&self, public: &Overlay, public_dht: &mut Dht) -> Result<usize, GroupError> {
        let mut n = 0;
        let users: BTreeSet<&str> = self.members.values().map(|m| m.user.as_str()).collect();
        for id in self.overlay.live_ids() {
            if !public.is_live(id) {
                continue;
            }
            let me = &self.members[&id].user;
            for user in users.iter().filter(|u| **u != me) {
                public_dht
                    .put(public, id, &dht::revoke_key(user), &dht::encode_node_id(id), dht::DEFAULT_TTL)
                    .map_err(|e| GroupError::Malformed(e.to_string()))?;
                n += 1;
            }
        }
        Ok(n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub after: Duration,
    pub hops: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BroadcastReport {
    pub received: BTreeMap<NodeId, Receipt>,
    /// Copies that arrived after the first and were dropped unprocessed.
    pub duplicates_suppressed: u64,
}

impl BroadcastReport {
    pub fn delivery_count(&self) -> usize {
        self.received.len()
    }
}

/// One-way delay of the link from `a` to its peer `b`, relays included.
fn link_delay_ms(ov: &Overlay, a: NodeId, b: NodeId) -> f64 {
    let lat = &ov.transport.latency;
    match ov.table(a).and_then(|t| t.edge(b)).and_then(|e| e.relay.as_ref()) {
        Some(r) => match r.first_live(|p| ov.is_live(p)) {
            Some(via) => lat.one_way_ms(a, via) + lat.one_way_ms(via, b),
            None => f64::INFINITY,
        },
        None => lat.one_way_ms(a, b),
    }
}

/// Flood from `origin` over every overlay link. Each node forwards the
/// first copy it receives to all peers except the sender; later copies are
/// dropped. Nodes in `silent` receive but never forward.
pub fn broadcast_with(ov: &Overlay, origin: NodeId, silent: &BTreeSet<NodeId>) -> BroadcastReport {
    let mut report = BroadcastReport::default();
    if !ov.is_live(origin) {
        return report;
    }
    let mut sim: Simulator<(Option<NodeId>, NodeId, usize)> = Simulator::new();
    sim.schedule_at(SimTime::ZERO, Target::Node(origin), (None, origin, 0));
    while let Some(ev) = sim.step() {
        let (from, at, hops) = ev.payload;
        if report.received.contains_key(&at) {
            report.duplicates_suppressed += 1;
            continue;
        }
        report.received.insert(at, Receipt { after: Duration::from_nanos(ev.fire_at.as_nanos()), hops });
        if silent.contains(&at) {
            continue;
        }
        let peers: Vec<NodeId> = ov.table(at).into_iter().flat_map(|t| t.peers()).collect();
        for p in peers {
            if Some(p) == from || !ov.is_live(p) {
                continue;
            }
            let d = link_delay_ms(ov, at, p);
            if d.is_finite() {
                sim.schedule_in(crate::time::millis_f64(d), Target::Node(p), (Some(at), p, hops + 1));
            }
        }
    }
    report
}

pub fn broadcast(ov: &Overlay, origin: NodeId) -> BroadcastReport {
    broadcast_with(ov, origin, &BTreeSet::new())
}

/// Slowest single link in the overlay, one way, in ms.
pub fn max_link_delay_ms(ov: &Overlay) -> f64 {
    ov.live_ids()
        .flat_map(|a| ov.table(a).into_iter().flat_map(move |t| t.peers().map(move |b| (a, b))))
        .map(|(a, b)| link_delay_ms(ov, a, b))
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max)
}

/// Largest shortest-path hop count between live nodes.
pub fn hop_diameter(ov: &Overlay) -> usize {
    let ids: Vec<NodeId> = ov.live_ids().collect();
    let mut diameter = 0;
    for src in &ids {
        let mut dist: BTreeMap<NodeId, usize> = BTreeMap::from([(*src, 0)]);
        let mut frontier = vec![*src];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for n in frontier {
                let d = dist[&n];
                for p in ov.table(n).into_iter().flat_map(|t| t.peers()) {
                    if ov.is_live(p) && !dist.contains_key(&p) {
                        dist.insert(p, d + 1);
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
        diameter = diameter.max(dist.values().copied().max().unwrap_or(0));
    }
    diameter
}
