//! Revocation delivery over three independent channels: CRL polling,
//! DHT-registered notifications, and a flood over the private overlay.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use super::private::{broadcast_with, hop_diameter, max_link_delay_ms, PrivateOverlay};
use super::server::{GroupError, GroupServer};
use crate::dht::{self, Dht};
use crate::overlay::{NodeId, Overlay};
use crate::time::{millis_f64, SimTime};
use crate::transport::sim::{Simulator, Target};

pub const DEFAULT_CRL_POLL: Duration = Duration::from_secs(10 * 60);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RevocationChannel {
    Crl,
    DhtEvent,
    Broadcast,
}

#[derive(Clone, Debug)]
pub struct RevocationConfig {
    pub crl: bool,
    pub dht_event: bool,
    pub broadcast: bool,
    pub crl_poll: Duration,
    /// Notifications are dropped in flight, as by an attacker on the DHT.
    pub dht_suppressed: bool,
}

impl RevocationConfig {
    pub fn all() -> Self {
        RevocationConfig { crl: true, dht_event: true, broadcast: true, crl_poll: DEFAULT_CRL_POLL, dht_suppressed: false }
    }

    pub fn only(channel: RevocationChannel) -> Self {
        RevocationConfig {
            crl: channel == RevocationChannel::Crl,
            dht_event: channel == RevocationChannel::DhtEvent,
            broadcast: channel == RevocationChannel::Broadcast,
            ..Self::all()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Learned {
    pub after: Duration,
    pub channel: RevocationChannel,
    /// Overlay hops, for the flood.
    pub hops: Option<usize>,
    /// Delivered within the channel's bound: one polling period for the
    /// CRL, one routing round trip for DHT events, and for the flood the
    /// time to cross the hop diameter over the slowest link.
    pub within_bound: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RevocationOutcome {
    pub revoked_nodes: Vec<NodeId>,
    pub learned: BTreeMap<NodeId, Learned>,
    /// Live members (other than the revoked ones) that never heard.
    pub uninformed: Vec<NodeId>,
    pub broadcast_diameter: usize,
    pub broadcast_bound: Duration,
    pub dht_notifications: usize,
}

impl RevocationOutcome {
    pub fn all_within_bound(&self) -> bool {
        self.uninformed.is_empty() && self.learned.values().all(|l| l.within_bound)
    }
}

/// Deterministic polling phase for a member, in `[0, period)`.
fn poll_phase(id: NodeId, period: Duration) -> Duration {
    let b = id.to_be_bytes();
    let x = u64::from_be_bytes(b[12..20].try_into().unwrap());
    Duration::from_nanos(x % period.as_nanos().max(1) as u64)
}

/// Revoke `user` at the server and deliver the news to every private
/// overlay member over the enabled channels. `server_node` is the public
/// overlay node the server sends DHT notifications from; `origin` is the
/// member that starts the flood.
#[allow(clippy::too_many_arguments)]
pub fn revoke_and_propagate(
    server: &mut GroupServer,
    public: &Overlay,
    public_dht: &Dht,
    private: &mut PrivateOverlay,
    server_node: NodeId,
    origin: NodeId,
    user: &str,
    cfg: &RevocationConfig,
) -> Result<RevocationOutcome, GroupError> {
    let group = private.group.clone();
    server.set_time(private.overlay.now());
    let revoked_nodes = server.revoke(&group, user)?;
    let revoked: BTreeSet<NodeId> = revoked_nodes.iter().copied().collect();
    let t0 = private.overlay.now();
    let audience: Vec<NodeId> =
        private.overlay.live_ids().filter(|id| !revoked.contains(id) && private.member(*id).is_some()).collect();

    #[derive(PartialEq)]
    struct Notice(NodeId, RevocationChannel, Option<usize>);
    let mut sim: Simulator<Notice> = Simulator::new();
    let mut outcome = RevocationOutcome { revoked_nodes, ..Default::default() };

    if cfg.crl {
        for m in &audience {
            // Next poll strictly after the revocation.
            let phase = poll_phase(*m, cfg.crl_poll).as_nanos() as u64;
            let period = cfg.crl_poll.as_nanos() as u64;
            let now = t0.as_nanos();
            let k = if now >= phase { (now - phase) / period + 1 } else { 0 };
            let at = SimTime::from_nanos(phase + k * period);
            sim.schedule_at(at, Target::Node(*m), Notice(*m, RevocationChannel::Crl, None));
        }
    }
    if cfg.dht_event {
        let subscribers: Vec<NodeId> = public_dht
            .get(public, server_node, &dht::revoke_key(user))
            .map_err(|e| GroupError::Malformed(e.to_string()))?
            .iter()
            .filter_map(|v| dht::decode_node_id(v))
            .collect();
        server.note_subscribers(&group, user, subscribers.clone());
        if !cfg.dht_suppressed {
            for s in subscribers {
                if let Ok(trace) = public.route_to(server_node, s) {
                    if trace.delivered_at() == s {
                        let d = millis_f64(public.path_latency_ms(&trace.path));
                        sim.schedule_at(t0 + d, Target::Node(s), Notice(s, RevocationChannel::DhtEvent, None));
                        outcome.dht_notifications += 1;
                    }
                }
            }
        }
    }
    if cfg.broadcast && private.overlay.is_live(origin) {
        server.note_broadcast(&group, user);
        outcome.broadcast_diameter = hop_diameter(&private.overlay);
        outcome.broadcast_bound =
            millis_f64(outcome.broadcast_diameter as f64 * max_link_delay_ms(&private.overlay));
        let report = broadcast_with(&private.overlay, origin, &revoked);
        for (n, r) in report.received {
            sim.schedule_at(t0 + r.after, Target::Node(n), Notice(n, RevocationChannel::Broadcast, Some(r.hops)));
        }
    }

    let flood_bound = outcome.broadcast_bound;
    let round_trip_bound = |s: NodeId| {
        public
            .route_to(server_node, s)
            .map(|t| 2.0 * public.path_latency_ms(&t.path))
            .map(millis_f64)
            .unwrap_or(Duration::ZERO)
    };
    while let Some(ev) = sim.step() {
        let Notice(m, channel, hops) = ev.payload;
        if revoked.contains(&m) || outcome.learned.contains_key(&m) || private.member(m).is_none() {
            continue;
        }
        let after = ev.fire_at.saturating_sub(t0);
        let within_bound = match channel {
            RevocationChannel::Crl => after <= cfg.crl_poll,
            RevocationChannel::DhtEvent => after <= round_trip_bound(m),
            RevocationChannel::Broadcast => after <= flood_bound,
        };
        outcome.learned.insert(m, Learned { after, channel, hops, within_bound });
        private.learn_revocation(m, user);
    }
    outcome.uninformed = audience.into_iter().filter(|m| !outcome.learned.contains_key(m)).collect();
    Ok(outcome)
}
