//! Deterministic network substrate: latency-driven delivery, NAT
//! reachability, the event loop, and LAN segments.

pub mod cidr;
pub mod connectivity;
pub mod lan;
pub mod latency;
pub mod sim;

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use cidr::Cidr;
pub use connectivity::{can_connect, ConnectivityPolicy, NatKind};
pub use lan::{CapturedFrame, HostId, LanSegment, MacAddr, Proto};
pub use latency::{load_latency_matrix, LatencyError, LatencyModel};
pub use sim::{SimEvent, Simulator, Target};

use crate::overlay::NodeId;
use crate::time::{millis_f64, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("no usable link between {0:?} and {1:?}")]
    NoLink(NodeId, NodeId),
}

/// Latency and reachability for overlay nodes, shared by every scenario.
#[derive(Clone, Debug)]
pub struct Transport {
    pub latency: LatencyModel,
    pub policy: ConnectivityPolicy,
    jitter_ms: f64,
    rng: ChaCha8Rng,
}

impl Transport {
    pub fn new(latency: LatencyModel, policy: ConnectivityPolicy) -> Self {
        Transport { latency, policy, jitter_ms: 0.0, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Uniform `±jitter_ms` on every link, driven by `seed`.
    pub fn with_jitter(mut self, jitter_ms: f64, seed: u64) -> Self {
        self.jitter_ms = jitter_ms.max(0.0);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn jitter_ms(&self) -> f64 {
        self.jitter_ms
    }

    pub fn can_connect(&self, a: NodeId, b: NodeId) -> bool {
        self.policy.can_connect(a, b)
    }

    /// One link's delay, `rtt / 2` plus optional jitter.
    pub fn link_delay(&mut self, a: NodeId, b: NodeId) -> Duration {
        let base = self.latency.one_way_ms(a, b);
        if self.jitter_ms == 0.0 {
            return millis_f64(base);
        }
        let j = self.rng.gen_range(-self.jitter_ms..=self.jitter_ms);
        millis_f64((base + j).max(0.0))
    }

    /// Application-level ping RTT; with jitter, the median of three probes.
    pub fn ping_ms(&mut self, a: NodeId, b: NodeId) -> f64 {
        if self.jitter_ms == 0.0 {
            return self.latency.rtt_between(a, b);
        }
        let mut probes: Vec<f64> = (0..3)
            .map(|_| {
                let there = self.link_delay(a, b).as_secs_f64() * 1e3;
                let back = self.link_delay(b, a).as_secs_f64() * 1e3;
                there + back
            })
            .collect();
        probes.sort_by(f64::total_cmp);
        probes[1]
    }

    /// Schedule a direct delivery. `size_bytes` is accepted for interface
    /// parity; bandwidth is not modeled.
    pub fn send<E: PartialEq>(
        &mut self,
        sim: &mut Simulator<E>,
        from: NodeId,
        to: NodeId,
        msg: E,
        _size_bytes: usize,
    ) -> Result<SimTime, TransportError> {
        if !self.can_connect(from, to) {
            return Err(TransportError::NoLink(from, to));
        }
        let at = sim.now() + self.link_delay(from, to);
        sim.schedule_at(at, Target::Node(to), msg);
        Ok(at)
    }

    /// Schedule a delivery along an explicit multi-link path; the delay is
    /// the sum of the per-link one-way delays. Every link must be usable.
    pub fn send_path<E: PartialEq>(
        &mut self,
        sim: &mut Simulator<E>,
        path: &[NodeId],
        msg: E,
    ) -> Result<SimTime, TransportError> {
        let delay = self.path_delay(path)?;
        let to = *path.last().expect("non-empty path");
        let at = sim.now() + delay;
        sim.schedule_at(at, Target::Node(to), msg);
        Ok(at)
    }

    pub fn path_delay(&mut self, path: &[NodeId]) -> Result<Duration, TransportError> {
        let mut total = Duration::ZERO;
        for w in path.windows(2) {
            if !self.can_connect(w[0], w[1]) {
                return Err(TransportError::NoLink(w[0], w[1]));
            }
            total += self.link_delay(w[0], w[1]);
        }
        Ok(total)
    }
}
