//! Ring consistency over time while nodes arrive and depart.

use std::fmt::Write as _;
use std::time::Duration;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::crawl::{crawl_all, node_congruence};
use super::dataset::synthetic_latency;
use super::world::{build_overlay, seeded_ids};
use crate::overlay::{NodeId, OverlayConfig};
use crate::transport::ConnectivityPolicy;

#[derive(Clone, Debug)]
pub struct ChurnConfig {
    pub initial_size: usize,
    /// New nodes per simulated minute.
    pub arrival_rate: f64,
    /// Fraction of live nodes leaving per simulated minute.
    pub departure_rate: f64,
    pub duration: Duration,
    /// Departing nodes say goodbye to their neighbors.
    pub graceful: bool,
    /// Rounds after churn stops in which the ring must settle.
    pub convergence_ticks: usize,
    pub seed: u64,
}

impl Default for ChurnConfig {
    fn default() -> Self {
        ChurnConfig {
            initial_size: 200,
            arrival_rate: 0.0,
            departure_rate: 0.1,
            duration: Duration::from_secs(5 * 60),
            graceful: true,
            convergence_ticks: 60,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChurnSample {
    pub time_s: f64,
    pub live: usize,
    pub visited: usize,
    pub inconsistent: usize,
    /// Share of all live nodes with no congruence problem, in percent.
    pub consistency_pct: f64,
    pub churning: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ChurnReport {
    pub samples: Vec<ChurnSample>,
    pub arrivals: usize,
    pub departures: usize,
    /// Rounds after churn stopped until two consecutive clean crawls.
    pub converged_after: Option<usize>,
}

impl ChurnReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("time_s,live,visited,inconsistent,consistency_pct,churning\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:.1},{},{},{},{:.2},{}",
                s.time_s, s.live, s.visited, s.inconsistent, s.consistency_pct, s.churning
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChurnError {
    #[error("rates must be finite and non-negative")]
    BadRate,
    #[error("need at least one initial node")]
    Empty,
}

/// Run the overlay to steady state, churn it for `duration`, then keep
/// ticking until it settles or the convergence window closes. One sample
/// per maintenance round, taken before that round's repairs.
pub fn churn_scenario(cfg: &ChurnConfig) -> Result<ChurnReport, ChurnError> {
    let rates_ok = [cfg.arrival_rate, cfg.departure_rate].iter().all(|r| r.is_finite() && *r >= 0.0);
    if !rates_ok {
        return Err(ChurnError::BadRate);
    }
    if cfg.initial_size == 0 {
        return Err(ChurnError::Empty);
    }
    let overlay_cfg = OverlayConfig { seed: cfg.seed, ..OverlayConfig::default() };
    let tick = overlay_cfg.tick_interval;
    let churn_ticks = (cfg.duration.as_secs_f64() / tick.as_secs_f64()).ceil() as usize;
    let per_tick_min = tick.as_secs_f64() / 60.0;
    let max_arrivals = (cfg.arrival_rate * per_tick_min * churn_ticks as f64).ceil() as usize + 1;

    let pool = seeded_ids(cfg.initial_size + max_arrivals, cfg.seed);
    let latency = synthetic_latency(pool.len(), cfg.seed);
    let mut ov = build_overlay(latency, ConnectivityPolicy::new(), overlay_cfg, &pool[..cfg.initial_size])
        .expect("seeded ids are distinct");
    for (row, id) in pool.iter().enumerate().skip(cfg.initial_size) {
        ov.transport.latency.assign(*id, row);
    }
    ov.stabilize_until_steady(200);
    let start = ov.now();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc4u64);
    let mut report = ChurnReport::default();
    let mut next_new = cfg.initial_size;
    let (mut arrive_acc, mut depart_acc) = (0.0, 0.0);

    let sample = |ov: &crate::overlay::Overlay, churning: bool| {
        let c = crawl_all(ov);
        let live = ov.len();
        let clean = ov.live_ids().filter(|id| node_congruence(ov, *id).is_empty()).count();
        ChurnSample {
            time_s: ov.now().saturating_sub(start).as_secs_f64(),
            live,
            visited: c.visited,
            inconsistent: c.inconsistent.len() + usize::from(c.stalled_at.is_some()),
            consistency_pct: if live == 0 { 100.0 } else { 100.0 * clean as f64 / live as f64 },
            churning,
        }
    };
    report.samples.push(sample(&ov, false));

    for _ in 0..churn_ticks {
        arrive_acc += cfg.arrival_rate * per_tick_min;
        depart_acc += cfg.departure_rate * per_tick_min * ov.len() as f64;
        while depart_acc >= 1.0 && ov.len() > 1 {
            depart_acc -= 1.0;
            let victim = ov.live_ids().choose(&mut rng).expect("non-empty");
            let _ = ov.leave(victim, cfg.graceful);
            report.departures += 1;
        }
        while arrive_acc >= 1.0 && next_new < pool.len() {
            arrive_acc -= 1.0;
            let boot: Vec<NodeId> = ov.live_ids().choose_multiple(&mut rng, 2);
            if ov.join(pool[next_new], &boot).is_ok() {
                report.arrivals += 1;
            }
            next_new += 1;
        }
        // Sample before repair so the damage from this round shows.
        report.samples.push(sample(&ov, true));
        ov.tick();
    }

    let mut streak = 0;
    for i in 0..cfg.convergence_ticks {
        let s = sample(&ov, false);
        let clean = s.inconsistent == 0 && s.visited == s.live;
        report.samples.push(s);
        streak = if clean { streak + 1 } else { 0 };
        if streak >= 2 {
            report.converged_after = Some(i + 1);
            break;
        }
        ov.tick();
    }
    Ok(report)
}
