//! How much a two-hop relay through a nearby peer saves over greedy
//! overlay routing, compared against the direct link.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::world::{build_overlay, seeded_ids};
use crate::overlay::{NodeId, Overlay, OverlayConfig};
use crate::relays::RelayPolicy;
use crate::transport::{ConnectivityPolicy, LatencyModel};

/// Which endpoint's closest peer relays the pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RelaySide {
    #[default]
    Source,
    Destination,
}

impl std::str::FromStr for RelaySide {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" | "src" => Ok(RelaySide::Source),
            "destination" | "dst" => Ok(RelaySide::Destination),
            _ => Err(format!("relay side must be source or destination, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset_path: Option<PathBuf>,
    pub sizes: Vec<usize>,
    pub trials_per_size: usize,
    pub seed: u64,
    pub relay_policy: RelayPolicy,
    pub relay_side: RelaySide,
    pub jitter_ms: f64,
    pub output_path: Option<PathBuf>,
    /// Stabilization rounds allowed before a trial gives up on steady state.
    pub max_ticks: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_path: None,
            sizes: vec![25, 50, 100, 200, 400],
            trials_per_size: 20,
            seed: 1,
            relay_policy: RelayPolicy::Latency,
            relay_side: RelaySide::Source,
            jitter_ms: 0.0,
            output_path: None,
            max_ticks: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BenchError {
    #[error("dataset has {have} hosts, size {want} requested")]
    DatasetTooSmall { have: usize, want: usize },
    #[error("trials must be at least 1")]
    NoTrials,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub size: usize,
    pub trial: usize,
    /// Pairs whose greedy route takes two or more overlay hops.
    pub pairs: usize,
    pub avg_overlay_ms: Option<f64>,
    pub avg_relay_ms: Option<f64>,
    pub avg_direct_ms: Option<f64>,
    /// `100 * (overlay - relay) / overlay`.
    pub improvement_pct: Option<f64>,
    /// `100 * (overlay / relay - 1)`.
    pub improvement_ratio_pct: Option<f64>,
    /// Ticks to steady state, `None` if the budget ran out.
    pub steady_after: Option<usize>,
}

impl TrialRow {
    /// Direct is no slower than relay, and relay no slower than overlay.
    pub fn ordered(&self) -> bool {
        match (self.avg_direct_ms, self.avg_relay_ms, self.avg_overlay_ms) {
            (Some(d), Some(r), Some(o)) => d <= r && r <= o,
            _ => true,
        }
    }
}

pub const CSV_HEADER: &str =
    "size,trial,pairs,avg_overlay_ms,avg_relay_ms,avg_direct_ms,improvement_pct,improvement_ratio_pct";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn to_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.size,
            r.trial,
            r.pairs,
            cell(r.avg_overlay_ms),
            cell(r.avg_relay_ms),
            cell(r.avg_direct_ms),
            cell(r.improvement_pct),
            cell(r.improvement_ratio_pct)
        );
    }
    out
}

/// Peer of `node` with the lowest round-trip time, ties to the lower id.
pub fn closest_peer(ov: &Overlay, node: NodeId) -> Option<NodeId> {
    pivot_peer(ov, node, RelayPolicy::Latency)
}

/// The peer of `node` that relays under `policy`: the closest, the
/// longest-held, or simply the lowest id.
pub fn pivot_peer(ov: &Overlay, node: NodeId, policy: RelayPolicy) -> Option<NodeId> {
    let lat = &ov.transport.latency;
    let table = ov.table(node)?;
    let peers = table.edges().filter(|(p, e)| ov.is_live(*p) && e.is_direct());
    match policy {
        RelayPolicy::Latency => peers
            .map(|(p, _)| p)
            .min_by(|a, b| lat.rtt_between(node, *a).total_cmp(&lat.rtt_between(node, *b)).then(a.cmp(b))),
        RelayPolicy::Stability => peers.min_by_key(|(p, e)| (e.meta.created_at, *p)).map(|(p, _)| p),
        RelayPolicy::All => peers.map(|(p, _)| p).min(),
    }
}

/// Measure one stabilized overlay.
pub fn measure(ov: &Overlay, side: RelaySide, policy: RelayPolicy) -> (usize, Option<f64>, Option<f64>, Option<f64>) {
    let lat = &ov.transport.latency;
    let ids: Vec<NodeId> = ov.live_ids().collect();
    let (mut n, mut sum_o, mut sum_r, mut sum_d) = (0usize, 0.0, 0.0, 0.0);
    for s in &ids {
        for d in &ids {
            if s == d {
                continue;
            }
            let Ok(trace) = ov.route_to(*s, *d) else { continue };
            if trace.delivered_at() != *d || trace.hop_count() < 2 {
                continue;
            }
            let pivot = match side {
                RelaySide::Source => pivot_peer(ov, *s, policy),
                RelaySide::Destination => pivot_peer(ov, *d, policy),
            };
            let Some(r) = pivot else { continue };
            let relay = if r == *d || r == *s {
                lat.one_way_ms(*s, *d)
            } else {
                lat.one_way_ms(*s, r) + lat.one_way_ms(r, *d)
            };
            n += 1;
            sum_o += ov.path_latency_ms(&trace.path);
            sum_r += relay;
            sum_d += lat.one_way_ms(*s, *d);
        }
    }
    if n == 0 {
        return (0, None, None, None);
    }
    let k = n as f64;
    (n, Some(sum_o / k), Some(sum_r / k), Some(sum_d / k))
}

fn trial_seed(seed: u64, size: usize, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((size as u64) << 32) ^ trial as u64
}

pub fn run_trial(latency: &LatencyModel, cfg: &ExperimentConfig, size: usize, trial: usize) -> TrialRow {
    let seed = trial_seed(cfg.seed, size, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = latency.sample_rows(size, &mut rng);
    let sub = latency.submatrix(&rows);
    let ids = seeded_ids(size, seed);
    let config = OverlayConfig { relay_policy: cfg.relay_policy, seed, ..OverlayConfig::default() };
    let mut ov = build_overlay(sub, ConnectivityPolicy::new(), config, &ids).expect("seeded ids are distinct");
    if cfg.jitter_ms > 0.0 {
        ov.transport = ov.transport.clone().with_jitter(cfg.jitter_ms, seed);
    }
    let steady_after = ov.stabilize_until_steady(cfg.max_ticks);
    let (pairs, o, r, d) = measure(&ov, cfg.relay_side, cfg.relay_policy);
    let improvement_pct = o.zip(r).map(|(o, r)| 100.0 * (o - r) / o);
    let improvement_ratio_pct = o.zip(r).map(|(o, r)| 100.0 * (o / r - 1.0));
    TrialRow {
        size,
        trial,
        pairs,
        avg_overlay_ms: o,
        avg_relay_ms: r,
        avg_direct_ms: d,
        improvement_pct,
        improvement_ratio_pct,
        steady_after,
    }
}

/// Every (size, trial) in parallel; rows come back sorted by size then
/// trial.
pub fn relay_benchmark(latency: &LatencyModel, cfg: &ExperimentConfig) -> Result<Vec<TrialRow>, BenchError> {
    if cfg.trials_per_size == 0 {
        return Err(BenchError::NoTrials);
    }
    if let Some(&want) = cfg.sizes.iter().find(|s| **s > latency.len()) {
        return Err(BenchError::DatasetTooSmall { have: latency.len(), want });
    }
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let jobs: Vec<(usize, usize)> =
        sizes.iter().flat_map(|s| (0..cfg.trials_per_size).map(move |t| (*s, t))).collect();
    let mut rows: Vec<TrialRow> = jobs.par_iter().map(|(s, t)| run_trial(latency, cfg, *s, *t)).collect();
    rows.sort_by_key(|r| (r.size, r.trial));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeSummary {
    pub size: usize,
    pub trials: usize,
    pub median_improvement_pct: Option<f64>,
    pub median_improvement_ratio_pct: Option<f64>,
    pub mean_improvement_pct: Option<f64>,
    pub mean_improvement_ratio_pct: Option<f64>,
    /// Trials with at least ten pairs that break direct <= relay <= overlay.
    pub order_violations: usize,
    /// Trials with at least ten pairs where direct exceeds relay.
    pub direct_over_relay: usize,
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(rows: &[TrialRow]) -> Vec<SizeSummary> {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.size).collect();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|size| {
            let these: Vec<&TrialRow> = rows.iter().filter(|r| r.size == size).collect();
            let mut pct: Vec<f64> = these.iter().filter_map(|r| r.improvement_pct).collect();
            let mut ratio: Vec<f64> = these.iter().filter_map(|r| r.improvement_ratio_pct).collect();
            let eligible = these.iter().filter(|r| r.pairs >= 10);
            SizeSummary {
                size,
                trials: these.len(),
                mean_improvement_pct: mean(&pct),
                mean_improvement_ratio_pct: mean(&ratio),
                median_improvement_pct: median(&mut pct),
                median_improvement_ratio_pct: median(&mut ratio),
                order_violations: eligible.clone().filter(|r| !r.ordered()).count(),
                direct_over_relay: eligible
                    .filter(|r| matches!((r.avg_direct_ms, r.avg_relay_ms), (Some(d), Some(x)) if d > x))
                    .count(),
            }
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            r[*k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation, ties given their average rank. `None` when
/// either side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Rank correlation between size and median improvement; sizes without
/// eligible pairs count as no improvement.
pub fn size_trend(summary: &[SizeSummary], ratio: bool) -> Option<f64> {
    let x: Vec<f64> = summary.iter().map(|s| s.size as f64).collect();
    let y: Vec<f64> = summary
        .iter()
        .map(|s| if ratio { s.median_improvement_ratio_pct } else { s.median_improvement_pct }.unwrap_or(0.0))
        .collect();
    spearman(&x, &y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::dataset::synthetic_latency;

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        // Textbook case: d^2 sum = 2 over five points, rho = 1 - 6*2/(5*24) = 0.9.
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((rho - 0.9).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn too_large_size_is_rejected() {
        let lat = synthetic_latency(30, 1);
        let cfg = ExperimentConfig { sizes: vec![25, 40], ..Default::default() };
        assert_eq!(relay_benchmark(&lat, &cfg), Err(BenchError::DatasetTooSmall { have: 30, want: 40 }));
    }

    #[test]
    fn small_overlays_have_no_multi_hop_pairs() {
        let lat = synthetic_latency(40, 2);
        let cfg = ExperimentConfig { sizes: vec![16], trials_per_size: 3, ..Default::default() };
        for r in relay_benchmark(&lat, &cfg).unwrap() {
            assert_eq!(r.pairs, 0);
            assert_eq!(r.avg_overlay_ms, None);
        }
        let csv = to_csv(&relay_benchmark(&lat, &cfg).unwrap());
        assert!(csv.lines().nth(1).unwrap().ends_with(",0,,,,,"));
    }

    #[test]
    fn measured_pairs_match_brute_force() {
        let lat = synthetic_latency(60, 3);
        let cfg = ExperimentConfig { sizes: vec![60], trials_per_size: 1, ..Default::default() };
        let row = run_trial(&lat, &cfg, 60, 0);
        // Rebuild the same overlay and recount the pairs by hand.
        let seed = trial_seed(cfg.seed, 60, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = lat.submatrix(&lat.sample_rows(60, &mut rng));
        let ids = seeded_ids(60, seed);
        let config = OverlayConfig { seed, ..OverlayConfig::default() };
        let mut ov = build_overlay(sub, ConnectivityPolicy::new(), config, &ids).unwrap();
        ov.stabilize_until_steady(cfg.max_ticks);
        let mut pairs = 0;
        let mut direct = 0.0;
        for s in &ids {
            for d in &ids {
                if s != d && ov.route_to(*s, *d).unwrap().hop_count() >= 2 {
                    pairs += 1;
                    direct += ov.transport.latency.rtt_between(*s, *d) / 2.0;
                }
            }
        }
        assert_eq!(row.pairs, pairs);
        assert!(pairs > 0);
        assert!((row.avg_direct_ms.unwrap() - direct / pairs as f64).abs() < 1e-9);
    }

    #[test]
    fn benchmark_is_deterministic() {
        let lat = synthetic_latency(80, 4);
        let cfg = ExperimentConfig { sizes: vec![50, 80], trials_per_size: 3, ..Default::default() };
        let a = to_csv(&relay_benchmark(&lat, &cfg).unwrap());
        let b = to_csv(&relay_benchmark(&lat, &cfg).unwrap());
        assert_eq!(a, b);
    }
}
