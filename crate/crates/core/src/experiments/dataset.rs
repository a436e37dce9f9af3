//! Synthetic all-to-all latency data for runs without a measured matrix.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::transport::LatencyModel;

/// Hosts scattered over a square `span_ms` wide; RTT is the Euclidean
/// distance plus a small access delay and up to 10% multiplicative noise.
pub fn synthetic_latency(n: usize, seed: u64) -> LatencyModel {
    synthetic_latency_with(n, seed, 150.0)
}

pub fn synthetic_latency_with(n: usize, seed: u64, span_ms: f64) -> LatencyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| (rng.gen::<f64>() * span_ms, rng.gen::<f64>() * span_ms, 1.0 + rng.gen::<f64>() * 4.0))
        .collect();
    let mut rows = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (xi, yi, ai) = pts[i];
            let (xj, yj, aj) = pts[j];
            let d = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
            let rtt = (d + ai + aj) * (1.0 + 0.1 * rng.gen::<f64>());
            rows[i][j] = rtt;
            rows[j][i] = rtt;
        }
    }
    LatencyModel::from_matrix(rows).expect("square and finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_zero_diagonal_deterministic() {
        let a = synthetic_latency(30, 5);
        let b = synthetic_latency(30, 5);
        for i in 0..30 {
            assert_eq!(a.rtt(i, i), 0.0);
            for j in 0..30 {
                assert_eq!(a.rtt(i, j), a.rtt(j, i));
                assert_eq!(a.rtt(i, j), b.rtt(i, j));
                assert!(a.rtt(i, j) >= 0.0);
            }
        }
    }
}
