use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use p2pvpn::dht::key_to_address;
use p2pvpn::overlay::{new_node_id, ring_distance, select_shortcut_target, Direction, NodeId};

/// Upper-tail p-value of Pearson's statistic against equal expected counts.
fn uniform_p_value(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn top_byte(id: NodeId) -> usize {
    id.to_be_bytes()[0] as usize
}

#[test]
fn node_ids_are_deterministic_and_distinct() {
    assert_eq!(new_node_id(0), new_node_id(0));
    let ids: BTreeSet<NodeId> = (0..10_000u64).map(new_node_id).collect();
    assert_eq!(ids.len(), 10_000);
}

#[test]
fn node_id_top_byte_is_uniform() {
    let mut counts = vec![0u64; 256];
    for seed in 0..100_000u64 {
        counts[top_byte(new_node_id(seed))] += 1;
    }
    let p = uniform_p_value(&counts);
    assert!(p > 0.01, "p={p}");
}

#[test]
fn dht_key_top_byte_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(159);
    let mut counts = vec![0u64; 256];
    for _ in 0..10_000 {
        let mut raw = [0u8; 16];
        rng.fill_bytes(&mut raw);
        counts[top_byte(key_to_address(&raw))] += 1;
    }
    let p = uniform_p_value(&counts);
    assert!(p > 0.01, "p={p}");
}

#[test]
fn shortcut_log_distance_is_uniform() {
    let n = 100u64;
    let me = new_node_id(7);
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let lo = 160.0 - (n as f64).log2();
    let bins = 10;
    let mut counts = vec![0u64; bins];
    for _ in 0..10_000 {
        let t = select_shortcut_target(me, n, &mut rng);
        let l = ring_distance(me, t, Direction::Right).log2();
        assert!((lo - 1e-6..160.0).contains(&l), "{l}");
        let b = (((l - lo) / (160.0 - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    let p = uniform_p_value(&counts);
    assert!(p > 0.01, "p={p} {counts:?}");
}

#[test]
fn degenerate_estimate_targets_anywhere() {
    let me = new_node_id(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let halves: BTreeSet<bool> =
        (0..200).map(|_| ring_distance(me, select_shortcut_target(me, 1, &mut rng), Direction::Right).log2() < 159.0).collect();
    assert_eq!(halves.len(), 2);
}
