//! Building blocks shared by the experiments: seeded node sets joined into
//! an overlay over a latency model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::overlay::{NodeId, Overlay, OverlayConfig, OverlayError};
use crate::transport::{ConnectivityPolicy, LatencyModel, Transport};

/// `n` distinct ids drawn from `seed`.
pub fn seeded_ids(n: usize, seed: u64) -> Vec<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let id = NodeId::random(&mut rng);
        if seen.insert(id) {
            out.push(id);
        }
    }
    out
}

/// Assign `ids[i]` to latency row `i` and join them in order. The overlay
/// is not stabilized.
pub fn build_overlay(
    mut latency: LatencyModel,
    policy: ConnectivityPolicy,
    config: OverlayConfig,
    ids: &[NodeId],
) -> Result<Overlay, OverlayError> {
    assert!(ids.len() <= latency.len(), "more nodes than latency rows");
    for (row, id) in ids.iter().enumerate() {
        latency.assign(*id, row);
    }
    let mut ov = Overlay::new(config, Transport::new(latency, policy));
    ov.join_all(ids)?;
    Ok(ov)
}

/// Block every pair of ring-adjacent ids.
pub fn block_adjacent(policy: &mut ConnectivityPolicy, ids: &[NodeId]) {
    let mut sorted = ids.to_vec();
    sorted.sort();
    for i in 0..sorted.len() {
        let j = (i + 1) % sorted.len();
        if i != j {
            policy.block(sorted[i], sorted[j]);
        }
    }
}

/// Brute-force owner of `addr`: the live id with the smallest ring gap,
/// clockwise side first, then lower id.
pub fn owner_oracle(ids: &[NodeId], addr: NodeId) -> NodeId {
    *ids.iter()
        .min_by_key(|id| {
            let r = crate::overlay::ring_distance(addr, **id, crate::overlay::Direction::Right);
            let l = crate::overlay::ring_distance(addr, **id, crate::overlay::Direction::Left);
            (r.min(l), r > l, **id)
        })
        .expect("non-empty id set")
}

/// `n` seeded nodes over synthetic latency with open connectivity,
/// stabilized.
pub fn stable_overlay(n: usize, seed: u64) -> (Overlay, Vec<NodeId>) {
    let ids = seeded_ids(n, seed);
    let lat = super::dataset::synthetic_latency(n, seed);
    let mut ov = build_overlay(lat, ConnectivityPolicy::new(), OverlayConfig::default(), &ids)
        .expect("seeded ids are distinct");
    ov.stabilize_until_steady(200).expect("open ring stabilizes");
    (ov, ids)
}
