use std::collections::BTreeSet;

use p2pvpn::experiments::dataset::synthetic_latency;
use p2pvpn::experiments::world::{block_adjacent, build_overlay, seeded_ids, stable_overlay};
use p2pvpn::overlay::{EdgeKind, NodeId, Overlay, OverlayConfig};
use p2pvpn::relays::{proactive_connect, relay_maintenance_tick, request_relay, Link, RelayError};
use p2pvpn::transport::ConnectivityPolicy;

fn direct(ov: &Overlay, x: NodeId) -> BTreeSet<NodeId> {
    ov.table(x).unwrap().direct_peers().filter(|p| ov.is_live(*p)).collect()
}

fn blocked_ring(n: usize, seed: u64) -> Overlay {
    let ids = seeded_ids(n, seed);
    let mut policy = ConnectivityPolicy::new();
    block_adjacent(&mut policy, &ids);
    let mut ov =
        build_overlay(synthetic_latency(n, seed), policy, OverlayConfig { seed, ..OverlayConfig::default() }, &ids)
            .unwrap();
    ov.stabilize_until_steady(400).unwrap();
    ov
}

fn lat_sum(ov: &Overlay, a: NodeId, r: NodeId, b: NodeId) -> f64 {
    ov.transport.latency.rtt_between(a, r) + ov.transport.latency.rtt_between(r, b)
}

/// Unlinked pairs, split by whether they already share a direct neighbor.
fn unlinked_pairs(ov: &Overlay, ids: &[NodeId], shared: bool) -> Vec<(NodeId, NodeId)> {
    let mut out = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            if ov.table(*a).unwrap().contains(*b) {
                continue;
            }
            let common = direct(ov, *a).intersection(&direct(ov, *b)).count() > 0;
            if common == shared {
                out.push((*a, *b));
            }
        }
    }
    out
}

#[test]
fn blocked_pair_with_common_neighbor_relays_through_it() {
    let (mut ov, ids) = stable_overlay(40, 41);
    let (a, b) = unlinked_pairs(&ov, &ids, true)[0];
    let common: BTreeSet<NodeId> = direct(&ov, a).intersection(&direct(&ov, b)).copied().collect();
    ov.transport.policy.block(a, b);
    let Link::Relay(edge) = request_relay(&mut ov, a, b).unwrap() else { panic!("expected a relay") };
    let overlap: BTreeSet<NodeId> = edge.overlap.iter().copied().collect();
    assert!(overlap.is_superset(&common));
    let via = ov.route_to(a, b).unwrap();
    assert_eq!(via.path.len(), 3);
}

#[test]
fn disjoint_neighbors_are_bridged_proactively() {
    let (mut ov, ids) = stable_overlay(120, 42);
    let pairs = unlinked_pairs(&ov, &ids, false);
    assert!(!pairs.is_empty());
    let (a, b) = pairs[0];
    ov.transport.policy.block(a, b);
    let Link::Relay(edge) = request_relay(&mut ov, a, b).unwrap() else { panic!("expected a relay") };
    assert!(!edge.overlap.is_empty());
    let r = edge.overlap[0];
    assert!(direct(&ov, a).contains(&r) && direct(&ov, b).contains(&r));
}

#[test]
fn reachable_pair_gets_a_direct_edge_instead() {
    let (mut ov, ids) = stable_overlay(40, 43);
    let (a, b) = unlinked_pairs(&ov, &ids, true)[0];
    assert_eq!(request_relay(&mut ov, a, b).unwrap(), Link::Direct);
    assert!(ov.table(a).unwrap().has_direct(b));
    assert!(ov.table(a).unwrap().edge(b).unwrap().relay.is_none());
}

#[test]
fn proactive_connect_first_attempt_succeeds_when_open() {
    let (mut ov, ids) = stable_overlay(120, 44);
    let (a, b) = unlinked_pairs(&ov, &ids, false)[0];
    let rep = proactive_connect(&mut ov, a, b).unwrap();
    assert_eq!(rep.attempted.len(), 1);
    assert_eq!(rep.connected, rep.attempted);
    assert!(direct(&ov, a).intersection(&direct(&ov, b)).count() >= 1);
}

#[test]
fn proactive_connect_fails_when_every_cross_neighbor_is_blocked() {
    let (mut ov, ids) = stable_overlay(120, 45);
    let (a, b) = unlinked_pairs(&ov, &ids, false)[0];
    for n in direct(&ov, b) {
        ov.transport.policy.block(a, n);
    }
    for n in direct(&ov, a) {
        ov.transport.policy.block(b, n);
    }
    assert_eq!(proactive_connect(&mut ov, a, b), Err(RelayError::NoCandidateReachable));
}

#[test]
fn proactive_connect_skips_blocked_neighbors_in_order() {
    let (mut ov, ids) = stable_overlay(120, 46);
    let (a, b) = unlinked_pairs(&ov, &ids, false)[0];
    // Block the first half of b's neighbors against a, in table order.
    let order: Vec<NodeId> = ov
        .table(b)
        .unwrap()
        .edges()
        .filter(|(p, e)| e.is_direct() && ov.is_live(*p) && *p != a)
        .map(|(p, _)| p)
        .collect();
    let blocked = order.len() / 2;
    for n in &order[..blocked] {
        ov.transport.policy.block(a, *n);
    }
    let rep = proactive_connect(&mut ov, a, b).unwrap();
    assert_eq!(rep.attempted, order[..=blocked].to_vec());
    assert_eq!(rep.connected, vec![order[blocked]]);
}

#[test]
fn dead_active_relay_is_replaced_within_one_tick() {
    let mut ov = blocked_ring(40, 47);
    let (a, b, edge) = ov
        .live_ids()
        .flat_map(|a| ov.table(a).unwrap().relay_edges().map(move |(b, e)| (a, b, e.clone())).collect::<Vec<_>>())
        .find(|(a, b, e)| a < b && e.overlap.len() >= 2)
        .expect("a relay with a reserve");
    let dead = edge.overlap[0];
    ov.kill(dead).unwrap();
    let now = ov.table(a).unwrap().edge(b).unwrap().relay.clone().unwrap();
    assert_eq!(now.first_live(|p| ov.is_live(p)), Some(edge.overlap[1]));
    assert_eq!(ov.route_to(a, b).unwrap().delivered_at(), b);
    ov.tick();
    let after = ov.table(a).unwrap().edge(b).expect("endpoints stay linked").relay.clone().unwrap();
    assert!(!after.overlap.contains(&dead));
    assert!(ov.is_live(after.active()[0]));
    assert_eq!(ov.route_to(a, b).unwrap().delivered_at(), b);
}

#[test]
fn maintenance_without_change_is_a_no_op() {
    let mut ov = blocked_ring(32, 48);
    let snapshot = |ov: &Overlay| -> Vec<(NodeId, NodeId, Vec<NodeId>)> {
        ov.live_ids()
            .flat_map(|a| ov.table(a).unwrap().relay_edges().map(move |(b, e)| (a, b, e.overlap.clone())).collect::<Vec<_>>())
            .collect()
    };
    let before = snapshot(&ov);
    assert!(!before.is_empty());
    let ids: Vec<NodeId> = ov.live_ids().collect();
    for id in ids {
        relay_maintenance_tick(&mut ov, id);
    }
    assert_eq!(snapshot(&ov), before);
}

#[test]
fn faster_newcomer_to_the_overlap_is_promoted() {
    let mut ov = blocked_ring(48, 49);
    let ids: Vec<NodeId> = ov.live_ids().collect();
    let edges: Vec<(NodeId, NodeId, NodeId)> = ids
        .iter()
        .flat_map(|a| ov.table(*a).unwrap().relay_edges().map(move |(b, e)| (*a, b, e.active()[0])).collect::<Vec<_>>())
        .filter(|(a, b, _)| a < b)
        .collect();
    for (a, b, active) in edges {
        let best = lat_sum(&ov, a, active, b);
        let faster = ids
            .iter()
            .copied()
            .filter(|c| *c != a && *c != b && ov.transport.can_connect(a, *c) && ov.transport.can_connect(b, *c))
            .filter(|c| !(direct(&ov, a).contains(c) && direct(&ov, b).contains(c)))
            .filter(|c| lat_sum(&ov, a, *c, b) < best)
            .min_by(|x, y| lat_sum(&ov, a, *x, b).partial_cmp(&lat_sum(&ov, a, *y, b)).unwrap());
        let Some(c) = faster else { continue };
        assert!(ov.connect_direct(a, c, EdgeKind::Overlap));
        assert!(ov.connect_direct(b, c, EdgeKind::Overlap));
        relay_maintenance_tick(&mut ov, a);
        let e = ov.table(a).unwrap().edge(b).unwrap().relay.clone().unwrap();
        assert_eq!(e.active()[0], c);
        return;
    }
    panic!("no relay edge had a faster outsider to add");
}
