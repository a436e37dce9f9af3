use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::time::Duration;

use proptest::prelude::*;

use p2pvpn::dht::{self, Dht};
use p2pvpn::experiments::crawl::crawl_all;
use p2pvpn::experiments::world::{owner_oracle, stable_overlay};
use p2pvpn::overlay::{ring_distance, Direction, NodeId, U160};
use p2pvpn::transport::Cidr;
use p2pvpn::vpn::dhcp::{allocate_lockstep, resolve, DhcpClient};
use p2pvpn::vpn::packet::{SecurityTag, VirtualPacket};
use p2pvpn::vpn::{GatewayNat, VpnError};

fn id() -> impl Strategy<Value = NodeId> {
    any::<[u8; 20]>().prop_map(NodeId::from_be_bytes)
}

proptest! {
    #[test]
    fn right_and_left_distances_mirror(a in id(), b in id()) {
        prop_assert_eq!(ring_distance(a, b, Direction::Right), ring_distance(b, a, Direction::Left));
        let around = ring_distance(a, b, Direction::Right).wrapping_add(ring_distance(a, b, Direction::Left));
        prop_assert_eq!(around, U160::ZERO);
    }

    #[test]
    fn key_address_is_a_pure_function(raw in proptest::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(dht::key_to_address(&raw), dht::key_to_address(&raw.clone()));
    }

    #[test]
    fn cidr_hosts_are_inside_and_counted(a in any::<u32>(), prefix in 20u8..=32) {
        let c = Cidr::new(Ipv4Addr::from(a), prefix);
        let hosts: Vec<Ipv4Addr> = c.hosts().collect();
        prop_assert_eq!(hosts.len(), c.host_count());
        prop_assert!(hosts.iter().all(|h| c.contains(*h)));
    }

    #[test]
    fn nat_returns_each_reply_to_its_member(
        flows in proptest::collection::vec((any::<u8>(), 1024u16..2048, any::<u32>(), 1u16..1024), 1..20)
    ) {
        let gw = Ipv4Addr::new(203, 0, 113, 1);
        let mut nat = GatewayNat::new(NodeId::from_u128(1), gw, "g");
        let mut sent = Vec::new();
        for (m, sport, remote, dport) in &flows {
            let member = NodeId::from_u128(100 + *m as u128);
            let src = Ipv4Addr::new(10, 0, 0, *m);
            let mut p = VirtualPacket::udp(src, *sport, Ipv4Addr::from(*remote), *dport, b"x".to_vec());
            p.tag = Some(SecurityTag { sender: member, group: "g".into(), nonce: 0 });
            let out = nat.outbound(&p).unwrap();
            prop_assert_eq!(out.ip_src, gw);
            prop_assert!(out.tag.is_none());
            sent.push((member, p, out));
        }
        for (member, orig, out) in sent {
            let (to, back) = nat.inbound(&out.reply(b"y".to_vec())).unwrap();
            prop_assert_eq!(to, member);
            prop_assert_eq!(back.ip_dst, orig.ip_src);
            prop_assert_eq!(back.dst_port, orig.src_port);
            prop_assert_eq!(back.ip_src, orig.ip_dst);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn greedy_delivery_matches_owner(n in 1usize..48, seed in any::<u64>(), addrs in proptest::collection::vec(id(), 8)) {
        let (ov, ids) = stable_overlay(n, seed);
        for a in addrs {
            let want = owner_oracle(&ids, a);
            for s in ids.iter().take(4) {
                prop_assert_eq!(ov.route_to(*s, a).unwrap().delivered_at(), want);
            }
        }
    }

    #[test]
    fn read_your_writes(n in 1usize..40, seed in any::<u64>(), key in proptest::collection::vec(any::<u8>(), 1..16), who in any::<usize>()) {
        let (ov, ids) = stable_overlay(n, seed);
        let mut store = Dht::new();
        let via = ids[who % n];
        store.put(&ov, via, &key, b"v", Duration::from_secs(60)).unwrap();
        prop_assert_eq!(store.get(&ov, via, &key).unwrap(), vec![b"v".to_vec()]);
        // Any other node sees it too.
        prop_assert_eq!(store.get(&ov, ids[(who + 1) % n], &key).unwrap(), vec![b"v".to_vec()]);
    }

    #[test]
    fn leases_are_distinct(n in 2usize..14, seed in any::<u64>(), shared in any::<bool>()) {
        let (ov, ids) = stable_overlay(n, seed);
        let subnet: Cidr = "10.7.0.0/28".parse().unwrap();
        let mut clients: Vec<DhcpClient> = ids
            .iter()
            .map(|id| {
                let c = DhcpClient::new(*id, subnet, seed);
                if shared { c.with_first_choice(Ipv4Addr::new(10, 7, 0, 1)) } else { c }
            })
            .collect();
        let mut store = Dht::new();
        let rep = allocate_lockstep(&mut clients, &mut store, &ov, 200);
        prop_assert!(rep.failures.is_empty());
        let leases: BTreeSet<Ipv4Addr> = clients.iter().map(|c| c.lease().unwrap()).collect();
        prop_assert_eq!(leases.len(), n);
        for (c, id) in clients.iter().zip(&ids) {
            prop_assert_eq!(resolve(&store, &ov, ids[0], c.lease().unwrap()).unwrap(), *id);
        }
    }

    #[test]
    fn ring_heals_after_random_crashes(n in 8usize..60, seed in any::<u64>(), k in 1usize..4) {
        let (mut ov, ids) = stable_overlay(n, seed);
        for id in ids.iter().step_by(n / k) {
            ov.kill(*id).unwrap();
        }
        let live = ov.len();
        let mut ok = false;
        for _ in 0..60 {
            ov.tick();
            let c = crawl_all(&ov);
            if c.is_consistent() && c.visited == live {
                ok = true;
                break;
            }
        }
        prop_assert!(ok);
        for l in ov.live_ids() {
            prop_assert!(ov.table(l).unwrap().check_invariants(ov.now()).is_ok());
        }
    }
}

#[test]
fn unallocated_address_is_not_found() {
    let (ov, ids) = stable_overlay(6, 1);
    let ip = Ipv4Addr::new(10, 7, 0, 9);
    assert!(matches!(resolve(&Dht::new(), &ov, ids[0], ip), Err(VpnError::NotFound(x)) if x == ip));
}

#[test]
fn address_allocated_on_one_node_resolves_from_another() {
    let (ov, ids) = stable_overlay(2, 2);
    let mut store = Dht::new();
    let (ip, _) = p2pvpn::vpn::dhcp::allocate_address(&mut store, &ov, ids[0], "10.7.0.0/24".parse().unwrap(), 2).unwrap();
    assert_eq!(resolve(&store, &ov, ids[1], ip).unwrap(), ids[0]);
}
