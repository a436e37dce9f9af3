//! Multi-value DHT stored on the ring owner of each key and its right
//! successors.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::overlay::{NodeId, Overlay, RingAddress, RouteError};
use crate::time::SimTime;

pub const DEFAULT_REPLICAS: usize = 2;
pub const DEFAULT_TTL: Duration = Duration::from_secs(60 * 60);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DhtError {
    #[error("owner unreachable: {0}")]
    TtlExceeded(RouteError),
    #[error("unknown or departed node {0:?}")]
    UnknownNode(NodeId),
    #[error("ttl must be positive")]
    ZeroTtl,
}

impl From<RouteError> for DhtError {
    fn from(e: RouteError) -> Self {
        match e {
            RouteError::UnknownNode(n) => DhtError::UnknownNode(n),
            other => DhtError::TtlExceeded(other),
        }
    }
}

/// First 160 bits of SHA-256 over the raw key.
pub fn key_to_address(raw: &[u8]) -> RingAddress {
    let digest = Sha256::digest(raw);
    let mut b = [0u8; 20];
    b.copy_from_slice(&digest[..20]);
    NodeId::from_be_bytes(b)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DhtKey {
    pub raw: Vec<u8>,
    pub address: RingAddress,
}

impl DhtKey {
    pub fn new(raw: impl Into<Vec<u8>>) -> Self {
        let raw = raw.into();
        let address = key_to_address(&raw);
        DhtKey { raw, address }
    }
}

pub fn ip_key(ip: Ipv4Addr) -> Vec<u8> {
    format!("ipop:ip:{ip}").into_bytes()
}

pub fn gateways_key(group: &str) -> Vec<u8> {
    format!("ipop:gateways:{group}").into_bytes()
}

pub fn private_key(group: &str) -> Vec<u8> {
    format!("private:{group}").into_bytes()
}

pub fn revoke_key(user: &str) -> Vec<u8> {
    format!("ipop:revoke:{user}").into_bytes()
}

pub fn encode_node_id(id: NodeId) -> Vec<u8> {
    id.to_be_bytes().to_vec()
}

pub fn decode_node_id(v: &[u8]) -> Option<NodeId> {
    let b: [u8; 20] = v.try_into().ok()?;
    Some(NodeId::from_be_bytes(b))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DhtRecord {
    pub key: DhtKey,
    /// value bytes → expiry
    pub values: BTreeMap<Vec<u8>, SimTime>,
}

impl DhtRecord {
    fn new(key: DhtKey) -> Self {
        DhtRecord { key, values: BTreeMap::new() }
    }

    pub fn live_values(&self, now: SimTime) -> impl Iterator<Item = &Vec<u8>> + '_ {
        self.values.iter().filter(move |(_, exp)| **exp > now).map(|(v, _)| v)
    }

    fn merge(&mut self, other: &DhtRecord) -> bool {
        let mut changed = false;
        for (v, exp) in &other.values {
            let e = self.values.entry(v.clone()).or_insert(SimTime::ZERO);
            if *exp > *e {
                *e = *exp;
                changed = true;
            }
        }
        changed
    }

    fn expire(&mut self, now: SimTime) {
        self.values.retain(|_, exp| *exp > now);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PutAck {
    pub owner: NodeId,
    pub replicas: Vec<NodeId>,
    /// One-way routing delay from the writer to the owner.
    pub latency: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct Dht {
    stores: BTreeMap<NodeId, BTreeMap<Vec<u8>, DhtRecord>>,
    replicas: usize,
    movements: u64,
}

impl Dht {
    pub fn new() -> Self {
        Dht::with_replicas(DEFAULT_REPLICAS)
    }

    pub fn with_replicas(replicas: usize) -> Self {
        Dht { stores: BTreeMap::new(), replicas, movements: 0 }
    }

    /// Records copied or moved by rehoming since creation.
    pub fn movements(&self) -> u64 {
        self.movements
    }

    /// Owner plus up to `replicas` of its live right neighbors.
    pub fn replica_set(&self, ov: &Overlay, owner: NodeId) -> Vec<NodeId> {
        let mut out = vec![owner];
        if let Some(t) = ov.table(owner) {
            for p in t.right_neighbors() {
                if out.len() > self.replicas {
                    break;
                }
                if ov.is_live(*p) && !out.contains(p) {
                    out.push(*p);
                }
            }
        }
        out
    }

    fn locate(&self, ov: &Overlay, via: NodeId, addr: RingAddress) -> Result<(NodeId, Duration), DhtError> {
        let trace = ov.route_to(via, addr)?;
        let ms = ov.path_latency_ms(&trace.path);
        Ok((trace.delivered_at(), crate::time::millis_f64(ms)))
    }

    pub fn put(
        &mut self,
        ov: &Overlay,
        via: NodeId,
        key: &[u8],
        value: &[u8],
        ttl: Duration,
    ) -> Result<PutAck, DhtError> {
        if ttl.is_zero() {
            return Err(DhtError::ZeroTtl);
        }
        let key = DhtKey::new(key);
        let (owner, latency) = self.locate(ov, via, key.address)?;
        let replicas = self.replica_set(ov, owner);
        let expires = ov.now() + ttl;
        for n in &replicas {
            let rec = self
                .stores
                .entry(*n)
                .or_default()
                .entry(key.raw.clone())
                .or_insert_with(|| DhtRecord::new(key.clone()));
            rec.values.insert(value.to_vec(), expires);
        }
        Ok(PutAck { owner, replicas, latency })
    }

    /// Unexpired values across the owner's replica set, sorted by bytes.
    pub fn get(&self, ov: &Overlay, via: NodeId, key: &[u8]) -> Result<Vec<Vec<u8>>, DhtError> {
        let addr = key_to_address(key);
        let (owner, _) = self.locate(ov, via, addr)?;
        let now = ov.now();
        let mut out = BTreeSet::new();
        for n in self.replica_set(ov, owner) {
            if let Some(rec) = self.stores.get(&n).and_then(|s| s.get(key)) {
                out.extend(rec.live_values(now).cloned());
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Withdraw one value from the replica set.
    pub fn remove(&mut self, ov: &Overlay, via: NodeId, key: &[u8], value: &[u8]) -> Result<bool, DhtError> {
        let addr = key_to_address(key);
        let (owner, _) = self.locate(ov, via, addr)?;
        let mut removed = false;
        for n in self.replica_set(ov, owner) {
            if let Some(rec) = self.stores.get_mut(&n).and_then(|s| s.get_mut(key)) {
                removed |= rec.values.remove(value).is_some();
            }
        }
        Ok(removed)
    }

    /// Move or copy `node`'s records so each sits on its current replica
    /// set, and drop copies `node` no longer should hold.
    pub fn rehome_tick(&mut self, ov: &Overlay, node: NodeId) {
        if !ov.is_live(node) {
            self.stores.remove(&node);
            return;
        }
        let now = ov.now();
        let Some(store) = self.stores.get_mut(&node) else { return };
        for rec in store.values_mut() {
            rec.expire(now);
        }
        store.retain(|_, r| !r.values.is_empty());
        let records: Vec<DhtRecord> = store.values().cloned().collect();
        for rec in records {
            let Ok(trace) = ov.route_to(node, rec.key.address) else { continue };
            let set = self.replica_set(ov, trace.delivered_at());
            for target in &set {
                if *target == node {
                    continue;
                }
                let dst = self
                    .stores
                    .entry(*target)
                    .or_default()
                    .entry(rec.key.raw.clone())
                    .or_insert_with(|| DhtRecord::new(rec.key.clone()));
                if dst.merge(&rec) {
                    self.movements += 1;
                }
            }
            if !set.contains(&node) {
                if let Some(s) = self.stores.get_mut(&node) {
                    s.remove(&rec.key.raw);
                }
            }
        }
    }

    /// Rehome on every live node and forget stores of departed nodes.
    pub fn rehome_all(&mut self, ov: &Overlay) {
        self.stores.retain(|n, _| ov.is_live(*n));
        let ids: Vec<NodeId> = ov.live_ids().collect();
        for id in ids {
            self.rehome_tick(ov, id);
        }
    }

    /// Nodes holding at least one unexpired value for `key`.
    pub fn holders(&self, key: &[u8], now: SimTime) -> Vec<NodeId> {
        self.stores
            .iter()
            .filter(|(_, s)| s.get(key).is_some_and(|r| r.live_values(now).next().is_some()))
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn local_record(&self, node: NodeId, key: &[u8]) -> Option<&DhtRecord> {
        self.stores.get(&node).and_then(|s| s.get(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::dataset::synthetic_latency;
    use crate::experiments::world::{build_overlay, owner_oracle, seeded_ids};
    use crate::overlay::OverlayConfig;
    use crate::transport::sim::Simulator;
    use crate::transport::ConnectivityPolicy;

    fn ring(n: usize, seed: u64) -> (Overlay, Vec<NodeId>) {
        let ids = seeded_ids(n, seed);
        let mut ov =
            build_overlay(synthetic_latency(n, seed), ConnectivityPolicy::new(), OverlayConfig::default(), &ids)
                .unwrap();
        ov.stabilize_until_steady(100).expect("steady");
        (ov, ids)
    }

    #[test]
    fn address_is_truncated_sha256() {
        // SHA-256("abc") = ba7816bf 8f01cfea 414140de 5dae2223 b00361a3 96177a9c ...
        let a = key_to_address(b"abc");
        assert_eq!(a.to_hex(), "ba7816bf8f01cfea414140de5dae2223b00361a3");
        assert_eq!(key_to_address(b"private:groupA"), key_to_address(b"private:groupA"));
        assert_ne!(key_to_address(b"private:groupA"), key_to_address(b"private:groupB"));
    }

    #[test]
    fn key_formats() {
        assert_eq!(ip_key(Ipv4Addr::new(10, 0, 0, 7)), b"ipop:ip:10.0.0.7");
        assert_eq!(gateways_key("g"), b"ipop:gateways:g");
        assert_eq!(private_key("lab"), b"private:lab");
        assert_eq!(revoke_key("alice"), b"ipop:revoke:alice");
        let id = NodeId::from_seed(3);
        assert_eq!(decode_node_id(&encode_node_id(id)), Some(id));
    }

    #[test]
    fn put_get_multi_value_and_expiry() {
        let (mut ov, ids) = ring(30, 1);
        let mut dht = Dht::new();
        assert!(dht.get(&ov, ids[0], b"absent").unwrap().is_empty());
        dht.put(&ov, ids[0], b"k", b"v1", DEFAULT_TTL).unwrap();
        dht.put(&ov, ids[5], b"k", b"v2", DEFAULT_TTL).unwrap();
        dht.put(&ov, ids[9], b"k", b"v1", DEFAULT_TTL).unwrap();
        assert_eq!(dht.get(&ov, ids[3], b"k").unwrap(), vec![b"v1".to_vec(), b"v2".to_vec()]);
        ov.advance(DEFAULT_TTL);
        assert!(dht.get(&ov, ids[0], b"k").unwrap().is_empty());
    }

    #[test]
    fn reput_refreshes_ttl() {
        let (mut ov, ids) = ring(10, 2);
        let mut dht = Dht::new();
        let ttl = Duration::from_secs(100);
        dht.put(&ov, ids[0], b"k", b"v", ttl).unwrap();
        ov.advance(Duration::from_secs(60));
        dht.put(&ov, ids[0], b"k", b"v", ttl).unwrap();
        ov.advance(Duration::from_secs(60));
        assert_eq!(dht.get(&ov, ids[1], b"k").unwrap().len(), 1);
    }

    #[test]
    fn replication_and_owner() {
        let (ov, ids) = ring(40, 3);
        let mut dht = Dht::new();
        let ack = dht.put(&ov, ids[7], b"key-x", b"v", DEFAULT_TTL).unwrap();
        assert_eq!(ack.owner, owner_oracle(&ids, key_to_address(b"key-x")));
        assert_eq!(dht.holders(b"key-x", ov.now()).len(), 3);
        // Every node agrees on the owner.
        for id in &ids {
            assert_eq!(ov.route_to(*id, key_to_address(b"key-x")).unwrap().delivered_at(), ack.owner);
        }
    }

    #[test]
    fn survives_owner_failure() {
        let (mut ov, ids) = ring(40, 4);
        let mut dht = Dht::new();
        let ack = dht.put(&ov, ids[0], b"k", b"v", DEFAULT_TTL).unwrap();
        ov.kill(ack.owner).unwrap();
        ov.stabilize_until_steady(50).unwrap();
        let via = *ids.iter().find(|i| **i != ack.owner).unwrap();
        assert_eq!(dht.get(&ov, via, b"k").unwrap(), vec![b"v".to_vec()]);
        dht.rehome_all(&ov);
        assert_eq!(dht.holders(b"k", ov.now()).len(), 3);
    }

    #[test]
    fn no_churn_no_movement() {
        let (ov, ids) = ring(25, 5);
        let mut dht = Dht::new();
        for i in 0..20u8 {
            dht.put(&ov, ids[i as usize], &[i], b"v", DEFAULT_TTL).unwrap();
        }
        dht.rehome_all(&ov);
        assert_eq!(dht.movements(), 0);
    }

    #[test]
    fn joiner_between_owner_and_successor_gets_copy() {
        let (mut ov, ids) = ring(30, 6);
        let mut dht = Dht::new();
        let key = b"migrating";
        let addr = key_to_address(key);
        let ack = dht.put(&ov, ids[0], key, b"v", DEFAULT_TTL).unwrap();
        // A newcomer placed at the key's address takes ownership.
        let newcomer = addr;
        assert!(!ids.contains(&newcomer));
        ov.transport.latency = synthetic_latency(31, 6);
        for (row, id) in ids.iter().enumerate() {
            ov.transport.latency.assign(*id, row);
        }
        ov.transport.latency.assign(newcomer, 30);
        ov.join(newcomer, &[ack.owner]).unwrap();
        let mut ticks = 0;
        while !dht.holders(key, ov.now()).contains(&newcomer) {
            ov.tick();
            dht.rehome_all(&ov);
            ticks += 1;
            assert!(ticks <= 3, "copy not moved within 3 ticks");
        }
        assert_eq!(dht.holders(key, ov.now()).len(), 3);
    }

    #[test]
    fn owner_and_replicas_lost_together() {
        let (mut ov, ids) = ring(30, 7);
        let mut dht = Dht::new();
        let ack = dht.put(&ov, ids[0], b"k", b"v", DEFAULT_TTL).unwrap();
        for n in &ack.replicas {
            ov.kill(*n).unwrap();
        }
        ov.stabilize_until_steady(50).unwrap();
        dht.rehome_all(&ov);
        let via = *ids.iter().find(|i| ov.is_live(**i)).unwrap();
        assert!(dht.get(&ov, via, b"k").unwrap().is_empty());
    }

    #[test]
    fn concurrent_puts_all_visible() {
        let (ov, ids) = ring(20, 8);
        let mut dht = Dht::new();
        let mut sim: Simulator<(NodeId, u8)> = Simulator::new();
        for (i, via) in ids[..3].iter().enumerate() {
            sim.schedule_at(SimTime::from_secs(1), crate::transport::sim::Target::Node(*via), (*via, i as u8));
        }
        sim.run_until(SimTime::from_secs(2), |_, ev| {
            let (via, v) = ev.payload;
            dht.put(&ov, via, b"shared", &[v], DEFAULT_TTL).unwrap();
        });
        assert_eq!(dht.get(&ov, ids[10], b"shared").unwrap().len(), 3);
    }

    #[test]
    fn remove_withdraws_value() {
        let (ov, ids) = ring(12, 9);
        let mut dht = Dht::new();
        dht.put(&ov, ids[0], b"k", b"a", DEFAULT_TTL).unwrap();
        dht.put(&ov, ids[0], b"k", b"b", DEFAULT_TTL).unwrap();
        assert!(dht.remove(&ov, ids[4], b"k", b"a").unwrap());
        assert_eq!(dht.get(&ov, ids[2], b"k").unwrap(), vec![b"b".to_vec()]);
    }
}
