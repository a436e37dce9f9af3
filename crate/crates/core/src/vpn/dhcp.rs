//! Address allocation and resolution over the DHT.
//!
//! A claim is a multi-value write of the claimant's id under the address
//! key followed by a read-back. If more than one id is present the lowest
//! keeps the address and the others withdraw and try elsewhere.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::time::Duration;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::VpnError;
use crate::dht::{self, Dht};
use crate::overlay::{NodeId, Overlay};
use crate::time::SimTime;
use crate::transport::Cidr;

pub const LEASE_TTL: Duration = Duration::from_secs(10 * 60);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IpMapping {
    pub ip: Ipv4Addr,
    pub owner: NodeId,
    pub lease_expires: SimTime,
}

/// Unexpired claimants for `ip`, lowest first.
pub fn claimants(dht: &Dht, ov: &Overlay, via: NodeId, ip: Ipv4Addr) -> Result<Vec<NodeId>, VpnError> {
    let mut ids: Vec<NodeId> =
        dht.get(ov, via, &dht::ip_key(ip))?.iter().filter_map(|v| dht::decode_node_id(v)).collect();
    ids.sort();
    Ok(ids)
}

/// Owner of `ip`: the lowest unexpired claimant.
pub fn resolve(dht: &Dht, ov: &Overlay, via: NodeId, ip: Ipv4Addr) -> Result<NodeId, VpnError> {
    claimants(dht, ov, via, ip)?.first().copied().ok_or(VpnError::NotFound(ip))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DhcpPhase {
    /// Pick an untried candidate and check that nobody holds it.
    Choose,
    /// Write our claim.
    Claim(Ipv4Addr),
    /// Read back and apply the lowest-id rule.
    Verify(Ipv4Addr),
    Bound { ip: Ipv4Addr, renew_at: SimTime },
}

/// Two or more claims seen on one address at read-back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conflict {
    pub ip: Ipv4Addr,
    pub claimants: Vec<NodeId>,
    pub observer: NodeId,
    pub observer_kept: bool,
}

#[derive(Clone, Debug)]
pub struct DhcpClient {
    pub node: NodeId,
    pub subnet: Cidr,
    pub lease_ttl: Duration,
    phase: DhcpPhase,
    tried: BTreeSet<Ipv4Addr>,
    first_choice: Option<Ipv4Addr>,
    rng: ChaCha8Rng,
}

impl DhcpClient {
    pub fn new(node: NodeId, subnet: Cidr, seed: u64) -> Self {
        let mut s = [0u8; 32];
        s[..20].copy_from_slice(&node.to_be_bytes());
        s[24..].copy_from_slice(&seed.to_be_bytes());
        DhcpClient {
            node,
            subnet,
            lease_ttl: LEASE_TTL,
            phase: DhcpPhase::Choose,
            tried: BTreeSet::new(),
            first_choice: None,
            rng: ChaCha8Rng::from_seed(s),
        }
    }

    /// Force the first candidate, to set up collisions.
    pub fn with_first_choice(mut self, ip: Ipv4Addr) -> Self {
        self.first_choice = Some(ip);
        self
    }

    pub fn phase(&self) -> DhcpPhase {
        self.phase
    }

    pub fn lease(&self) -> Option<Ipv4Addr> {
        match self.phase {
            DhcpPhase::Bound { ip, .. } => Some(ip),
            _ => None,
        }
    }

    fn next_candidate(&mut self) -> Result<Ipv4Addr, VpnError> {
        if let Some(ip) = self.first_choice.take() {
            if self.subnet.contains(ip) && !self.tried.contains(&ip) {
                self.tried.insert(ip);
                return Ok(ip);
            }
        }
        let tried = &self.tried;
        let ip = self.subnet.hosts().filter(|ip| !tried.contains(ip)).choose(&mut self.rng);
        let ip = ip.ok_or(VpnError::SubnetExhausted(self.subnet))?;
        self.tried.insert(ip);
        Ok(ip)
    }

    /// Advance one phase. Returns a conflict when read-back found more than
    /// one claimant.
    pub fn step(&mut self, dht: &mut Dht, ov: &Overlay) -> Result<Option<Conflict>, VpnError> {
        let me = self.node;
        match self.phase {
            DhcpPhase::Choose => {
                let ip = self.next_candidate()?;
                let held = claimants(dht, ov, me, ip)?;
                if held.iter().all(|c| *c == me) {
                    self.phase = DhcpPhase::Claim(ip);
                }
                Ok(None)
            }
            DhcpPhase::Claim(ip) => {
                dht.put(ov, me, &dht::ip_key(ip), &dht::encode_node_id(me), self.lease_ttl)?;
                self.phase = DhcpPhase::Verify(ip);
                Ok(None)
            }
            DhcpPhase::Verify(ip) => {
                let held = claimants(dht, ov, me, ip)?;
                let kept = held.first() == Some(&me);
                let conflict = (held.len() > 1)
                    .then(|| Conflict { ip, claimants: held.clone(), observer: me, observer_kept: kept });
                if kept {
                    self.phase = DhcpPhase::Bound { ip, renew_at: ov.now() + self.lease_ttl / 2 };
                } else {
                    dht.remove(ov, me, &dht::ip_key(ip), &dht::encode_node_id(me))?;
                    self.phase = DhcpPhase::Choose;
                }
                Ok(conflict)
            }
            DhcpPhase::Bound { .. } => Ok(None),
        }
    }

    /// Re-put the claim once half the lease has passed. Returns whether a
    /// renewal was written.
    pub fn renew_if_due(&mut self, dht: &mut Dht, ov: &Overlay) -> Result<bool, VpnError> {
        let DhcpPhase::Bound { ip, renew_at } = self.phase else { return Ok(false) };
        if ov.now() < renew_at {
            return Ok(false);
        }
        dht.put(ov, self.node, &dht::ip_key(ip), &dht::encode_node_id(self.node), self.lease_ttl)?;
        self.phase = DhcpPhase::Bound { ip, renew_at: ov.now() + self.lease_ttl / 2 };
        Ok(true)
    }

    pub fn mapping(&self, now: SimTime) -> Option<IpMapping> {
        match self.phase {
            DhcpPhase::Bound { ip, renew_at } => {
                let expires = renew_at + self.lease_ttl / 2;
                (now < expires).then_some(IpMapping { ip, owner: self.node, lease_expires: expires })
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AllocationReport {
    pub rounds: usize,
    pub conflicts: Vec<Conflict>,
    pub failures: Vec<(NodeId, VpnError)>,
}

/// Run every client in lockstep: in each round all clients still
/// choosing act first, then all claimants write, then all read back.
/// Clients that write in the same round collide on the same tick.
pub fn allocate_lockstep(
    clients: &mut [DhcpClient],
    dht: &mut Dht,
    ov: &Overlay,
    max_rounds: usize,
) -> AllocationReport {
    let mut report = AllocationReport::default();
    let mut failed: BTreeSet<NodeId> = BTreeSet::new();
    while report.rounds < max_rounds {
        let pending = clients.iter().any(|c| c.lease().is_none() && !failed.contains(&c.node));
        if !pending {
            break;
        }
        report.rounds += 1;
        for pick in [0, 1, 2] {
            for c in clients.iter_mut() {
                if failed.contains(&c.node) {
                    continue;
                }
                let active = matches!(
                    (pick, c.phase()),
                    (0, DhcpPhase::Choose) | (1, DhcpPhase::Claim(_)) | (2, DhcpPhase::Verify(_))
                );
                if !active {
                    continue;
                }
                match c.step(dht, ov) {
                    Ok(Some(conflict)) => report.conflicts.push(conflict),
                    Ok(None) => {}
                    Err(e) => {
                        failed.insert(c.node);
                        report.failures.push((c.node, e));
                    }
                }
            }
        }
    }
    report
}

/// Allocate one address for `node` with no competing claimants in flight.
pub fn allocate_address(
    dht: &mut Dht,
    ov: &Overlay,
    node: NodeId,
    subnet: Cidr,
    seed: u64,
) -> Result<(Ipv4Addr, DhcpClient), VpnError> {
    let mut c = DhcpClient::new(node, subnet, seed);
    let limit = 3 * subnet.host_count() + 3;
    for _ in 0..limit {
        if let Some(ip) = c.lease() {
            return Ok((ip, c));
        }
        c.step(dht, ov)?;
    }
    c.lease().map(|ip| (ip, c)).ok_or(VpnError::SubnetExhausted(subnet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::world::stable_overlay;

    fn ring(n: usize, seed: u64) -> (Overlay, Vec<NodeId>) {
        stable_overlay(n, seed)
    }

    fn net24() -> Cidr {
        "10.20.0.0/24".parse().unwrap()
    }

    #[test]
    fn first_node_gets_an_address_and_resolves_to_itself() {
        let (ov, ids) = ring(8, 1);
        let mut dht = Dht::new();
        let (ip, _) = allocate_address(&mut dht, &ov, ids[0], net24(), 1).unwrap();
        assert!(net24().contains(ip));
        assert_eq!(resolve(&dht, &ov, ids[0], ip).unwrap(), ids[0]);
        assert_eq!(resolve(&dht, &ov, ids[5], ip).unwrap(), ids[0]);
        assert!(matches!(
            resolve(&dht, &ov, ids[5], Ipv4Addr::new(10, 20, 0, 0)),
            Err(VpnError::NotFound(_))
        ));
    }

    #[test]
    fn same_tick_collision_lower_id_keeps_it() {
        let (ov, ids) = ring(8, 2);
        let mut dht = Dht::new();
        let target = Ipv4Addr::new(10, 20, 0, 7);
        let (lo, hi) = (ids[2].min(ids[3]), ids[2].max(ids[3]));
        let mut clients = vec![
            DhcpClient::new(hi, net24(), 1).with_first_choice(target),
            DhcpClient::new(lo, net24(), 1).with_first_choice(target),
        ];
        let report = allocate_lockstep(&mut clients, &mut dht, &ov, 50);
        assert!(report.failures.is_empty());
        assert!(!report.conflicts.is_empty());
        assert!(report.conflicts.iter().all(|c| c.claimants == vec![lo, hi] && c.observer_kept == (c.observer == lo)));
        assert_eq!(clients[1].lease(), Some(target));
        let other = clients[0].lease().unwrap();
        assert_ne!(other, target);
        assert_eq!(resolve(&dht, &ov, ids[0], target).unwrap(), lo);
        assert_eq!(resolve(&dht, &ov, ids[0], other).unwrap(), hi);
    }

    #[test]
    fn tiny_subnet_exhausts() {
        let (ov, ids) = ring(6, 3);
        let mut dht = Dht::new();
        let net: Cidr = "10.30.0.0/30".parse().unwrap();
        let mut clients: Vec<DhcpClient> = ids[..3].iter().map(|id| DhcpClient::new(*id, net, 4)).collect();
        let report = allocate_lockstep(&mut clients, &mut dht, &ov, 50);
        let leased: BTreeSet<Ipv4Addr> = clients.iter().filter_map(|c| c.lease()).collect();
        assert_eq!(leased.len(), 2);
        assert_eq!(report.failures.len(), 1);
        assert!(matches!(report.failures[0].1, VpnError::SubnetExhausted(_)));
    }

    #[test]
    fn lapsed_lease_can_be_claimed_again() {
        let (mut ov, ids) = ring(8, 4);
        let mut dht = Dht::new();
        let net: Cidr = "10.30.0.0/30".parse().unwrap();
        let (ip, _) = allocate_address(&mut dht, &ov, ids[0], net, 1).unwrap();
        let (ip2, _) = allocate_address(&mut dht, &ov, ids[1], net, 1).unwrap();
        assert_ne!(ip, ip2);
        assert!(matches!(allocate_address(&mut dht, &ov, ids[2], net, 1), Err(VpnError::SubnetExhausted(_))));
        ov.advance(LEASE_TTL + Duration::from_secs(1));
        let (ip3, _) = allocate_address(&mut dht, &ov, ids[2], net, 1).unwrap();
        assert!(ip3 == ip || ip3 == ip2);
    }

    #[test]
    fn renewal_keeps_the_lease_alive() {
        let (mut ov, ids) = ring(8, 5);
        let mut dht = Dht::new();
        let (ip, mut c) = allocate_address(&mut dht, &ov, ids[0], net24(), 1).unwrap();
        assert!(!c.renew_if_due(&mut dht, &ov).unwrap());
        for _ in 0..6 {
            ov.advance(LEASE_TTL / 2);
            assert!(c.renew_if_due(&mut dht, &ov).unwrap());
        }
        assert_eq!(resolve(&dht, &ov, ids[3], ip).unwrap(), ids[0]);
        assert!(c.mapping(ov.now()).is_some());
    }
}
