//! Per-node packet state machine between the VN device and the overlay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::packet::{SecurityTag, VirtualPacket};
use super::VpnError;
use crate::overlay::NodeId;
use crate::transport::Cidr;

/// Gateway liveness ping period.
pub const PING_PERIOD: Duration = Duration::from_secs(15);
/// Consecutive unanswered pings before a gateway is considered failed.
pub const MISSED_PINGS_LIMIT: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Approach {
    /// Host routes steer P2P traffic to the LAN gateway.
    One,
    /// Everything goes to the VN device, which re-emits P2P traffic itself.
    Two,
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Approach::One => "1",
            Approach::Two => "2",
        })
    }
}

impl FromStr for Approach {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(Approach::One),
            "2" => Ok(Approach::Two),
            _ => Err(format!("approach must be 1 or 2, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Split,
    FullTunnelClient(Approach),
    Gateway,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RouteVia {
    VnDevice,
    LanGateway,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RouteEntry {
    pub prefix: Cidr,
    pub via: RouteVia,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DropReason {
    /// Internet destination while split tunneling.
    SplitTunnelInternet,
    Unsecured,
    WrongGroup,
    RevokedSender,
    /// Internet source from a node that is not our gateway.
    NotFromGateway,
    /// Internet source while not a full-tunnel client.
    OutsideSubnet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outgoing {
    ToPeer { peer: NodeId, pkt: VirtualPacket },
    ToGateway { gateway: NodeId, pkt: VirtualPacket },
    /// A gateway's own Internet traffic leaves through its NAT directly.
    ToInternet(VirtualPacket),
    Dropped(DropReason),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Incoming {
    Deliver(VirtualPacket),
    Dropped(DropReason),
}

/// Address and gateway lookups, normally answered by the DHT.
pub trait Directory {
    fn resolve(&mut self, ip: Ipv4Addr) -> Result<NodeId, VpnError>;
    fn gateways(&mut self, group: &str) -> Result<Vec<NodeId>, VpnError>;
}

#[derive(Clone, Debug)]
pub struct VpnEndpointState {
    pub node: NodeId,
    pub virtual_ip: Ipv4Addr,
    pub vpn_subnet: Cidr,
    pub group: String,
    mode: Mode,
    current_gateway: Option<NodeId>,
    failed_gateways: BTreeSet<NodeId>,
    route_table: Vec<RouteEntry>,
    revoked: BTreeSet<NodeId>,
    drops: BTreeMap<DropReason, u64>,
    missed_pings: u32,
    gateway_queries: u64,
    nonce: u64,
    rng: ChaCha8Rng,
}

impl VpnEndpointState {
    pub fn new(
        node: NodeId,
        virtual_ip: Ipv4Addr,
        vpn_subnet: Cidr,
        group: &str,
        mode: Mode,
        seed: u64,
    ) -> Result<Self, VpnError> {
        if !vpn_subnet.contains(virtual_ip) {
            return Err(VpnError::OutsideSubnet(virtual_ip));
        }
        let route_table = match mode {
            Mode::FullTunnelClient(Approach::One) => {
                vec![RouteEntry { prefix: Cidr::new(Ipv4Addr::UNSPECIFIED, 0), via: RouteVia::VnDevice }]
            }
            _ => Vec::new(),
        };
        Ok(VpnEndpointState {
            node,
            virtual_ip,
            vpn_subnet,
            group: group.into(),
            mode,
            current_gateway: None,
            failed_gateways: BTreeSet::new(),
            route_table,
            revoked: BTreeSet::new(),
            drops: BTreeMap::new(),
            missed_pings: 0,
            gateway_queries: 0,
            nonce: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ u64::from(u32::from(virtual_ip))),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn current_gateway(&self) -> Option<NodeId> {
        self.current_gateway
    }

    pub fn failed_gateways(&self) -> &BTreeSet<NodeId> {
        &self.failed_gateways
    }

    pub fn route_table(&self) -> &[RouteEntry] {
        &self.route_table
    }

    /// Gateway-list lookups made so far.
    pub fn gateway_queries(&self) -> u64 {
        self.gateway_queries
    }

    pub fn drops(&self, reason: DropReason) -> u64 {
        self.drops.get(&reason).copied().unwrap_or(0)
    }

    pub fn total_drops(&self) -> u64 {
        self.drops.values().sum()
    }

    fn drop_with(&mut self, reason: DropReason) -> DropReason {
        *self.drops.entry(reason).or_default() += 1;
        reason
    }

    /// Stop accepting packets from a node certified for a revoked user.
    pub fn revoke_sender(&mut self, node: NodeId) {
        self.revoked.insert(node);
    }

    pub fn secure(&mut self, mut pkt: VirtualPacket) -> VirtualPacket {
        self.nonce += 1;
        pkt.tag = Some(SecurityTag { sender: self.node, group: self.group.clone(), nonce: self.nonce });
        pkt
    }

    /// Query the gateway list and pick uniformly among the ones not known
    /// to have failed.
    pub fn select_gateway(&mut self, dir: &mut dyn Directory) -> Result<NodeId, VpnError> {
        if !matches!(self.mode, Mode::FullTunnelClient(_)) {
            return Err(VpnError::NotAClient);
        }
        self.gateway_queries += 1;
        let listed = dir.gateways(&self.group)?;
        let usable: Vec<NodeId> =
            listed.into_iter().filter(|g| *g != self.node && !self.failed_gateways.contains(g)).collect();
        let pick = *usable.choose(&mut self.rng).ok_or(VpnError::NoGatewayAvailable)?;
        self.current_gateway = Some(pick);
        self.missed_pings = 0;
        Ok(pick)
    }

    /// Record the outcome of a liveness ping. After enough misses the
    /// gateway is marked failed and forgotten; a new one is only looked up
    /// when the next Internet packet needs it. Returns the failed gateway.
    pub fn ping_result(&mut self, answered: bool) -> Option<NodeId> {
        let gw = self.current_gateway?;
        if answered {
            self.missed_pings = 0;
            return None;
        }
        self.missed_pings += 1;
        if self.missed_pings < MISSED_PINGS_LIMIT {
            return None;
        }
        self.failed_gateways.insert(gw);
        self.current_gateway = None;
        self.missed_pings = 0;
        Some(gw)
    }

    /// A packet read from the VN device.
    pub fn handle_outgoing(&mut self, dir: &mut dyn Directory, pkt: VirtualPacket) -> Result<Outgoing, VpnError> {
        if self.vpn_subnet.contains(pkt.ip_dst) {
            let peer = dir.resolve(pkt.ip_dst)?;
            return Ok(Outgoing::ToPeer { peer, pkt: self.secure(pkt) });
        }
        match self.mode {
            Mode::Split => Ok(Outgoing::Dropped(self.drop_with(DropReason::SplitTunnelInternet))),
            Mode::Gateway => Ok(Outgoing::ToInternet(pkt)),
            Mode::FullTunnelClient(_) => {
                let gateway = match self.current_gateway {
                    Some(g) => g,
                    None => self.select_gateway(dir)?,
                };
                Ok(Outgoing::ToGateway { gateway, pkt: self.secure(pkt) })
            }
        }
    }

    /// A packet that arrived over the overlay.
    pub fn handle_incoming(&mut self, pkt: VirtualPacket) -> Incoming {
        let Some(tag) = pkt.tag.as_ref() else {
            return Incoming::Dropped(self.drop_with(DropReason::Unsecured));
        };
        if tag.group != self.group {
            return Incoming::Dropped(self.drop_with(DropReason::WrongGroup));
        }
        if self.revoked.contains(&tag.sender) {
            return Incoming::Dropped(self.drop_with(DropReason::RevokedSender));
        }
        if self.vpn_subnet.contains(pkt.ip_src) {
            return Incoming::Deliver(pkt);
        }
        match self.mode {
            Mode::FullTunnelClient(_) if Some(tag.sender) == self.current_gateway => Incoming::Deliver(pkt),
            Mode::FullTunnelClient(_) => Incoming::Dropped(self.drop_with(DropReason::NotFromGateway)),
            _ => Incoming::Dropped(self.drop_with(DropReason::OutsideSubnet)),
        }
    }

    /// Host route for a remote P2P endpoint, so overlay traffic to it
    /// leaves through the LAN rather than the tunnel.
    pub fn add_host_route(&mut self, remote_public: Ipv4Addr) -> bool {
        if self.mode != Mode::FullTunnelClient(Approach::One) {
            return false;
        }
        let prefix = Cidr::host(remote_public);
        if self.route_table.iter().any(|r| r.prefix == prefix) {
            return false;
        }
        self.route_table.push(RouteEntry { prefix, via: RouteVia::LanGateway });
        true
    }

    pub fn remove_host_route(&mut self, remote_public: Ipv4Addr) -> bool {
        let prefix = Cidr::host(remote_public);
        let before = self.route_table.len();
        self.route_table.retain(|r| !(r.prefix == prefix && r.via == RouteVia::LanGateway));
        before != self.route_table.len()
    }

    /// Drop every injected route.
    pub fn shutdown(&mut self) {
        self.route_table.retain(|r| r.via != RouteVia::LanGateway);
        self.current_gateway = None;
    }

    /// Longest-prefix match; with no table everything goes to the device.
    pub fn route_for(&self, ip: Ipv4Addr) -> RouteVia {
        self.route_table
            .iter()
            .filter(|r| r.prefix.contains(ip))
            .max_by_key(|r| r.prefix.prefix())
            .map(|r| r.via)
            .unwrap_or(RouteVia::VnDevice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(x: u64) -> NodeId {
        NodeId::from_u128(x as u128)
    }

    struct Fixed {
        ips: BTreeMap<Ipv4Addr, NodeId>,
        gateways: Vec<NodeId>,
        queries: u64,
    }

    impl Directory for Fixed {
        fn resolve(&mut self, ip: Ipv4Addr) -> Result<NodeId, VpnError> {
            self.ips.get(&ip).copied().ok_or(VpnError::NotFound(ip))
        }
        fn gateways(&mut self, _group: &str) -> Result<Vec<NodeId>, VpnError> {
            self.queries += 1;
            Ok(self.gateways.clone())
        }
    }

    fn subnet() -> Cidr {
        "10.8.0.0/24".parse().unwrap()
    }

    fn ep(mode: Mode) -> VpnEndpointState {
        VpnEndpointState::new(id(1), Ipv4Addr::new(10, 8, 0, 1), subnet(), "g", mode, 7).unwrap()
    }

    fn dir(gateways: Vec<NodeId>) -> Fixed {
        Fixed { ips: BTreeMap::from([(Ipv4Addr::new(10, 8, 0, 2), id(2))]), gateways, queries: 0 }
    }

    fn web() -> Ipv4Addr {
        Ipv4Addr::new(93, 184, 216, 34)
    }

    #[test]
    fn address_must_be_in_subnet() {
        let e = VpnEndpointState::new(id(1), Ipv4Addr::new(10, 9, 0, 1), subnet(), "g", Mode::Split, 1);
        assert!(matches!(e, Err(VpnError::OutsideSubnet(_))));
    }

    #[test]
    fn split_mode_drops_internet_traffic() {
        let mut e = ep(Mode::Split);
        let pkt = VirtualPacket::udp(e.virtual_ip, 5000, web(), 80, b"x".to_vec());
        assert_eq!(e.handle_outgoing(&mut dir(vec![]), pkt).unwrap(), Outgoing::Dropped(DropReason::SplitTunnelInternet));
        assert_eq!(e.drops(DropReason::SplitTunnelInternet), 1);
    }

    #[test]
    fn subnet_traffic_goes_to_resolved_owner_secured_and_unaltered() {
        let mut e = ep(Mode::Split);
        let pkt = VirtualPacket::udp(e.virtual_ip, 5000, Ipv4Addr::new(10, 8, 0, 2), 80, b"hello".to_vec());
        match e.handle_outgoing(&mut dir(vec![]), pkt.clone()).unwrap() {
            Outgoing::ToPeer { peer, pkt: out } => {
                assert_eq!(peer, id(2));
                assert!(out.secured());
                assert_eq!((out.ip_src, out.ip_dst, &out.payload), (pkt.ip_src, pkt.ip_dst, &pkt.payload));
            }
            other => panic!("{other:?}"),
        }
        let unknown = VirtualPacket::udp(e.virtual_ip, 1, Ipv4Addr::new(10, 8, 0, 99), 1, vec![]);
        assert!(matches!(e.handle_outgoing(&mut dir(vec![]), unknown), Err(VpnError::NotFound(_))));
    }

    #[test]
    fn full_tunnel_uses_the_only_gateway() {
        let mut e = ep(Mode::FullTunnelClient(Approach::Two));
        let pkt = VirtualPacket::udp(e.virtual_ip, 5000, web(), 80, vec![]);
        let mut d = dir(vec![id(9)]);
        match e.handle_outgoing(&mut d, pkt).unwrap() {
            Outgoing::ToGateway { gateway, pkt } => {
                assert_eq!(gateway, id(9));
                assert!(pkt.secured());
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(e.current_gateway(), Some(id(9)));
    }

    #[test]
    fn empty_gateway_list_is_an_error() {
        let mut e = ep(Mode::FullTunnelClient(Approach::Two));
        let pkt = VirtualPacket::udp(e.virtual_ip, 5000, web(), 80, vec![]);
        assert_eq!(e.handle_outgoing(&mut dir(vec![]), pkt), Err(VpnError::NoGatewayAvailable));
    }

    #[test]
    fn failed_gateway_is_replaced_on_next_internet_packet_only() {
        let mut e = ep(Mode::FullTunnelClient(Approach::Two));
        let mut d = dir(vec![id(9), id(10)]);
        let first = e.select_gateway(&mut d).unwrap();
        assert_eq!(d.queries, 1);
        assert_eq!(e.ping_result(false), None);
        assert_eq!(e.ping_result(false), Some(first));
        assert_eq!(e.current_gateway(), None);
        // No lookup until traffic needs one.
        assert_eq!(d.queries, 1);
        let pkt = VirtualPacket::udp(e.virtual_ip, 5000, web(), 80, vec![]);
        let Outgoing::ToGateway { gateway, .. } = e.handle_outgoing(&mut d, pkt).unwrap() else { panic!() };
        assert_ne!(gateway, first);
        assert_eq!(d.queries, 2);
        assert!(!e.failed_gateways().contains(&gateway));
    }

    #[test]
    fn answered_ping_resets_the_miss_count() {
        let mut e = ep(Mode::FullTunnelClient(Approach::Two));
        e.select_gateway(&mut dir(vec![id(9)])).unwrap();
        assert_eq!(e.ping_result(false), None);
        assert_eq!(e.ping_result(true), None);
        assert_eq!(e.ping_result(false), None);
        assert_eq!(e.current_gateway(), Some(id(9)));
    }

    #[test]
    fn gateway_selection_is_roughly_uniform() {
        let gws: Vec<NodeId> = (10..14).map(id).collect();
        let mut counts = BTreeMap::new();
        for seed in 0..2000 {
            let mut e = VpnEndpointState::new(
                id(1),
                Ipv4Addr::new(10, 8, 0, 1),
                subnet(),
                "g",
                Mode::FullTunnelClient(Approach::Two),
                seed,
            )
            .unwrap();
            *counts.entry(e.select_gateway(&mut dir(gws.clone())).unwrap()).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 4);
        for c in counts.values() {
            assert!((400..600).contains(c), "{counts:?}");
        }
    }

    #[test]
    fn incoming_rules() {
        let mut e = ep(Mode::FullTunnelClient(Approach::Two));
        e.select_gateway(&mut dir(vec![id(9)])).unwrap();
        let from_web = VirtualPacket::udp(web(), 80, e.virtual_ip, 5000, vec![]);
        assert_eq!(e.handle_incoming(from_web.clone()), Incoming::Dropped(DropReason::Unsecured));

        let tagged = |sender: u64, group: &str, p: &VirtualPacket| {
            let mut p = p.clone();
            p.tag = Some(SecurityTag { sender: id(sender), group: group.into(), nonce: 1 });
            p
        };
        assert_eq!(e.handle_incoming(tagged(5, "g", &from_web)), Incoming::Dropped(DropReason::NotFromGateway));
        assert_eq!(e.drops(DropReason::NotFromGateway), 1);
        assert!(matches!(e.handle_incoming(tagged(9, "g", &from_web)), Incoming::Deliver(_)));
        assert_eq!(e.handle_incoming(tagged(9, "other", &from_web)), Incoming::Dropped(DropReason::WrongGroup));

        let from_peer = VirtualPacket::udp(Ipv4Addr::new(10, 8, 0, 2), 1, e.virtual_ip, 2, vec![]);
        assert!(matches!(e.handle_incoming(tagged(2, "g", &from_peer)), Incoming::Deliver(_)));
        e.revoke_sender(id(2));
        assert_eq!(e.handle_incoming(tagged(2, "g", &from_peer)), Incoming::Dropped(DropReason::RevokedSender));
    }

    #[test]
    fn split_endpoint_rejects_internet_sources() {
        let mut e = ep(Mode::Split);
        let mut p = VirtualPacket::udp(web(), 80, e.virtual_ip, 5000, vec![]);
        p.tag = Some(SecurityTag { sender: id(2), group: "g".into(), nonce: 1 });
        assert_eq!(e.handle_incoming(p), Incoming::Dropped(DropReason::OutsideSubnet));
    }

    #[test]
    fn host_routes_follow_link_lifecycle() {
        let mut e = ep(Mode::FullTunnelClient(Approach::One));
        let peer = Ipv4Addr::new(198, 51, 100, 7);
        assert_eq!(e.route_for(peer), RouteVia::VnDevice);
        assert!(e.add_host_route(peer));
        assert!(!e.add_host_route(peer));
        assert_eq!(e.route_table().len(), 2);
        assert_eq!(e.route_for(peer), RouteVia::LanGateway);
        assert_eq!(e.route_for(web()), RouteVia::VnDevice);
        assert!(e.remove_host_route(peer));
        e.add_host_route(peer);
        e.add_host_route(web());
        e.shutdown();
        assert_eq!(e.route_table().len(), 1);
        assert_eq!(e.route_for(web()), RouteVia::VnDevice);

        let mut two = ep(Mode::FullTunnelClient(Approach::Two));
        assert!(!two.add_host_route(peer));
        assert!(two.route_table().is_empty());
    }
}
