//! Endpoints, gateways and the overlay wired together, with a trivial
//! Internet that echoes whatever reaches it.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use super::dhcp::{self, DhcpClient};
use super::endpoint::{Incoming, Mode, Outgoing, VpnEndpointState};
use super::gateway::{self, GatewayNat, GATEWAY_TTL};
use super::packet::VirtualPacket;
use super::shortcut::{path_hops, ShortcutOutcome, ShortcutTracker};
use super::{DhtDirectory, DropReason, VpnError};
use crate::dht::Dht;
use crate::overlay::{NodeId, Overlay};
use crate::time::SimTime;
use crate::transport::Cidr;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Delivery {
    /// Written to the destination's VN device.
    Peer { to: NodeId, hops: usize, shortcut: Option<ShortcutOutcome> },
    /// The Internet host answered and the reply reached a VN device.
    Internet { gateway: NodeId, reply_to: NodeId, reply: VirtualPacket },
    Dropped { at: NodeId, reason: DropReason },
    /// Sent towards a node that is gone or unreachable.
    Lost { towards: NodeId },
}

/// What the echo host sends back.
pub fn echo_payload(request: &[u8]) -> Vec<u8> {
    let mut p = b"re:".to_vec();
    p.extend_from_slice(request);
    p
}

pub struct VpnNetwork {
    pub overlay: Overlay,
    pub dht: Dht,
    pub subnet: Cidr,
    pub group: String,
    pub shortcuts: ShortcutTracker,
    endpoints: BTreeMap<NodeId, VpnEndpointState>,
    leases: BTreeMap<NodeId, DhcpClient>,
    nats: BTreeMap<NodeId, GatewayNat>,
    gateway_refresh: BTreeMap<NodeId, SimTime>,
    vn_rx: BTreeMap<NodeId, Vec<VirtualPacket>>,
    seed: u64,
}

impl VpnNetwork {
    pub fn new(overlay: Overlay, subnet: Cidr, group: &str, seed: u64) -> Self {
        VpnNetwork {
            overlay,
            dht: Dht::new(),
            subnet,
            group: group.into(),
            shortcuts: ShortcutTracker::default(),
            endpoints: BTreeMap::new(),
            leases: BTreeMap::new(),
            nats: BTreeMap::new(),
            gateway_refresh: BTreeMap::new(),
            vn_rx: BTreeMap::new(),
            seed,
        }
    }

    /// Allocate an address for `node` and start its endpoint.
    pub fn add_endpoint(&mut self, node: NodeId, mode: Mode) -> Result<Ipv4Addr, VpnError> {
        let (ip, lease) = dhcp::allocate_address(&mut self.dht, &self.overlay, node, self.subnet, self.seed)?;
        let ep = VpnEndpointState::new(node, ip, self.subnet, &self.group, mode, self.seed)?;
        self.endpoints.insert(node, ep);
        self.leases.insert(node, lease);
        Ok(ip)
    }

    /// Start a gateway endpoint and list it in the DHT.
    pub fn add_gateway(&mut self, node: NodeId, public_ip: Ipv4Addr) -> Result<Ipv4Addr, VpnError> {
        let ip = self.add_endpoint(node, Mode::Gateway)?;
        gateway::register_gateway(&mut self.dht, &self.overlay, node, &self.group)?;
        self.nats.insert(node, GatewayNat::new(node, public_ip, &self.group));
        self.gateway_refresh.insert(node, self.overlay.now() + GATEWAY_TTL / 2);
        Ok(ip)
    }

    pub fn endpoint(&self, node: NodeId) -> Option<&VpnEndpointState> {
        self.endpoints.get(&node)
    }

    pub fn endpoint_mut(&mut self, node: NodeId) -> Option<&mut VpnEndpointState> {
        self.endpoints.get_mut(&node)
    }

    pub fn nat(&self, node: NodeId) -> Option<&GatewayNat> {
        self.nats.get(&node)
    }

    /// Everything written to `node`'s VN device so far.
    pub fn received(&self, node: NodeId) -> &[VirtualPacket] {
        self.vn_rx.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Renew leases and gateway listings that are due, for live nodes.
    pub fn maintain(&mut self) -> Result<(), VpnError> {
        let now = self.overlay.now();
        for (node, lease) in self.leases.iter_mut() {
            if self.overlay.is_live(*node) {
                lease.renew_if_due(&mut self.dht, &self.overlay)?;
            }
        }
        for (node, due) in self.gateway_refresh.iter_mut() {
            if self.overlay.is_live(*node) && now >= *due {
                gateway::register_gateway(&mut self.dht, &self.overlay, *node, &self.group)?;
                *due = now + GATEWAY_TTL / 2;
            }
        }
        Ok(())
    }

    /// One liveness ping from every full-tunnel client to its gateway.
    /// Returns `(client, gateway)` for each gateway newly declared failed.
    pub fn ping_gateways(&mut self) -> Vec<(NodeId, NodeId)> {
        let mut failed = Vec::new();
        for (node, ep) in self.endpoints.iter_mut() {
            if !self.overlay.is_live(*node) {
                continue;
            }
            let Some(gw) = ep.current_gateway() else { continue };
            let answered = self.overlay.is_live(gw) && path_hops(&self.overlay, *node, gw).is_ok();
            if let Some(g) = ep.ping_result(answered) {
                failed.push((*node, g));
            }
        }
        failed
    }

    /// Carry a secured packet across the overlay and hand it to the
    /// receiving endpoint.
    fn carry(&mut self, from: NodeId, to: NodeId, pkt: VirtualPacket) -> Delivery {
        if !self.overlay.is_live(to) {
            return Delivery::Lost { towards: to };
        }
        let Ok(hops) = path_hops(&self.overlay, from, to) else {
            return Delivery::Lost { towards: to };
        };
        let Some(ep) = self.endpoints.get_mut(&to) else {
            return Delivery::Lost { towards: to };
        };
        match ep.handle_incoming(pkt) {
            Incoming::Deliver(p) => {
                self.vn_rx.entry(to).or_default().push(p);
                let shortcut = self.shortcuts.observe(&mut self.overlay, from, to, hops);
                Delivery::Peer { to, hops, shortcut }
            }
            Incoming::Dropped(reason) => Delivery::Dropped { at: to, reason },
        }
    }

    /// Hand `pkt` to `src`'s VN device and follow it to wherever it ends.
    pub fn send(&mut self, src: NodeId, pkt: VirtualPacket) -> Result<Delivery, VpnError> {
        if !self.overlay.is_live(src) {
            return Err(VpnError::UnknownEndpoint(src));
        }
        let ep = self.endpoints.get_mut(&src).ok_or(VpnError::UnknownEndpoint(src))?;
        let mut dir = DhtDirectory { ov: &self.overlay, dht: &self.dht, via: src };
        match ep.handle_outgoing(&mut dir, pkt)? {
            Outgoing::Dropped(reason) => Ok(Delivery::Dropped { at: src, reason }),
            Outgoing::ToPeer { peer, pkt } => Ok(self.carry(src, peer, pkt)),
            Outgoing::ToInternet(pkt) => {
                let reply = pkt.reply(echo_payload(&pkt.payload));
                self.vn_rx.entry(src).or_default().push(reply.clone());
                Ok(Delivery::Internet { gateway: src, reply_to: src, reply })
            }
            Outgoing::ToGateway { gateway, pkt } => {
                if !self.overlay.is_live(gateway) || path_hops(&self.overlay, src, gateway).is_err() {
                    return Ok(Delivery::Lost { towards: gateway });
                }
                let Some(nat) = self.nats.get_mut(&gateway) else {
                    return Ok(Delivery::Lost { towards: gateway });
                };
                let Ok(out) = nat.outbound(&pkt) else {
                    return Ok(Delivery::Dropped { at: gateway, reason: DropReason::WrongGroup });
                };
                let answer = out.reply(echo_payload(&out.payload));
                let Some((member, back)) = nat.inbound(&answer) else {
                    return Ok(Delivery::Lost { towards: gateway });
                };
                let back = self.endpoints.get_mut(&gateway).expect("gateway has an endpoint").secure(back);
                match self.carry(gateway, member, back) {
                    Delivery::Peer { to, .. } => {
                        let reply = self.vn_rx[&to].last().cloned().expect("just delivered");
                        Ok(Delivery::Internet { gateway, reply_to: to, reply })
                    }
                    other => Ok(other),
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FailoverReport {
    pub client: Option<NodeId>,
    pub killed: Option<NodeId>,
    pub replacement: Option<NodeId>,
    pub killed_at: Duration,
    pub detected_at: Option<Duration>,
    /// Gateway-list lookups after the kill, with their times.
    pub requeries: Vec<Duration>,
    /// First Internet packet sent after the failure was detected.
    pub first_send_after_detection: Option<Duration>,
    pub sent: u64,
    pub replies: u64,
    pub lost: u64,
    pub misdelivered: u64,
    pub replies_via_replacement: u64,
}

impl FailoverReport {
    /// One lookup, made by the first packet after detection, and the flow
    /// carried on through another gateway without a stray reply.
    pub fn passes(&self) -> bool {
        self.requeries.len() == 1
            && self.first_send_after_detection == self.requeries.first().copied()
            && self.replacement.is_some()
            && self.replacement != self.killed
            && self.replies_via_replacement > 0
            && self.misdelivered == 0
    }
}

/// A full-tunnel client streams one packet a second to an Internet host
/// through one of two gateways; the gateway it uses is killed mid-flow.
pub fn gateway_failover(overlay: Overlay, ids: &[NodeId], seed: u64) -> Result<FailoverReport, VpnError> {
    assert!(ids.len() >= 6, "need a client, two gateways and bystanders");
    let subnet: Cidr = "10.50.0.0/24".parse().expect("literal");
    let web = Ipv4Addr::new(93, 184, 216, 34);
    let mut net = VpnNetwork::new(overlay, subnet, "corp", seed);
    // One maintenance round per simulated second.
    net.overlay.config.tick_interval = Duration::from_secs(1);
    let client = ids[0];
    net.add_gateway(ids[1], Ipv4Addr::new(203, 0, 113, 1))?;
    net.add_gateway(ids[2], Ipv4Addr::new(203, 0, 113, 2))?;
    let client_ip = net.add_endpoint(client, Mode::FullTunnelClient(super::Approach::Two))?;
    for id in &ids[3..6] {
        net.add_endpoint(*id, Mode::Split)?;
    }

    let mut report = FailoverReport { client: Some(client), ..Default::default() };
    let start = net.overlay.now();
    let kill_after = Duration::from_secs(60);
    let total = Duration::from_secs(180);
    let mut queries_seen = 0;
    let mut t = Duration::ZERO;
    while t <= total {
        let now = net.overlay.now().saturating_sub(start);
        if report.killed.is_none() && now >= kill_after {
            if let Some(gw) = net.endpoint(client).and_then(|e| e.current_gateway()) {
                net.overlay.kill(gw).map_err(|_| VpnError::UnknownEndpoint(gw))?;
                report.killed = Some(gw);
                report.killed_at = now;
                queries_seen = net.endpoint(client).map_or(0, |e| e.gateway_queries());
            }
        }
        if t.as_secs().is_multiple_of(15) && t > Duration::ZERO {
            for (c, g) in net.ping_gateways() {
                if c == client && Some(g) == report.killed && report.detected_at.is_none() {
                    report.detected_at = Some(now);
                }
            }
        }

        let seq = report.sent;
        let pkt = VirtualPacket::udp(client_ip, 40001, web, 443, seq.to_be_bytes().to_vec());
        report.sent += 1;
        if report.detected_at.is_some() && report.first_send_after_detection.is_none() {
            report.first_send_after_detection = Some(now);
        }
        let out = net.send(client, pkt)?;
        if report.killed.is_some() {
            let q = net.endpoint(client).map_or(0, |e| e.gateway_queries());
            for _ in queries_seen..q {
                report.requeries.push(now);
            }
            queries_seen = q;
        }
        match out {
            Delivery::Internet { gateway, reply_to, reply } => {
                report.replies += 1;
                let ok = reply_to == client
                    && reply.ip_src == web
                    && reply.ip_dst == client_ip
                    && reply.dst_port == 40001
                    && reply.payload == echo_payload(&seq.to_be_bytes());
                if !ok {
                    report.misdelivered += 1;
                }
                if report.killed.is_some() && Some(gateway) != report.killed {
                    report.replacement = Some(gateway);
                    report.replies_via_replacement += 1;
                }
            }
            Delivery::Lost { .. } => report.lost += 1,
            Delivery::Peer { .. } | Delivery::Dropped { .. } => report.misdelivered += 1,
        }

        net.overlay.tick();
        if t.as_secs().is_multiple_of(10) {
            net.dht.rehome_all(&net.overlay);
        }
        net.maintain()?;
        t += Duration::from_secs(1);
    }
    Ok(report)
}
