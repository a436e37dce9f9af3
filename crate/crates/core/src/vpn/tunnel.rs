//! Full-tunnel client on a LAN, watched by a sniffer.
//!
//! The client host has one physical interface behind a LAN gateway and a
//! VN device. Its VPN application talks UDP to overlay peers and to a VPN
//! gateway at a remote site; applications on the host talk to a web
//! server. Every frame crossing the client LAN is captured.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::endpoint::{Approach, Directory, Incoming, Mode, Outgoing, RouteVia, VpnEndpointState};
use super::gateway::GatewayNat;
use super::network::echo_payload;
use super::packet::VirtualPacket;
use super::VpnError;
use crate::overlay::NodeId;
use crate::time::SimTime;
use crate::transport::{CapturedFrame, Cidr, LanSegment, MacAddr, Proto};

pub const VPN_PORT: u16 = 40000;
const APP_PORT: u16 = 51000;
const WEB_PORT: u16 = 443;

#[derive(Clone, Debug)]
pub struct TunnelConfig {
    pub approach: Approach,
    /// An attacker sends a P2P initiation spoofed from the web server.
    pub spoof_attack: bool,
    pub app_packets: usize,
    /// Transport the VPN application uses between peers.
    pub p2p_proto: Proto,
    pub seed: u64,
}

impl TunnelConfig {
    pub fn new(approach: Approach, spoof_attack: bool, seed: u64) -> Self {
        TunnelConfig { approach, spoof_attack, app_packets: 120, p2p_proto: Proto::Udp, seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InboundVerdict {
    Accept,
    /// The host stack answers with a reset and the frame goes nowhere.
    ResetAndDrop,
}

#[derive(Clone, Debug)]
pub struct TunnelReport {
    pub approach: Approach,
    pub spoof_attack: bool,
    pub frames: Vec<CapturedFrame>,
    pub app_sent: usize,
    pub app_replies: usize,
    /// Plaintext frames that are not VPN-application control traffic.
    pub plaintext_app_frames: usize,
    /// Addresses visible in cleartext control frames.
    pub exposed_endpoints: BTreeSet<Ipv4Addr>,
    /// Client-sent frames that are neither ciphertext nor correctly
    /// encapsulated control frames.
    pub nonconforming_client_frames: usize,
    pub routes_injected: usize,
}

impl TunnelReport {
    pub fn leak(&self) -> bool {
        self.plaintext_app_frames > 0
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("time_ms,src_mac,dst_mac,ip_src,ip_dst,proto,secured\n");
        for f in &self.frames {
            let _ = writeln!(
                out,
                "{:.3},{},{},{},{},{},{}",
                f.time.as_millis_f64(),
                f.src_mac,
                f.dst_mac,
                f.ip_src,
                f.ip_dst,
                f.proto,
                f.secured
            );
        }
        out
    }
}

struct StaticDirectory {
    gateways: Vec<NodeId>,
    ips: BTreeMap<Ipv4Addr, NodeId>,
}

impl Directory for StaticDirectory {
    fn resolve(&mut self, ip: Ipv4Addr) -> Result<NodeId, VpnError> {
        self.ips.get(&ip).copied().ok_or(VpnError::NotFound(ip))
    }
    fn gateways(&mut self, _group: &str) -> Result<Vec<NodeId>, VpnError> {
        Ok(self.gateways.clone())
    }
}

fn is_control(f: &CapturedFrame) -> bool {
    f.proto == Proto::Udp && (f.src_port == VPN_PORT || f.dst_port == VPN_PORT)
}

struct ClientHost {
    approach: Approach,
    phys_ip: Ipv4Addr,
    phys_mac: MacAddr,
    session_mac: MacAddr,
    lan_gw_mac: MacAddr,
    ep: VpnEndpointState,
    routes_injected: usize,
}

impl ClientHost {
    /// MAC the VPN application's traffic uses on the LAN.
    fn vpn_mac(&self) -> MacAddr {
        match self.approach {
            Approach::One => self.phys_mac,
            Approach::Two => self.session_mac,
        }
    }

    /// A packet from the VPN application to a remote P2P endpoint.
    fn emit_p2p(&mut self, remote: Ipv4Addr, secured: bool) -> Result<CapturedFrame, VpnError> {
        let frame = |src_mac| CapturedFrame {
            time: SimTime::ZERO,
            src_mac,
            dst_mac: self.lan_gw_mac,
            ip_src: self.phys_ip,
            ip_dst: remote,
            proto: Proto::Udp,
            src_port: VPN_PORT,
            dst_port: VPN_PORT,
            secured,
        };
        match self.approach {
            Approach::One => {
                // The first packet to a new endpoint installs its host route.
                if self.ep.add_host_route(remote) {
                    self.routes_injected += 1;
                }
                debug_assert_eq!(self.ep.route_for(remote), RouteVia::LanGateway);
                Ok(frame(self.phys_mac))
            }
            Approach::Two => Ok(approach2_emit(self.phys_ip, self.session_mac, self.lan_gw_mac, frame(self.phys_mac))?),
        }
    }
}

/// Re-emit a P2P packet read from the VN device onto the physical LAN:
/// source address becomes the physical interface's, the Ethernet source a
/// per-session random MAC, the Ethernet destination the LAN gateway.
pub fn approach2_emit(
    phys_ip: Ipv4Addr,
    session_mac: MacAddr,
    lan_gw_mac: MacAddr,
    mut pkt: CapturedFrame,
) -> Result<CapturedFrame, VpnError> {
    if pkt.proto != Proto::Udp {
        return Err(VpnError::UnsupportedProto(pkt.proto));
    }
    if pkt.src_port != VPN_PORT {
        return Err(VpnError::NotControl(pkt.src_port));
    }
    pkt.ip_src = phys_ip;
    pkt.src_mac = session_mac;
    pkt.dst_mac = lan_gw_mac;
    Ok(pkt)
}

/// What the host does with an inbound frame addressed to the session MAC.
pub fn approach2_inbound(frame: &CapturedFrame) -> InboundVerdict {
    match frame.proto {
        Proto::Udp if frame.dst_port == VPN_PORT => InboundVerdict::Accept,
        _ => InboundVerdict::ResetAndDrop,
    }
}

/// Run the client LAN scenario and return the sniffer capture with its
/// classification.
pub fn tunnel_demo(cfg: &TunnelConfig) -> Result<TunnelReport, VpnError> {
    if cfg.approach == Approach::Two && cfg.p2p_proto != Proto::Udp {
        return Err(VpnError::UnsupportedProto(cfg.p2p_proto));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lan_gw_mac = MacAddr([0x02, 0, 0, 0, 0, 0x01]);
    let mut lan = LanSegment::new(0, lan_gw_mac);
    lan.attach(1);

    let subnet: Cidr = "10.8.0.0/24".parse().expect("literal");
    let client_node = NodeId::from_u128(0xc1);
    let gw_node = NodeId::from_u128(0x61);
    let gw_public = Ipv4Addr::new(203, 0, 113, 5);
    let gw_virtual = Ipv4Addr::new(10, 8, 0, 1);
    let peers = [Ipv4Addr::new(198, 51, 100, 11), Ipv4Addr::new(198, 51, 100, 12), Ipv4Addr::new(198, 51, 100, 13)];
    let web = Ipv4Addr::new(93, 184, 216, 34);

    let mut client = ClientHost {
        approach: cfg.approach,
        phys_ip: Ipv4Addr::new(192, 168, 1, 10),
        phys_mac: MacAddr([0x02, 0, 0, 0, 0, 0x10]),
        session_mac: MacAddr::random_local(&mut rng),
        lan_gw_mac,
        ep: VpnEndpointState::new(
            client_node,
            Ipv4Addr::new(10, 8, 0, 2),
            subnet,
            "corp",
            Mode::FullTunnelClient(cfg.approach),
            cfg.seed,
        )?,
        routes_injected: 0,
    };
    let mut gw_ep = VpnEndpointState::new(gw_node, gw_virtual, subnet, "corp", Mode::Gateway, cfg.seed)?;
    let mut nat = GatewayNat::new(gw_node, gw_public, "corp");
    let mut dir = StaticDirectory { gateways: vec![gw_node], ips: BTreeMap::from([(gw_virtual, gw_node)]) };

    let mut now = SimTime::ZERO;
    let tick = Duration::from_millis(10);
    let wan = Duration::from_millis(20);

    // Link setup with each peer and with the gateway.
    for remote in peers.iter().chain([&gw_public]) {
        let f = client.emit_p2p(*remote, false)?;
        lan.transmit(now, f);
        let mut ack = inbound_frame(&client, *remote, VPN_PORT, false);
        ack.dst_port = VPN_PORT;
        lan.transmit(now + wan, ack);
        now += tick;
    }

    if cfg.spoof_attack {
        now += Duration::from_secs(1);
        // Spoofed initiation from the web server's address.
        let spoof = inbound_frame(&client, web, VPN_PORT, false);
        if cfg.approach == Approach::Two {
            debug_assert_eq!(approach2_inbound(&spoof), InboundVerdict::Accept);
        }
        lan.transmit(now, spoof);
        now += Duration::from_millis(1);
        // The VPN application answers as it would any new peer.
        let f = client.emit_p2p(web, false)?;
        lan.transmit(now, f);
        now += tick;
    }

    now += Duration::from_millis(150);
    let mut replies = 0;
    for i in 0..cfg.app_packets {
        let body = (i as u32).to_be_bytes().to_vec();
        let via = match cfg.approach {
            Approach::One => client.ep.route_for(web),
            Approach::Two => RouteVia::VnDevice,
        };
        match via {
            RouteVia::LanGateway => {
                // The host stack sends straight out of the physical NIC.
                lan.transmit(
                    now,
                    CapturedFrame {
                        time: now,
                        src_mac: client.phys_mac,
                        dst_mac: lan_gw_mac,
                        ip_src: client.phys_ip,
                        ip_dst: web,
                        proto: Proto::Udp,
                        src_port: APP_PORT,
                        dst_port: WEB_PORT,
                        secured: false,
                    },
                );
                let mut back = inbound_frame(&client, web, WEB_PORT, false);
                back.dst_mac = client.phys_mac;
                back.dst_port = APP_PORT;
                lan.transmit(now + 2 * wan, back);
                replies += 1;
            }
            RouteVia::VnDevice => {
                let pkt = VirtualPacket::udp(client.ep.virtual_ip, APP_PORT, web, WEB_PORT, body.clone());
                let Outgoing::ToGateway { gateway, pkt } = client.ep.handle_outgoing(&mut dir, pkt)? else {
                    return Err(VpnError::NoGatewayAvailable);
                };
                debug_assert_eq!(gateway, gw_node);
                let f = client.emit_p2p(gw_public, pkt.secured())?;
                lan.transmit(now, f);

                // At the gateway: NAT out, the web server answers, NAT back.
                let out = nat.outbound(&pkt).map_err(|_| VpnError::NoGatewayAvailable)?;
                let answer = out.reply(echo_payload(&out.payload));
                if let Some((member, back)) = nat.inbound(&answer) {
                    debug_assert_eq!(member, client_node);
                    let back = gw_ep.secure(back);
                    lan.transmit(now + 2 * wan, inbound_frame(&client, gw_public, VPN_PORT, back.secured()));
                    if let Incoming::Deliver(p) = client.ep.handle_incoming(back) {
                        if p.ip_src == web && p.payload == echo_payload(&body) {
                            replies += 1;
                        }
                    }
                }
            }
        }
        now += tick;
    }
    client.ep.shutdown();

    let frames = lan.sniffer_log().to_vec();
    let plaintext_app_frames = frames.iter().filter(|f| !f.secured && !is_control(f)).count();
    let exposed_endpoints: BTreeSet<Ipv4Addr> = frames
        .iter()
        .filter(|f| !f.secured && is_control(f))
        .map(|f| if f.ip_src == client.phys_ip { f.ip_dst } else { f.ip_src })
        .collect();
    let client_macs = [client.phys_mac, client.session_mac];
    let nonconforming_client_frames = frames
        .iter()
        .filter(|f| client_macs.contains(&f.src_mac))
        .filter(|f| {
            let encapsulated = is_control(f)
                && f.dst_mac == lan_gw_mac
                && f.ip_src == client.phys_ip
                && (cfg.approach == Approach::One || f.src_mac == client.session_mac);
            !encapsulated
        })
        .count();
    Ok(TunnelReport {
        approach: cfg.approach,
        spoof_attack: cfg.spoof_attack,
        frames,
        app_sent: cfg.app_packets,
        app_replies: replies,
        plaintext_app_frames,
        exposed_endpoints,
        nonconforming_client_frames,
        routes_injected: client.routes_injected,
    })
}

/// A frame from a remote endpoint to the client's VPN application.
fn inbound_frame(client: &ClientHost, from: Ipv4Addr, src_port: u16, secured: bool) -> CapturedFrame {
    CapturedFrame {
        time: SimTime::ZERO,
        src_mac: client.lan_gw_mac,
        dst_mac: client.vpn_mac(),
        ip_src: from,
        ip_dst: client.phys_ip,
        proto: Proto::Udp,
        src_port,
        dst_port: VPN_PORT,
        secured,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(approach: Approach, attack: bool) -> TunnelReport {
        tunnel_demo(&TunnelConfig::new(approach, attack, 7)).unwrap()
    }

    #[test]
    fn approach_two_never_leaks() {
        for attack in [false, true] {
            let r = run(Approach::Two, attack);
            assert!(!r.leak());
            assert_eq!(r.nonconforming_client_frames, 0);
            assert_eq!(r.app_replies, r.app_sent);
            assert!(r.app_sent >= 100);
        }
    }

    #[test]
    fn approach_one_leaks_under_spoofing() {
        let r = run(Approach::One, true);
        assert!(r.leak());
        assert!(r.plaintext_app_frames >= 1);
        assert!(r.frames.iter().any(|f| !f.secured && f.ip_dst == Ipv4Addr::new(93, 184, 216, 34) && f.dst_port == WEB_PORT));
        assert_eq!(r.routes_injected, 5);
    }

    #[test]
    fn approach_one_without_attack_exposes_only_p2p_endpoints() {
        let r = run(Approach::One, false);
        assert!(!r.leak());
        assert_eq!(r.routes_injected, 4);
        let expected: BTreeSet<Ipv4Addr> = [
            Ipv4Addr::new(198, 51, 100, 11),
            Ipv4Addr::new(198, 51, 100, 12),
            Ipv4Addr::new(198, 51, 100, 13),
            Ipv4Addr::new(203, 0, 113, 5),
        ]
        .into();
        assert_eq!(r.exposed_endpoints, expected);
    }

    #[test]
    fn three_step_emit_rewrites_addresses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let session = MacAddr::random_local(&mut rng);
        let gw = MacAddr([2, 0, 0, 0, 0, 1]);
        let phys = Ipv4Addr::new(192, 168, 1, 10);
        let p = CapturedFrame {
            time: SimTime::ZERO,
            src_mac: MacAddr::default(),
            dst_mac: MacAddr::default(),
            ip_src: Ipv4Addr::new(10, 8, 0, 2),
            ip_dst: Ipv4Addr::new(198, 51, 100, 11),
            proto: Proto::Udp,
            src_port: VPN_PORT,
            dst_port: VPN_PORT,
            secured: true,
        };
        let f = approach2_emit(phys, session, gw, p.clone()).unwrap();
        assert_eq!((f.ip_src, f.src_mac, f.dst_mac), (phys, session, gw));
        assert!(f.src_mac.is_locally_administered());
        let tcp = CapturedFrame { proto: Proto::Tcp, ..p };
        assert_eq!(approach2_emit(phys, session, gw, tcp.clone()), Err(VpnError::UnsupportedProto(Proto::Tcp)));
        assert_eq!(approach2_inbound(&tcp), InboundVerdict::ResetAndDrop);
    }

    #[test]
    fn tcp_transport_is_refused_for_approach_two() {
        let mut cfg = TunnelConfig::new(Approach::Two, false, 1);
        cfg.p2p_proto = Proto::Tcp;
        assert_eq!(tunnel_demo(&cfg).unwrap_err(), VpnError::UnsupportedProto(Proto::Tcp));
    }

    #[test]
    fn capture_is_deterministic() {
        for approach in [Approach::One, Approach::Two] {
            assert_eq!(run(approach, true).csv(), run(approach, true).csv());
        }
        let a = tunnel_demo(&TunnelConfig::new(Approach::Two, true, 1)).unwrap().csv();
        let b = tunnel_demo(&TunnelConfig::new(Approach::Two, true, 2)).unwrap().csv();
        assert_ne!(a, b, "session MAC follows the seed");
    }
}
