//! Gateway registration and the NAT that carries members' Internet flows.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use super::packet::VirtualPacket;
use super::VpnError;
use crate::dht::{self, Dht, PutAck};
use crate::overlay::{NodeId, Overlay};
use crate::transport::Proto;

/// Lifetime of a gateway listing; gateways refresh at half of it.
pub const GATEWAY_TTL: Duration = Duration::from_secs(2 * 60);

/// Append `node` to the group's gateway list.
pub fn register_gateway(dht: &mut Dht, ov: &Overlay, node: NodeId, group: &str) -> Result<PutAck, VpnError> {
    Ok(dht.put(ov, node, &dht::gateways_key(group), &dht::encode_node_id(node), GATEWAY_TTL)?)
}

pub fn list_gateways(dht: &Dht, ov: &Overlay, via: NodeId, group: &str) -> Result<Vec<NodeId>, VpnError> {
    Ok(dht.get(ov, via, &dht::gateways_key(group))?.iter().filter_map(|v| dht::decode_node_id(v)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Flow {
    pub member: NodeId,
    pub member_ip: Ipv4Addr,
    pub member_port: u16,
    pub remote_ip: Ipv4Addr,
    pub remote_port: u16,
    pub proto: Proto,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum NatError {
    #[error("packet carries no sender tag")]
    Unsecured,
    #[error("sender belongs to group {0:?}")]
    WrongGroup(String),
    #[error("no free public ports")]
    PortsExhausted,
}

/// Port-translating NAT owned by a gateway node.
#[derive(Clone, Debug)]
pub struct GatewayNat {
    pub node: NodeId,
    pub public_ip: Ipv4Addr,
    pub group: String,
    next_port: u16,
    by_port: BTreeMap<u16, Flow>,
    by_flow: BTreeMap<Flow, u16>,
}

const FIRST_PORT: u16 = 20000;

impl GatewayNat {
    pub fn new(node: NodeId, public_ip: Ipv4Addr, group: &str) -> Self {
        GatewayNat {
            node,
            public_ip,
            group: group.into(),
            next_port: FIRST_PORT,
            by_port: BTreeMap::new(),
            by_flow: BTreeMap::new(),
        }
    }

    pub fn flows(&self) -> usize {
        self.by_port.len()
    }

    pub fn flow_for_port(&self, port: u16) -> Option<&Flow> {
        self.by_port.get(&port)
    }

    /// Rewrite a member's Internet-bound packet to leave from the gateway.
    pub fn outbound(&mut self, pkt: &VirtualPacket) -> Result<VirtualPacket, NatError> {
        let tag = pkt.tag.as_ref().ok_or(NatError::Unsecured)?;
        if tag.group != self.group {
            return Err(NatError::WrongGroup(tag.group.clone()));
        }
        let flow = Flow {
            member: tag.sender,
            member_ip: pkt.ip_src,
            member_port: pkt.src_port,
            remote_ip: pkt.ip_dst,
            remote_port: pkt.dst_port,
            proto: pkt.proto,
        };
        let port = match self.by_flow.get(&flow) {
            Some(p) => *p,
            None => {
                if self.next_port == u16::MAX {
                    return Err(NatError::PortsExhausted);
                }
                let p = self.next_port;
                self.next_port += 1;
                self.by_flow.insert(flow, p);
                self.by_port.insert(p, flow);
                p
            }
        };
        let mut out = pkt.clone();
        out.tag = None;
        out.ip_src = self.public_ip;
        out.src_port = port;
        Ok(out)
    }

    /// Map a reply from the Internet back to the member that opened the
    /// flow. The Internet host stays the source.
    pub fn inbound(&self, pkt: &VirtualPacket) -> Option<(NodeId, VirtualPacket)> {
        if pkt.ip_dst != self.public_ip {
            return None;
        }
        let flow = self.by_port.get(&pkt.dst_port)?;
        if flow.remote_ip != pkt.ip_src || flow.remote_port != pkt.src_port || flow.proto != pkt.proto {
            return None;
        }
        let mut back = pkt.clone();
        back.ip_dst = flow.member_ip;
        back.dst_port = flow.member_port;
        Some((flow.member, back))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::world::stable_overlay;
    use crate::vpn::packet::SecurityTag;

    fn member_pkt(sender: NodeId, group: &str, src: Ipv4Addr, sport: u16) -> VirtualPacket {
        let mut p = VirtualPacket::udp(src, sport, Ipv4Addr::new(93, 184, 216, 34), 443, b"q".to_vec());
        p.tag = Some(SecurityTag { sender, group: group.into(), nonce: 1 });
        p
    }

    #[test]
    fn round_trip_restores_member_addressing() {
        let m = NodeId::from_u128(5);
        let mut nat = GatewayNat::new(NodeId::from_u128(1), Ipv4Addr::new(203, 0, 113, 1), "g");
        let p = member_pkt(m, "g", Ipv4Addr::new(10, 8, 0, 5), 4000);
        let out = nat.outbound(&p).unwrap();
        assert_eq!(out.ip_src, nat.public_ip);
        assert!(!out.secured());
        assert_eq!(nat.outbound(&p).unwrap().src_port, out.src_port);
        let (to, back) = nat.inbound(&out.reply(b"r".to_vec())).unwrap();
        assert_eq!(to, m);
        assert_eq!((back.ip_src, back.src_port), (p.ip_dst, p.dst_port));
        assert_eq!((back.ip_dst, back.dst_port), (p.ip_src, p.src_port));
    }

    #[test]
    fn foreign_or_unsecured_packets_are_refused() {
        let mut nat = GatewayNat::new(NodeId::from_u128(1), Ipv4Addr::new(203, 0, 113, 1), "g");
        let mut p = member_pkt(NodeId::from_u128(5), "h", Ipv4Addr::new(10, 8, 0, 5), 4000);
        assert_eq!(nat.outbound(&p), Err(NatError::WrongGroup("h".into())));
        p.tag = None;
        assert_eq!(nat.outbound(&p), Err(NatError::Unsecured));
        let stray = VirtualPacket::udp(Ipv4Addr::new(1, 1, 1, 1), 53, nat.public_ip, 20000, vec![]);
        assert!(nat.inbound(&stray).is_none());
    }

    #[test]
    fn registration_is_visible_then_lapses() {
        let (mut ov, ids) = stable_overlay(10, 3);
        let mut dht = Dht::new();
        register_gateway(&mut dht, &ov, ids[0], "g").unwrap();
        register_gateway(&mut dht, &ov, ids[1], "g").unwrap();
        let mut listed = list_gateways(&dht, &ov, ids[7], "g").unwrap();
        listed.sort();
        let mut want = vec![ids[0], ids[1]];
        want.sort();
        assert_eq!(listed, want);
        ov.kill(ids[0]).unwrap();
        ov.advance(GATEWAY_TTL / 2);
        register_gateway(&mut dht, &ov, ids[1], "g").unwrap();
        ov.advance(GATEWAY_TTL / 2 + Duration::from_secs(1));
        assert_eq!(list_gateways(&dht, &ov, ids[7], "g").unwrap(), vec![ids[1]]);
    }
}
