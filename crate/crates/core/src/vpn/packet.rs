//! Frames carried between VN devices.

use std::net::Ipv4Addr;

use crate::overlay::NodeId;
use crate::transport::lan::{MacAddr, Proto};

/// Authenticated-sender wrapper. Confidentiality is modeled by its
/// presence; the sniffer only sees whether it is there.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SecurityTag {
    pub sender: NodeId,
    pub group: String,
    pub nonce: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VirtualPacket {
    pub eth_src: MacAddr,
    pub eth_dst: MacAddr,
    pub ip_src: Ipv4Addr,
    pub ip_dst: Ipv4Addr,
    pub proto: Proto,
    pub src_port: u16,
    pub dst_port: u16,
    pub payload: Vec<u8>,
    pub tag: Option<SecurityTag>,
}

impl VirtualPacket {
    pub fn udp(ip_src: Ipv4Addr, src_port: u16, ip_dst: Ipv4Addr, dst_port: u16, payload: impl Into<Vec<u8>>) -> Self {
        VirtualPacket {
            eth_src: MacAddr::default(),
            eth_dst: MacAddr::default(),
            ip_src,
            ip_dst,
            proto: Proto::Udp,
            src_port,
            dst_port,
            payload: payload.into(),
            tag: None,
        }
    }

    pub fn secured(&self) -> bool {
        self.tag.is_some()
    }

    pub fn sender(&self) -> Option<NodeId> {
        self.tag.as_ref().map(|t| t.sender)
    }

    /// Swap source and destination, as a responder would.
    pub fn reply(&self, payload: impl Into<Vec<u8>>) -> Self {
        VirtualPacket {
            eth_src: self.eth_dst,
            eth_dst: self.eth_src,
            ip_src: self.ip_dst,
            ip_dst: self.ip_src,
            proto: self.proto,
            src_port: self.dst_port,
            dst_port: self.src_port,
            payload: payload.into(),
            tag: None,
        }
    }
}
