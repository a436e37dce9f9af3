//! Virtual network layer: DHT-backed addressing, the split and full tunnel
//! packet paths, gateways, and links created for VPN traffic.

pub mod dhcp;
pub mod endpoint;
pub mod gateway;
pub mod network;
pub mod packet;
pub mod shortcut;
pub mod tunnel;

use std::net::Ipv4Addr;

use crate::dht::{Dht, DhtError};
use crate::overlay::{NodeId, Overlay};
use crate::transport::{Cidr, Proto};

pub use dhcp::{allocate_address, allocate_lockstep, resolve, DhcpClient, IpMapping, LEASE_TTL};
pub use endpoint::{
    Approach, Directory, DropReason, Incoming, Mode, Outgoing, RouteEntry, RouteVia, VpnEndpointState,
    MISSED_PINGS_LIMIT, PING_PERIOD,
};
pub use gateway::{register_gateway, GatewayNat, GATEWAY_TTL};
pub use network::VpnNetwork;
pub use packet::{SecurityTag, VirtualPacket};
pub use shortcut::{demand_shortcut, ShortcutOutcome, ShortcutTracker};
pub use tunnel::{tunnel_demo, TunnelReport};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VpnError {
    #[error("no owner for {0}")]
    NotFound(Ipv4Addr),
    #[error("no usable gateway")]
    NoGatewayAvailable,
    #[error("no free address in {0}")]
    SubnetExhausted(Cidr),
    #[error("{0} is not supported as the P2P transport here")]
    UnsupportedProto(Proto),
    #[error("{0} is outside the VPN subnet")]
    OutsideSubnet(Ipv4Addr),
    #[error("only full-tunnel clients pick gateways")]
    NotAClient,
    #[error("source port {0} is not the VPN application's")]
    NotControl(u16),
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(NodeId),
    #[error(transparent)]
    Dht(#[from] DhtError),
}

/// Answers lookups from the DHT as seen by `via`.
pub struct DhtDirectory<'a> {
    pub ov: &'a Overlay,
    pub dht: &'a Dht,
    pub via: NodeId,
}

impl Directory for DhtDirectory<'_> {
    fn resolve(&mut self, ip: Ipv4Addr) -> Result<NodeId, VpnError> {
        dhcp::resolve(self.dht, self.ov, self.via, ip)
    }

    fn gateways(&mut self, group: &str) -> Result<Vec<NodeId>, VpnError> {
        gateway::list_gateways(self.dht, self.ov, self.via, group)
    }
}
