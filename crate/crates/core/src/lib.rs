//! Simulator and protocol library for a structured peer-to-peer VPN.
//!
//! The ring overlay, DHT, relays, VPN packet handling and group PKI all run
//! on a deterministic discrete-event network model.

pub mod dht;
pub mod experiments;
pub mod groups;
pub mod overlay;
pub mod relays;
pub mod time;
pub mod transport;
pub mod vpn;
