//! Ethernet segments with a passive sniffer.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::time::Duration;

use rand::Rng;

use crate::time::SimTime;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    /// Random unicast address from the locally administered space.
    pub fn random_local<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; 6];
        rng.fill(&mut b[..]);
        b[0] = (b[0] & 0b1111_1100) | 0b0000_0010;
        MacAddr(b)
    }

    pub fn is_locally_administered(self) -> bool {
        self.0[0] & 0b10 != 0
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", b[0], b[1], b[2], b[3], b[4], b[5])
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proto {
    Udp,
    Tcp,
    Icmp,
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Proto::Udp => "udp",
            Proto::Tcp => "tcp",
            Proto::Icmp => "icmp",
        })
    }
}

/// One captured Ethernet frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedFrame {
    pub time: SimTime,
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub ip_src: Ipv4Addr,
    pub ip_dst: Ipv4Addr,
    pub proto: Proto,
    pub src_port: u16,
    pub dst_port: u16,
    pub secured: bool,
}

pub type HostId = u32;

#[derive(Clone, Debug)]
pub struct LanSegment {
    pub hosts: BTreeSet<HostId>,
    pub gateway: HostId,
    pub gateway_mac: MacAddr,
    pub latency: Duration,
    sniffer_log: Vec<CapturedFrame>,
    delivered: u64,
}

impl LanSegment {
    pub fn new(gateway: HostId, gateway_mac: MacAddr) -> Self {
        LanSegment {
            hosts: BTreeSet::from([gateway]),
            gateway,
            gateway_mac,
            latency: Duration::from_micros(200),
            sniffer_log: Vec::new(),
            delivered: 0,
        }
    }

    pub fn attach(&mut self, host: HostId) {
        self.hosts.insert(host);
    }

    /// Put a frame on the wire; the sniffer sees every frame. Returns the
    /// time the frame reaches the other side of the segment.
    pub fn transmit(&mut self, now: SimTime, mut frame: CapturedFrame) -> SimTime {
        frame.time = now;
        self.sniffer_log.push(frame);
        self.delivered += 1;
        now + self.latency
    }

    pub fn sniffer_log(&self) -> &[CapturedFrame] {
        &self.sniffer_log
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn random_mac_is_local_unicast() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let m = MacAddr::random_local(&mut rng);
            assert!(m.is_locally_administered());
            assert_eq!(m.0[0] & 1, 0);
        }
    }

    #[test]
    fn sniffer_sees_every_frame() {
        let mut lan = LanSegment::new(0, MacAddr([2, 0, 0, 0, 0, 1]));
        lan.attach(1);
        for i in 0..5 {
            lan.transmit(
                SimTime::from_secs(i),
                CapturedFrame {
                    time: SimTime::ZERO,
                    src_mac: MacAddr::default(),
                    dst_mac: lan.gateway_mac,
                    ip_src: Ipv4Addr::new(192, 168, 1, 2),
                    ip_dst: Ipv4Addr::new(8, 8, 8, 8),
                    proto: Proto::Udp,
                    src_port: 1,
                    dst_port: 2,
                    secured: false,
                },
            );
        }
        assert_eq!(lan.sniffer_log().len() as u64, lan.delivered());
        assert_eq!(lan.sniffer_log()[3].time, SimTime::from_secs(3));
    }
}
