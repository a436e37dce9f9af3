//! IPv4 prefixes.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cidr {
    network: Ipv4Addr,
    prefix: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid CIDR {0:?}")]
pub struct ParseCidrError(pub String);

impl Cidr {
    /// Host bits of `addr` are cleared.
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Self {
        assert!(prefix <= 32, "prefix {prefix} > 32");
        Cidr { network: Ipv4Addr::from(u32::from(addr) & Self::mask_bits(prefix)), prefix }
    }

    fn mask_bits(prefix: u8) -> u32 {
        if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - prefix)
        }
    }

    pub fn network(self) -> Ipv4Addr {
        self.network
    }

    pub fn prefix(self) -> u8 {
        self.prefix
    }

    pub fn contains(self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask_bits(self.prefix) == u32::from(self.network)
    }

    pub fn host(ip: Ipv4Addr) -> Self {
        Cidr::new(ip, 32)
    }

    /// Usable host addresses: all but the network and broadcast addresses
    /// for prefixes shorter than /31.
    pub fn hosts(self) -> impl Iterator<Item = Ipv4Addr> {
        let base = u32::from(self.network) as u64;
        let size = 1u64 << (32 - self.prefix);
        let (lo, hi) = if self.prefix >= 31 { (base, base + size) } else { (base + 1, base + size - 1) };
        (lo..hi).map(|a| Ipv4Addr::from(a as u32))
    }

    pub fn host_count(self) -> usize {
        self.hosts().count()
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.prefix)
    }
}

impl FromStr for Cidr {
    type Err = ParseCidrError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseCidrError(s.to_string());
        let (a, p) = s.split_once('/').ok_or_else(err)?;
        let addr: Ipv4Addr = a.parse().map_err(|_| err())?;
        let prefix: u8 = p.parse().map_err(|_| err())?;
        if prefix > 32 {
            return Err(err());
        }
        Ok(Cidr::new(addr, prefix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slash24() {
        let c: Cidr = "10.1.2.77/24".parse().unwrap();
        assert_eq!(c.to_string(), "10.1.2.0/24");
        assert!(c.contains(Ipv4Addr::new(10, 1, 2, 255)));
        assert!(!c.contains(Ipv4Addr::new(10, 1, 3, 0)));
        assert_eq!(c.host_count(), 254);
        assert_eq!(c.hosts().next(), Some(Ipv4Addr::new(10, 1, 2, 1)));
        assert!("10.0.0.0/33".parse::<Cidr>().is_err());
        assert!("nonsense".parse::<Cidr>().is_err());
    }
}
