//! 160-bit ring identifiers and modular ring arithmetic.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Unsigned 160-bit integer, the arithmetic backing of ring addresses.
///
/// Field order makes the derived `Ord` numeric.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct U160 {
    hi: u32,
    lo: u128,
}

impl U160 {
    pub const ZERO: U160 = U160 { hi: 0, lo: 0 };
    pub const MAX: U160 = U160 { hi: u32::MAX, lo: u128::MAX };
    /// 2^159, half of the ring.
    pub const HALF: U160 = U160 { hi: 1 << 31, lo: 0 };
    pub const BYTES: usize = 20;

    pub const fn from_parts(hi: u32, lo: u128) -> Self {
        U160 { hi, lo }
    }

    pub const fn from_u128(v: u128) -> Self {
        U160 { hi: 0, lo: v }
    }

    pub fn from_be_bytes(bytes: [u8; 20]) -> Self {
        let mut hi = [0u8; 4];
        let mut lo = [0u8; 16];
        hi.copy_from_slice(&bytes[..4]);
        lo.copy_from_slice(&bytes[4..]);
        U160 { hi: u32::from_be_bytes(hi), lo: u128::from_be_bytes(lo) }
    }

    pub fn to_be_bytes(self) -> [u8; 20] {
        let mut out = [0u8; 20];
        out[..4].copy_from_slice(&self.hi.to_be_bytes());
        out[4..].copy_from_slice(&self.lo.to_be_bytes());
        out
    }

    pub fn wrapping_add(self, rhs: U160) -> U160 {
        let (lo, carry) = self.lo.overflowing_add(rhs.lo);
        let hi = self.hi.wrapping_add(rhs.hi).wrapping_add(carry as u32);
        U160 { hi, lo }
    }

    pub fn wrapping_sub(self, rhs: U160) -> U160 {
        let (lo, borrow) = self.lo.overflowing_sub(rhs.lo);
        let hi = self.hi.wrapping_sub(rhs.hi).wrapping_sub(borrow as u32);
        U160 { hi, lo }
    }

    pub fn is_zero(self) -> bool {
        self == U160::ZERO
    }

    /// Top byte, used by uniformity checks.
    pub fn top_byte(self) -> u8 {
        (self.hi >> 24) as u8
    }

    /// Lossy conversion, exact for values below 2^53.
    pub fn to_f64(self) -> f64 {
        self.hi as f64 * 2f64.powi(128) + self.lo as f64
    }

    /// log2 of the value; `-inf` for zero.
    pub fn log2(self) -> f64 {
        if self.is_zero() {
            return f64::NEG_INFINITY;
        }
        self.to_f64().log2()
    }

    /// The integer nearest to `2^exp`, saturating to `[1, 2^160 - 1]`.
    pub fn pow2(exp: f64) -> U160 {
        if exp.is_nan() || exp <= 0.0 {
            return U160::from_u128(1);
        }
        if exp >= 160.0 {
            return U160::MAX;
        }
        let whole = exp.floor() as u32;
        let frac = exp - whole as f64;
        // 2^frac in [1, 2) as a 64-bit fixed point mantissa with 63 fraction bits.
        let mantissa = (2f64.powf(frac) * (1u64 << 63) as f64) as u64;
        if whole >= 63 {
            U160::from_u128(mantissa as u128).shifted_left(whole - 63)
        } else {
            U160::from_u128((mantissa >> (63 - whole)) as u128)
        }
    }

    /// Divide the full ring (2^160) by `n`, used for average-gap estimates.
    pub fn ring_div(n: u64) -> U160 {
        if n <= 1 {
            return U160::MAX;
        }
        U160::pow2(160.0 - (n as f64).log2())
    }

    pub fn shifted_left(self, bits: u32) -> U160 {
        if bits == 0 {
            return self;
        }
        if bits >= 160 {
            return U160::ZERO;
        }
        // Three little-endian u64 limbs; the top limb only uses 32 bits.
        let limbs = [self.lo as u64, (self.lo >> 64) as u64, self.hi as u64];
        let mut out = [0u64; 3];
        let limb_shift = (bits / 64) as usize;
        let bit_shift = bits % 64;
        for i in (0..3).rev() {
            if i < limb_shift {
                continue;
            }
            let src = i - limb_shift;
            let mut v = limbs[src] << bit_shift;
            if bit_shift > 0 && src > 0 {
                v |= limbs[src - 1] >> (64 - bit_shift);
            }
            out[i] = v;
        }
        U160 {
            hi: out[2] as u32,
            lo: ((out[1] as u128) << 64) | out[0] as u128,
        }
    }
}

impl fmt::Debug for U160 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}{:032x}", self.hi, self.lo)
    }
}

impl fmt::Display for U160 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Direction around the ring. Right is increasing address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Right,
}

/// A node identifier: a point on the ring of size 2^160.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub U160);

/// Node identifiers and routing destinations share one address space.
pub type RingAddress = NodeId;

impl NodeId {
    pub fn from_be_bytes(bytes: [u8; 20]) -> Self {
        NodeId(U160::from_be_bytes(bytes))
    }

    pub fn to_be_bytes(self) -> [u8; 20] {
        self.0.to_be_bytes()
    }

    /// Low 128 bits as a convenience for tests on toy rings.
    pub fn from_u128(v: u128) -> Self {
        NodeId(U160::from_u128(v))
    }

    pub fn to_hex(self) -> String {
        format!("{}", self.0)
    }

    /// Deterministic identifier from a 64-bit seed via a ChaCha20 stream.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        NodeId::random(&mut rng)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 20];
        rng.fill(&mut bytes[..]);
        NodeId::from_be_bytes(bytes)
    }

    pub fn offset(self, d: U160) -> NodeId {
        NodeId(self.0.wrapping_add(d))
    }

    pub fn distance(self, other: NodeId, dir: Direction) -> U160 {
        ring_distance(self, other, dir)
    }

    /// min(left, right) ring distance.
    pub fn ring_gap(self, other: NodeId) -> U160 {
        let r = ring_distance(self, other, Direction::Right);
        let l = ring_distance(self, other, Direction::Left);
        r.min(l)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Short form keeps traces readable.
        let hex = self.to_hex();
        write!(f, "#{}", &hex[..10])
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid node id hex: {0}")]
pub struct ParseNodeIdError(String);

impl FromStr for NodeId {
    type Err = ParseNodeIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() != 40 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ParseNodeIdError(s.to_string()));
        }
        let hi = u32::from_str_radix(&s[..8], 16).map_err(|_| ParseNodeIdError(s.into()))?;
        let lo = u128::from_str_radix(&s[8..], 16).map_err(|_| ParseNodeIdError(s.into()))?;
        Ok(NodeId(U160::from_parts(hi, lo)))
    }
}

/// Deterministic node identifier for a seed.
pub fn new_node_id(rng_seed: u64) -> NodeId {
    NodeId::from_seed(rng_seed)
}

/// Right distance is `(b - a) mod 2^160`, left distance `(a - b) mod 2^160`.
pub fn ring_distance(a: NodeId, b: NodeId, dir: Direction) -> U160 {
    match dir {
        Direction::Right => b.0.wrapping_sub(a.0),
        Direction::Left => a.0.wrapping_sub(b.0),
    }
}

/// Harmonically distributed shortcut target.
///
/// The log of the clockwise distance is uniform between one expected
/// neighbor gap (`2^160 / n_estimate`) and the full ring, so the distance
/// density is proportional to `1/d`.
pub fn select_shortcut_target<R: Rng + ?Sized>(
    self_id: NodeId,
    n_estimate: u64,
    rng: &mut R,
) -> RingAddress {
    let n = n_estimate.max(1);
    if n == 1 {
        return NodeId::random(rng);
    }
    let lo = 160.0 - (n as f64).log2();
    let exp = rng.gen_range(lo..160.0);
    self_id.offset(U160::pow2(exp))
}
