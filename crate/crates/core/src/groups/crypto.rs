//! Signature interface and certificates.
//!
//! [`KeyedMacScheme`] is a deterministic stand-in: the verification key is
//! the signing secret, so anyone able to verify could also forge. Swap in
//! an asymmetric scheme by implementing [`SignatureScheme`].

use hmac::{Hmac, KeyInit, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

use crate::overlay::NodeId;
use crate::time::SimTime;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SigningKey(pub Vec<u8>);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VerifyingKey(pub Vec<u8>);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Signature(pub Vec<u8>);

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

pub trait SignatureScheme {
    fn keygen(&self, seed: u64) -> (SigningKey, VerifyingKey);
    fn sign(&self, key: &SigningKey, msg: &[u8]) -> Signature;
    fn verify(&self, key: &VerifyingKey, msg: &[u8], sig: &Signature) -> bool;
}

/// HMAC-SHA256 over the message.
#[derive(Clone, Copy, Debug, Default)]
pub struct KeyedMacScheme;

type HmacSha256 = Hmac<Sha256>;

impl SignatureScheme for KeyedMacScheme {
    fn keygen(&self, seed: u64) -> (SigningKey, VerifyingKey) {
        let mut k = vec![0u8; 32];
        ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut k);
        (SigningKey(k.clone()), VerifyingKey(k))
    }

    fn sign(&self, key: &SigningKey, msg: &[u8]) -> Signature {
        let mut mac = <HmacSha256 as KeyInit>::new_from_slice(&key.0).expect("hmac takes any key length");
        mac.update(msg);
        Signature(mac.finalize().into_bytes().to_vec())
    }

    fn verify(&self, key: &VerifyingKey, msg: &[u8], sig: &Signature) -> bool {
        let mut mac = <HmacSha256 as KeyInit>::new_from_slice(&key.0).expect("hmac takes any key length");
        mac.update(msg);
        mac.verify_slice(&sig.0).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub subject_node: NodeId,
    pub group: String,
    pub user: String,
    pub issued_at: SimTime,
    pub signature: Signature,
}

fn put_field(out: &mut Vec<u8>, f: &[u8]) {
    out.extend_from_slice(&(f.len() as u32).to_be_bytes());
    out.extend_from_slice(f);
}

fn take_field<'a>(buf: &mut &'a [u8]) -> Option<&'a [u8]> {
    if buf.len() < 4 {
        return None;
    }
    let n = u32::from_be_bytes(buf[..4].try_into().ok()?) as usize;
    let rest = &buf[4..];
    if rest.len() < n {
        return None;
    }
    let (f, tail) = rest.split_at(n);
    *buf = tail;
    Some(f)
}

pub(crate) fn encode_fields(fields: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in fields {
        put_field(&mut out, f);
    }
    out
}

/// Split exactly `n` length-prefixed fields; trailing bytes are an error.
pub(crate) fn decode_fields(mut buf: &[u8], n: usize) -> Option<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(take_field(&mut buf)?.to_vec());
    }
    buf.is_empty().then_some(out)
}

impl Certificate {
    /// The bytes covered by the signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        Self::tbs(self.subject_node, &self.group, &self.user, self.issued_at)
    }

    fn tbs(node: NodeId, group: &str, user: &str, issued_at: SimTime) -> Vec<u8> {
        encode_fields(&[
            &node.to_be_bytes(),
            group.as_bytes(),
            user.as_bytes(),
            &issued_at.as_nanos().to_be_bytes(),
        ])
    }

    pub fn issue(
        scheme: &impl SignatureScheme,
        ca: &SigningKey,
        node: NodeId,
        group: &str,
        user: &str,
        issued_at: SimTime,
    ) -> Self {
        let signature = scheme.sign(ca, &Self::tbs(node, group, user, issued_at));
        Certificate { subject_node: node, group: group.into(), user: user.into(), issued_at, signature }
    }

    pub fn verify(&self, scheme: &impl SignatureScheme, ca: &VerifyingKey) -> bool {
        scheme.verify(ca, &self.signed_bytes(), &self.signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_fields(&[
            &self.subject_node.to_be_bytes(),
            self.group.as_bytes(),
            self.user.as_bytes(),
            &self.issued_at.as_nanos().to_be_bytes(),
            &self.signature.0,
        ])
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        let f = decode_fields(b, 5)?;
        Some(Certificate {
            subject_node: NodeId::from_be_bytes(f[0].as_slice().try_into().ok()?),
            group: String::from_utf8(f[1].clone()).ok()?,
            user: String::from_utf8(f[2].clone()).ok()?,
            issued_at: SimTime::from_nanos(u64::from_be_bytes(f[3].as_slice().try_into().ok()?)),
            signature: Signature(f[4].clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hmac_known_answer() {
        // RFC 4231 test case 2.
        let s = KeyedMacScheme;
        let sig = s.sign(&SigningKey(b"Jefe".to_vec()), b"what do ya want for nothing?");
        let hex: String = sig.0.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843");
    }

    #[test]
    fn cert_verifies_and_detects_tampering() {
        let s = KeyedMacScheme;
        let (sk, vk) = s.keygen(1);
        let cert = Certificate::issue(&s, &sk, NodeId::from_seed(5), "lab", "alice", SimTime::from_secs(3));
        assert!(cert.verify(&s, &vk));
        let mut bad = cert.clone();
        let mut b = bad.subject_node.to_be_bytes();
        b[19] ^= 1;
        bad.subject_node = NodeId::from_be_bytes(b);
        assert!(!bad.verify(&s, &vk));
        let mut bad = cert.clone();
        bad.user = "mallory".into();
        assert!(!bad.verify(&s, &vk));
        let (_, other) = s.keygen(2);
        assert!(!cert.verify(&s, &other));
        assert_eq!(Certificate::from_bytes(&cert.to_bytes()), Some(cert));
    }

    #[test]
    fn fields_reject_trailing_bytes() {
        let mut b = encode_fields(&[b"a", b"bc"]);
        assert_eq!(decode_fields(&b, 2), Some(vec![b"a".to_vec(), b"bc".to_vec()]));
        b.push(0);
        assert_eq!(decode_fields(&b, 2), None);
        assert_eq!(decode_fields(&[0, 0, 0, 9, 1], 1), None);
    }
}
