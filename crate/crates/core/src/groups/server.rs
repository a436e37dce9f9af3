//! In-process group server: membership workflow, configuration blobs,
//! certificate signing, and the revocation list.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::crypto::{decode_fields, encode_fields, Certificate, KeyedMacScheme, SignatureScheme, SigningKey, VerifyingKey};
use crate::overlay::NodeId;
use crate::time::SimTime;
use crate::transport::Cidr;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GroupError {
    #[error("group name {0:?} is taken")]
    NameTaken(String),
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("{0:?} is not an administrator")]
    NotAdmin(String),
    #[error("{0:?} is not an approved member")]
    NotApproved(String),
    #[error("{0:?} is already a member")]
    AlreadyMember(String),
    #[error("no pending request from {0:?}")]
    NoPendingRequest(String),
    #[error("shared key not recognized")]
    BadSharedKey,
    #[error("{0:?} has been revoked")]
    Revoked(String),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("secret material requires a secure channel")]
    InsecureChannel,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("no group members found")]
    NoMembersFound,
    #[error("certificate rejected by {0} member(s)")]
    CertRejected(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Secure,
    Insecure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemberStatus {
    Pending,
    Approved,
    Revoked,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemberRecord {
    pub shared_key: Option<Vec<u8>>,
    pub status: MemberStatus,
    pub info: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupConfig {
    pub name: String,
    pub subnet: Cidr,
    pub admin_users: BTreeSet<String>,
    pub ca_public_key: VerifyingKey,
    pub member_records: BTreeMap<String, MemberRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RevocationState {
    /// Append-only.
    pub crl: Vec<(String, SimTime)>,
    pub dht_subscribers: BTreeMap<String, Vec<NodeId>>,
    pub broadcast_log: Vec<(String, SimTime)>,
}

impl RevocationState {
    pub fn is_revoked(&self, user: &str) -> bool {
        self.crl.iter().any(|(u, _)| u == user)
    }
}

/// What a newly approved member downloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigBlob {
    pub group: String,
    pub subnet: Cidr,
    pub shared_key: Vec<u8>,
    pub ca_key: VerifyingKey,
}

impl ConfigBlob {
    /// Four fields, each a big-endian u32 length followed by the bytes:
    /// group name, subnet text, shared key, CA verification key.
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_fields(&[
            self.group.as_bytes(),
            self.subnet.to_string().as_bytes(),
            &self.shared_key,
            &self.ca_key.0,
        ])
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, GroupError> {
        let bad = || GroupError::Malformed("config blob".into());
        let f = decode_fields(b, 4).ok_or_else(bad)?;
        let group = String::from_utf8(f[0].clone()).map_err(|_| bad())?;
        let subnet = std::str::from_utf8(&f[1]).map_err(|_| bad())?.parse().map_err(|_| bad())?;
        Ok(ConfigBlob { group, subnet, shared_key: f[2].clone(), ca_key: VerifyingKey(f[3].clone()) })
    }
}

#[derive(Clone, Debug)]
struct Group {
    config: GroupConfig,
    ca_secret: SigningKey,
    revocation: RevocationState,
    issued: Vec<Certificate>,
}

#[derive(Clone, Debug)]
pub struct GroupServer {
    scheme: KeyedMacScheme,
    groups: BTreeMap<String, Group>,
    /// shared key → (group, user)
    keys: BTreeMap<Vec<u8>, (String, String)>,
    rng: ChaCha20Rng,
    seed: u64,
    now: SimTime,
    requests: u64,
}

impl GroupServer {
    pub fn new(seed: u64) -> Self {
        GroupServer {
            scheme: KeyedMacScheme,
            groups: BTreeMap::new(),
            keys: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            seed,
            now: SimTime::ZERO,
            requests: 0,
        }
    }

    pub fn scheme(&self) -> KeyedMacScheme {
        self.scheme
    }

    pub fn set_time(&mut self, now: SimTime) {
        self.now = now;
    }

    /// Requests served so far.
    pub fn request_count(&self) -> u64 {
        self.requests
    }

    pub fn group(&self, name: &str) -> Option<&GroupConfig> {
        self.groups.get(name).map(|g| &g.config)
    }

    pub fn revocation(&self, name: &str) -> Option<&RevocationState> {
        self.groups.get(name).map(|g| &g.revocation)
    }

    pub fn issued_certificates(&self, name: &str) -> &[Certificate] {
        self.groups.get(name).map(|g| g.issued.as_slice()).unwrap_or(&[])
    }

    fn group_mut(&mut self, name: &str) -> Result<&mut Group, GroupError> {
        self.groups.get_mut(name).ok_or_else(|| GroupError::UnknownGroup(name.into()))
    }

    fn mint_key(&mut self) -> Vec<u8> {
        loop {
            let mut k = vec![0u8; 16];
            self.rng.fill_bytes(&mut k);
            if !self.keys.contains_key(&k) {
                return k;
            }
        }
    }

    /// Register a group; the creator becomes its administrator and first
    /// approved member.
    pub fn create_group(&mut self, admin: &str, name: &str, subnet: Cidr) -> Result<&GroupConfig, GroupError> {
        self.requests += 1;
        if self.groups.contains_key(name) {
            return Err(GroupError::NameTaken(name.into()));
        }
        let (ca_secret, ca_public_key) =
            self.scheme.keygen(self.seed ^ (self.groups.len() as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let key = self.mint_key();
        self.keys.insert(key.clone(), (name.into(), admin.into()));
        let mut member_records = BTreeMap::new();
        member_records.insert(
            admin.to_string(),
            MemberRecord { shared_key: Some(key), status: MemberStatus::Approved, info: "administrator".into() },
        );
        let config = GroupConfig {
            name: name.into(),
            subnet,
            admin_users: BTreeSet::from([admin.to_string()]),
            ca_public_key,
            member_records,
        };
        self.groups.insert(
            name.into(),
            Group { config, ca_secret, revocation: RevocationState::default(), issued: Vec::new() },
        );
        Ok(&self.groups[name].config)
    }

    pub fn request_join(&mut self, user: &str, group: &str, info: &str) -> Result<(), GroupError> {
        self.requests += 1;
        let g = self.group_mut(group)?;
        match g.config.member_records.get(user).map(|r| r.status) {
            Some(MemberStatus::Approved) => Err(GroupError::AlreadyMember(user.into())),
            Some(MemberStatus::Revoked) => Err(GroupError::Revoked(user.into())),
            _ => {
                g.config.member_records.insert(
                    user.into(),
                    MemberRecord { shared_key: None, status: MemberStatus::Pending, info: info.into() },
                );
                Ok(())
            }
        }
    }

    fn check_admin(&self, admin: &str, group: &str) -> Result<(), GroupError> {
        let g = self.groups.get(group).ok_or_else(|| GroupError::UnknownGroup(group.into()))?;
        if g.config.admin_users.contains(admin) {
            Ok(())
        } else {
            Err(GroupError::NotAdmin(admin.into()))
        }
    }

    fn pending(&self, group: &str, user: &str) -> Result<(), GroupError> {
        match self.groups[group].config.member_records.get(user) {
            Some(r) if r.status == MemberStatus::Pending => Ok(()),
            _ => Err(GroupError::NoPendingRequest(user.into())),
        }
    }

    /// Approve a pending request and mint the user's shared key.
    pub fn approve(&mut self, admin: &str, group: &str, user: &str) -> Result<(), GroupError> {
        self.requests += 1;
        self.check_admin(admin, group)?;
        self.pending(group, user)?;
        let key = self.mint_key();
        self.keys.insert(key.clone(), (group.into(), user.into()));
        let rec = self.group_mut(group)?.config.member_records.get_mut(user).expect("checked pending");
        rec.status = MemberStatus::Approved;
        rec.shared_key = Some(key);
        Ok(())
    }

    /// Drop a pending request; the user may ask again later.
    pub fn deny(&mut self, admin: &str, group: &str, user: &str) -> Result<(), GroupError> {
        self.requests += 1;
        self.check_admin(admin, group)?;
        self.pending(group, user)?;
        self.group_mut(group)?.config.member_records.remove(user);
        Ok(())
    }

    pub fn issue_blob(&mut self, user: &str, group: &str, channel: Channel) -> Result<ConfigBlob, GroupError> {
        self.requests += 1;
        if channel != Channel::Secure {
            return Err(GroupError::InsecureChannel);
        }
        let g = self.groups.get(group).ok_or_else(|| GroupError::UnknownGroup(group.into()))?;
        match g.config.member_records.get(user) {
            Some(MemberRecord { status: MemberStatus::Approved, shared_key: Some(k), .. }) => Ok(ConfigBlob {
                group: group.into(),
                subnet: g.config.subnet,
                shared_key: k.clone(),
                ca_key: g.config.ca_public_key.clone(),
            }),
            _ => Err(GroupError::NotApproved(user.into())),
        }
    }

    /// Sign a certificate binding `node` to the key holder.
    pub fn sign_csr(&mut self, shared_key: &[u8], node: NodeId) -> Result<Certificate, GroupError> {
        self.requests += 1;
        let (group, user) = self.keys.get(shared_key).cloned().ok_or(GroupError::BadSharedKey)?;
        let now = self.now;
        let scheme = self.scheme;
        let g = self.group_mut(&group)?;
        match g.config.member_records.get(&user).map(|r| r.status) {
            Some(MemberStatus::Approved) => {}
            Some(MemberStatus::Revoked) => return Err(GroupError::Revoked(user)),
            _ => return Err(GroupError::BadSharedKey),
        }
        let cert = Certificate::issue(&scheme, &g.ca_secret, node, &group, &user, now);
        g.issued.push(cert.clone());
        Ok(cert)
    }

    /// Add `user` to the CRL. Returns the node ids certified for the user,
    /// which the other revocation channels announce.
    pub fn revoke(&mut self, group: &str, user: &str) -> Result<Vec<NodeId>, GroupError> {
        self.requests += 1;
        let now = self.now;
        let g = self.group_mut(group)?;
        let rec = g.config.member_records.get_mut(user).ok_or_else(|| GroupError::UnknownUser(user.into()))?;
        if rec.status != MemberStatus::Approved {
            return Err(GroupError::UnknownUser(user.into()));
        }
        rec.status = MemberStatus::Revoked;
        g.revocation.crl.push((user.into(), now));
        Ok(g.issued.iter().filter(|c| c.user == user).map(|c| c.subject_node).collect())
    }

    pub fn note_broadcast(&mut self, group: &str, user: &str) {
        let now = self.now;
        if let Some(g) = self.groups.get_mut(group) {
            g.revocation.broadcast_log.push((user.into(), now));
        }
    }

    pub fn note_subscribers(&mut self, group: &str, user: &str, subscribers: Vec<NodeId>) {
        if let Some(g) = self.groups.get_mut(group) {
            g.revocation.dht_subscribers.insert(user.into(), subscribers);
        }
    }

    /// Revoked users of `group`, sorted.
    pub fn crl(&mut self, group: &str) -> Result<Vec<String>, GroupError> {
        self.requests += 1;
        let g = self.groups.get(group).ok_or_else(|| GroupError::UnknownGroup(group.into()))?;
        let set: BTreeSet<String> = g.revocation.crl.iter().map(|(u, _)| u.clone()).collect();
        Ok(set.into_iter().collect())
    }

    /// Line-oriented request API for an authenticated session user:
    ///
    /// ```text
    /// JOIN <user> <group> <info>      -> OK
    /// APPROVE <user>                  -> OK
    /// SIGN <shared_key_hex> <node_id_hex> -> CERT <certificate_hex>
    /// CRL? [group]                    -> revoked users, one per line
    /// ```
    ///
    /// Failures answer `ERR <reason>`.
    pub fn handle_line(&mut self, session_user: &str, line: &str) -> String {
        match self.dispatch(session_user, line.trim_end_matches(['\r', '\n'])) {
            Ok(s) => s,
            Err(e) => format!("ERR {e}"),
        }
    }

    fn dispatch(&mut self, session_user: &str, line: &str) -> Result<String, GroupError> {
        let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
        match cmd {
            "JOIN" => {
                let mut it = rest.splitn(3, ' ');
                let (Some(user), Some(group)) = (it.next(), it.next()) else {
                    return Err(GroupError::Malformed("JOIN <user> <group> <info>".into()));
                };
                self.request_join(user, group, it.next().unwrap_or(""))?;
                Ok("OK".into())
            }
            "APPROVE" => {
                let user = rest.trim();
                if user.is_empty() {
                    return Err(GroupError::Malformed("APPROVE <user>".into()));
                }
                let groups: Vec<String> = self
                    .groups
                    .values()
                    .filter(|g| {
                        g.config.member_records.get(user).is_some_and(|r| r.status == MemberStatus::Pending)
                    })
                    .map(|g| g.config.name.clone())
                    .collect();
                let admin_of: Vec<&String> =
                    groups.iter().filter(|g| self.groups[*g].config.admin_users.contains(session_user)).collect();
                match (groups.len(), admin_of.first()) {
                    (0, _) => Err(GroupError::NoPendingRequest(user.into())),
                    (_, None) => Err(GroupError::NotAdmin(session_user.into())),
                    (_, Some(g)) => {
                        let g = (*g).clone();
                        self.approve(session_user, &g, user)?;
                        Ok("OK".into())
                    }
                }
            }
            "SIGN" => {
                let mut it = rest.split_whitespace();
                let (Some(k), Some(n), None) = (it.next(), it.next(), it.next()) else {
                    return Err(GroupError::Malformed("SIGN <shared_key_hex> <node_id_hex>".into()));
                };
                let key = hex::decode(k).map_err(|_| GroupError::Malformed("shared key hex".into()))?;
                let node: NodeId = n.parse().map_err(|_| GroupError::Malformed("node id hex".into()))?;
                let cert = self.sign_csr(&key, node)?;
                Ok(format!("CERT {}", hex::encode(cert.to_bytes())))
            }
            "CRL?" => {
                let group = rest.trim();
                let users = if group.is_empty() {
                    let names: Vec<String> = self.groups.keys().cloned().collect();
                    let mut all = BTreeSet::new();
                    for n in names {
                        all.extend(self.crl(&n)?);
                    }
                    all.into_iter().collect()
                } else {
                    self.crl(group)?
                };
                Ok(users.join("\n"))
            }
            other => Err(GroupError::Malformed(format!("unknown command {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server() -> GroupServer {
        let mut s = GroupServer::new(1);
        s.create_group("admin", "lab", "10.8.0.0/24".parse().unwrap()).unwrap();
        s
    }

    #[test]
    fn create_and_duplicate() {
        let mut s = server();
        let g = s.group("lab").unwrap();
        assert!(g.admin_users.contains("admin"));
        assert_eq!(g.member_records["admin"].status, MemberStatus::Approved);
        assert_eq!(g.member_records.len(), 1);
        assert_eq!(
            s.create_group("x", "lab", "10.9.0.0/24".parse().unwrap()).unwrap_err(),
            GroupError::NameTaken("lab".into())
        );
    }

    #[test]
    fn join_approve_deny() {
        let mut s = server();
        s.request_join("bob", "lab", "bob@example.org").unwrap();
        assert_eq!(s.approve("bob", "lab", "bob"), Err(GroupError::NotAdmin("bob".into())));
        s.approve("admin", "lab", "bob").unwrap();
        let rec = &s.group("lab").unwrap().member_records["bob"];
        assert_eq!(rec.status, MemberStatus::Approved);
        assert!(rec.shared_key.is_some());
        assert_eq!(s.request_join("bob", "lab", ""), Err(GroupError::AlreadyMember("bob".into())));

        s.request_join("eve", "lab", "").unwrap();
        s.deny("admin", "lab", "eve").unwrap();
        assert!(!s.group("lab").unwrap().member_records.contains_key("eve"));
        s.request_join("eve", "lab", "second try").unwrap();
    }

    #[test]
    fn blobs_need_approval_and_secure_channel() {
        let mut s = server();
        s.request_join("bob", "lab", "").unwrap();
        assert_eq!(s.issue_blob("bob", "lab", Channel::Secure), Err(GroupError::NotApproved("bob".into())));
        s.approve("admin", "lab", "bob").unwrap();
        s.request_join("carol", "lab", "").unwrap();
        s.approve("admin", "lab", "carol").unwrap();
        assert_eq!(s.issue_blob("bob", "lab", Channel::Insecure), Err(GroupError::InsecureChannel));
        let b = s.issue_blob("bob", "lab", Channel::Secure).unwrap();
        let c = s.issue_blob("carol", "lab", Channel::Secure).unwrap();
        assert_ne!(b.shared_key, c.shared_key);
        assert_eq!(b.subnet.to_string(), "10.8.0.0/24");
        assert_eq!(ConfigBlob::from_bytes(&b.to_bytes()).unwrap(), b);
        s.revoke("lab", "bob").unwrap();
        assert_eq!(s.issue_blob("bob", "lab", Channel::Secure), Err(GroupError::NotApproved("bob".into())));
    }

    #[test]
    fn blob_layout_is_length_prefixed() {
        let blob = ConfigBlob {
            group: "g".into(),
            subnet: "10.0.0.0/8".parse().unwrap(),
            shared_key: vec![0xaa, 0xbb],
            ca_key: VerifyingKey(vec![1]),
        };
        let mut want = vec![0, 0, 0, 1, b'g', 0, 0, 0, 10];
        want.extend_from_slice(b"10.0.0.0/8");
        want.extend_from_slice(&[0, 0, 0, 2, 0xaa, 0xbb, 0, 0, 0, 1, 1]);
        assert_eq!(blob.to_bytes(), want);
    }

    #[test]
    fn signing_and_revocation() {
        let mut s = server();
        s.request_join("bob", "lab", "").unwrap();
        s.approve("admin", "lab", "bob").unwrap();
        let blob = s.issue_blob("bob", "lab", Channel::Secure).unwrap();
        let node = NodeId::from_seed(42);
        let cert = s.sign_csr(&blob.shared_key, node).unwrap();
        assert!(cert.verify(&s.scheme(), &blob.ca_key));
        assert_eq!(cert.subject_node, node);
        assert_eq!(s.sign_csr(b"nope", node), Err(GroupError::BadSharedKey));
        assert_eq!(s.revoke("lab", "bob").unwrap(), vec![node]);
        assert_eq!(s.sign_csr(&blob.shared_key, node), Err(GroupError::Revoked("bob".into())));
        assert_eq!(s.revoke("lab", "nobody"), Err(GroupError::UnknownUser("nobody".into())));
        assert_eq!(s.crl("lab").unwrap(), vec!["bob".to_string()]);
    }

    #[test]
    fn line_api() {
        let mut s = server();
        assert_eq!(s.handle_line("bob", "JOIN bob lab student in room 4"), "OK");
        assert_eq!(s.group("lab").unwrap().member_records["bob"].info, "student in room 4");
        assert!(s.handle_line("bob", "APPROVE bob").starts_with("ERR"));
        assert_eq!(s.handle_line("admin", "APPROVE bob"), "OK");
        let key = s.issue_blob("bob", "lab", Channel::Secure).unwrap().shared_key;
        let node = NodeId::from_seed(7);
        let resp = s.handle_line("bob", &format!("SIGN {} {}", hex::encode(&key), node.to_hex()));
        let cert_hex = resp.strip_prefix("CERT ").expect(&resp);
        let cert = Certificate::from_bytes(&hex::decode(cert_hex).unwrap()).unwrap();
        assert_eq!(cert.subject_node, node);
        assert_eq!(s.handle_line("admin", "CRL?"), "");
        s.revoke("lab", "bob").unwrap();
        assert_eq!(s.handle_line("admin", "CRL?"), "bob");
        assert_eq!(s.handle_line("admin", "CRL? lab"), "bob");
        assert!(s.handle_line("x", "FROB").starts_with("ERR"));
        assert!(s.handle_line("x", "SIGN zz").starts_with("ERR"));
    }
}
