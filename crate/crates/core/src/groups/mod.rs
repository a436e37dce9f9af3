//! Group membership, certificates, revocation, and private overlays.

pub mod crypto;
pub mod private;
pub mod revocation;
pub mod server;
pub mod world;

pub use crypto::{Certificate, KeyedMacScheme, Signature, SignatureScheme, SigningKey, VerifyingKey};
pub use private::{broadcast, broadcast_with, hop_diameter, BootstrapOutcome, BroadcastReport, Member, PrivateOverlay};
pub use revocation::{revoke_and_propagate, Learned, RevocationChannel, RevocationConfig, RevocationOutcome};
pub use server::{
    Channel, ConfigBlob, GroupConfig, GroupError, GroupServer, MemberRecord, MemberStatus, RevocationState,
};
