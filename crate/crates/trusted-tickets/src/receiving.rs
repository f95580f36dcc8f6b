//! Receiving system: the service-side ticket acceptor.
//!
//! Verifies the full credential chain of a submitted ticket, enforces the
//! one-identity-one-spend rule, and returns a signed acknowledgement the
//! client can hold the operator to. The spend ledger is keyed by the digest
//! of the attestation identity key: however many payloads an identity
//! signs, only the first submission is honoured.
//!
//! Every submission attempt, well-formed or not, is journaled. The journal
//! is the evidence base for misbehaviour reports to the privacy CA.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::credential::{make_credential, ChainReject, Credential, SubjectKind, Ticket};
use crate::crypto::{self, Digest, KeyPair};
use crate::pca::ResolveRequest;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RsError {
    #[error("ticket bytes do not decode")]
    MalformedTicket,
    #[error(transparent)]
    Chain(#[from] ChainReject),
    #[error("credential serial has been revoked")]
    RevokedCredential,
    #[error("identity has already redeemed a ticket")]
    AlreadySpent,
    #[error("identity does not appear in the submission journal")]
    UnknownIdentity,
}

/// Verification inputs that may change at runtime: the published group key
/// directory and the revocation list. Swapped atomically as a unit so a
/// submission never sees half an update.
#[derive(Debug, Clone, Default)]
pub struct RsPolicy {
    pub group_keys: BTreeMap<u32, Vec<u8>>,
    pub revoked_serials: BTreeSet<u64>,
}

impl RsPolicy {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = crate::codec::Writer::versioned();
        w.u32(self.group_keys.len() as u32);
        for (id, key) in &self.group_keys {
            w.u32(*id);
            w.bytes(key);
        }
        w.u32(self.revoked_serials.len() as u32);
        for serial in &self.revoked_serials {
            w.u64(*serial);
        }
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, crate::codec::CodecError> {
        let mut r = crate::codec::Reader::new(bytes);
        r.version()?;
        let n = r.u32()?;
        let mut group_keys = BTreeMap::new();
        for _ in 0..n {
            let id = r.u32()?;
            group_keys.insert(id, r.bytes()?);
        }
        let m = r.u32()?;
        let mut revoked_serials = BTreeSet::new();
        for _ in 0..m {
            revoked_serials.insert(r.u64()?);
        }
        r.finish()?;
        Ok(RsPolicy { group_keys, revoked_serials })
    }
}

/// One submission attempt. Fields are absent when the ticket never got far
/// enough to produce them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub seq: u64,
    pub aik_digest: Option<Digest>,
    pub group_id: Option<u32>,
    pub payload_digest: Option<Digest>,
    pub outcome: String,
}

#[derive(Debug, Default)]
struct SpendLedger {
    spent: BTreeSet<Digest>,
    journal: Vec<JournalEntry>,
    next_seq: u64,
}

impl SpendLedger {
    fn record(
        &mut self,
        aik_digest: Option<Digest>,
        group_id: Option<u32>,
        payload_digest: Option<Digest>,
        outcome: &str,
    ) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.journal.push(JournalEntry {
            seq,
            aik_digest,
            group_id,
            payload_digest,
            outcome: outcome.to_string(),
        });
    }
}

/// Digest a redemption acknowledgement certifies: the payload bound to the
/// identity that spent it.
pub fn ack_subject(payload: &[u8], aik_digest: &Digest) -> Digest {
    crypto::hash_concat(&[payload, aik_digest.as_bytes()])
}

/// Checks an acknowledgement against the receiving system's public key and
/// the redemption it should cover.
pub fn verify_ack(
    ack: &Credential,
    rs_public: &[u8],
    payload: &[u8],
    aik_digest: &Digest,
) -> bool {
    ack.subject_kind == SubjectKind::Payload
        && ack.subject_bytes == ack_subject(payload, aik_digest).as_bytes()
        && crate::credential::verify_credential(ack, Some(rs_public))
}

pub struct ReceivingSystem {
    keypair: KeyPair,
    policy: RwLock<Arc<RsPolicy>>,
    ledger: Mutex<SpendLedger>,
}

impl std::fmt::Debug for ReceivingSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReceivingSystem")
            .field("public", &hex::encode(self.keypair.public()))
            .finish_non_exhaustive()
    }
}

impl ReceivingSystem {
    pub fn new(keypair: KeyPair, policy: RsPolicy) -> Self {
        ReceivingSystem {
            keypair,
            policy: RwLock::new(Arc::new(policy)),
            ledger: Mutex::new(SpendLedger::default()),
        }
    }

    pub fn public(&self) -> Vec<u8> {
        self.keypair.public().to_vec()
    }

    /// Replaces the group-key directory and revocation list in one step.
    pub fn set_policy(&self, policy: RsPolicy) {
        *self.policy.write().expect("policy lock") = Arc::new(policy);
    }

    pub fn policy(&self) -> Arc<RsPolicy> {
        self.policy.read().expect("policy lock").clone()
    }

    /// Verifies and spends a ticket, returning the signed acknowledgement.
    ///
    /// The identity is marked spent inside the ledger lock before the
    /// acknowledgement is built, so with concurrent submitters at most one
    /// caller per identity ever receives an acknowledgement.
    pub fn redeem(&self, ticket_bytes: &[u8]) -> Result<Credential, RsError> {
        let ticket = match Ticket::decode(ticket_bytes) {
            Ok(t) => t,
            Err(_) => {
                let mut ledger = self.ledger.lock().expect("ledger lock");
                ledger.record(None, None, None, "rejected: malformed");
                return Err(RsError::MalformedTicket);
            }
        };
        let payload_digest = crypto::hash(&ticket.payload);
        let policy = self.policy();

        let verified = match crate::credential::verify_ticket_chain(&ticket, &policy.group_keys) {
            Ok(v) => v,
            Err(reject) => {
                let mut ledger = self.ledger.lock().expect("ledger lock");
                ledger.record(
                    None,
                    Some(ticket.group_id),
                    Some(payload_digest),
                    &format!("rejected: {reject:?}"),
                );
                return Err(reject.into());
            }
        };

        if policy.revoked_serials.contains(&verified.credential_serial) {
            let mut ledger = self.ledger.lock().expect("ledger lock");
            ledger.record(
                Some(verified.aik_digest),
                Some(verified.group_id),
                Some(payload_digest),
                "rejected: revoked",
            );
            return Err(RsError::RevokedCredential);
        }

        {
            let mut ledger = self.ledger.lock().expect("ledger lock");
            if !ledger.spent.insert(verified.aik_digest) {
                ledger.record(
                    Some(verified.aik_digest),
                    Some(verified.group_id),
                    Some(payload_digest),
                    "rejected: already spent",
                );
                return Err(RsError::AlreadySpent);
            }
            ledger.record(
                Some(verified.aik_digest),
                Some(verified.group_id),
                Some(payload_digest),
                "accepted",
            );
        }

        let subject = ack_subject(&verified.payload, &verified.aik_digest);
        let ack = make_credential(SubjectKind::Payload, subject.as_bytes(), &self.keypair)
            .expect("signing key");
        Ok(ack)
    }

    pub fn spent_count(&self) -> usize {
        self.ledger.lock().expect("ledger lock").spent.len()
    }

    pub fn is_spent(&self, aik_digest: &Digest) -> bool {
        self.ledger.lock().expect("ledger lock").spent.contains(aik_digest)
    }

    pub fn journal(&self) -> Vec<JournalEntry> {
        self.ledger.lock().expect("ledger lock").journal.clone()
    }

    /// Builds a signed resolution request for an identity this system has
    /// actually seen; the journal is the admissible evidence.
    pub fn report_misbehaviour(
        &self,
        aik_digest: Digest,
        reason: &str,
    ) -> Result<ResolveRequest, RsError> {
        let seen = {
            let ledger = self.ledger.lock().expect("ledger lock");
            ledger.journal.iter().any(|e| e.aik_digest == Some(aik_digest))
        };
        if !seen {
            return Err(RsError::UnknownIdentity);
        }
        Ok(ResolveRequest::sign(aik_digest, reason, &self.keypair))
    }

    /// Statement for operators: spends, then the journal.
    pub fn ledger_lines(&self) -> Vec<String> {
        let ledger = self.ledger.lock().expect("ledger lock");
        let mut lines = Vec::new();
        lines.push(format!("spent_identities {}", ledger.spent.len()));
        for entry in &ledger.journal {
            let aik = entry
                .aik_digest
                .map(|d| d.to_hex())
                .unwrap_or_else(|| "-".to_string());
            let group = entry
                .group_id
                .map(|g| g.to_string())
                .unwrap_or_else(|| "-".to_string());
            let payload = entry
                .payload_digest
                .map(|d| d.to_hex())
                .unwrap_or_else(|| "-".to_string());
            lines.push(format!(
                "submission {} aik {} group {} payload {} {}",
                entry.seq, aik, group, payload, entry.outcome
            ));
        }
        lines
    }
}
