//! Privacy certification authority.
//!
//! Issues group credentials for attestation identity keys. Each group has
//! its own signing key pair, so a verifier learns which group an identity
//! belongs to and nothing else. The activation blob carrying the credential
//! is encrypted to the requesting platform's endorsement key: a software
//! impostor that merely replays an endorsement certificate cannot decrypt
//! it, which closes the issuance handshake without any extra round trip.
//!
//! The authority escrows the identity-to-platform mapping at issuance.
//! Registered receiving systems can later resolve a misbehaving identity;
//! every resolution attempt, granted or refused, lands in the audit log.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::charging::ChargeMode;
use crate::codec::{CodecError, Writer};
use crate::credential::{
    make_credential, verify_credential, AikGroupSubject, CertifiedKeyInfo, CertifiedKeyKind,
    Credential, SubjectKind,
};
use crate::crypto::{self, generate_keypair, CryptoError, DetRng, Digest, KeyPair, SCHEME_SIGN};
use crate::tpm::{composite_of, replay_log, IdentityBinding, MeasurementEvent, QuoteEvidence};

// Domain byte for resolution-request signatures, distinct from credential
// subject kinds and module-internal domains.
const DOMAIN_RESOLVE: u8 = 0x20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PcaError {
    #[error("no such group {0}")]
    UnknownGroup(u32),
    #[error("authorisation denied: {0}")]
    AuthorisationDenied(String),
    #[error("attestation nonce unknown or already used")]
    StaleNonce,
    #[error("no escrow record for this identity")]
    UnknownIdentity,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

fn denied(reason: &str) -> PcaError {
    PcaError::AuthorisationDenied(reason.to_string())
}

/// Group configuration. The key pair is the group identity: everything it
/// signs is attributable to the group, never to a member.
#[derive(Debug)]
pub struct Group {
    pub id: u32,
    pub name: String,
    pub price: i64,
    pub charge_mode: ChargeMode,
    pub attributes: BTreeMap<String, String>,
    keypair: KeyPair,
}

impl Group {
    pub fn public(&self) -> &[u8] {
        self.keypair.public()
    }
}

/// Identity-to-platform mapping retained at issuance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscrowRecord {
    pub aik_digest: Digest,
    pub aik_public: Vec<u8>,
    pub platform_id: Digest,
    pub ek_public: Vec<u8>,
    pub group_id: u32,
    pub serial: u64,
    pub label: String,
}

/// What a platform submits to obtain a group credential.
#[derive(Debug, Clone)]
pub struct IdentityRequest {
    pub binding: IdentityBinding,
    pub ek_public: Vec<u8>,
    pub ek_credential: Credential,
    pub group_id: u32,
}

impl IdentityRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        w.bytes(&self.binding.encode());
        w.bytes(&self.ek_public);
        self.ek_credential.encode_into(&mut w);
        w.u32(self.group_id);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = crate::codec::Reader::new(bytes);
        r.version()?;
        let binding = IdentityBinding::decode(&r.bytes()?)?;
        let ek_public = r.bytes()?;
        let ek_credential = Credential::decode_from(&mut r)?;
        let group_id = r.u32()?;
        r.finish()?;
        Ok(IdentityRequest { binding, ek_public, ek_credential, group_id })
    }
}

/// Issued credential material: the activation blob only the requesting
/// platform's module can open, plus billing data for the charge initiator.
#[derive(Debug, Clone)]
pub struct IssueOutcome {
    pub activation_blob: Vec<u8>,
    pub aik_digest: Digest,
    pub serial: u64,
    pub price: i64,
    pub charge_mode: ChargeMode,
}

/// Signed request from a receiving system to de-pseudonymise an identity.
#[derive(Debug, Clone)]
pub struct ResolveRequest {
    pub aik_digest: Digest,
    pub reason: String,
    pub requester_public: Vec<u8>,
    pub signature: Vec<u8>,
}

fn resolve_preimage(aik_digest: &Digest, reason: &str) -> Digest {
    let mut w = Writer::new();
    w.u8(DOMAIN_RESOLVE);
    aik_digest.encode_into(&mut w);
    w.string(reason);
    crypto::hash(&w.into_vec())
}

impl ResolveRequest {
    pub fn sign(aik_digest: Digest, reason: &str, requester: &KeyPair) -> Self {
        let preimage = resolve_preimage(&aik_digest, reason);
        ResolveRequest {
            aik_digest,
            reason: reason.to_string(),
            requester_public: requester.public().to_vec(),
            signature: requester.sign(preimage.as_bytes()).expect("signing key"),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        self.aik_digest.encode_into(&mut w);
        w.string(&self.reason);
        w.bytes(&self.requester_public);
        w.bytes(&self.signature);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = crate::codec::Reader::new(bytes);
        r.version()?;
        let aik_digest = Digest::decode_from(&mut r)?;
        let reason = r.string()?;
        let requester_public = r.bytes()?;
        let signature = r.bytes()?;
        r.finish()?;
        Ok(ResolveRequest { aik_digest, reason, requester_public, signature })
    }
}

/// Disclosure returned for a granted resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityDisclosure {
    pub platform_id: Digest,
    pub ek_public: Vec<u8>,
    pub group_id: u32,
    pub serial: u64,
}

impl IdentityDisclosure {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        self.platform_id.encode_into(&mut w);
        w.bytes(&self.ek_public);
        w.u32(self.group_id);
        w.u64(self.serial);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = crate::codec::Reader::new(bytes);
        r.version()?;
        let platform_id = Digest::decode_from(&mut r)?;
        let ek_public = r.bytes()?;
        let group_id = r.u32()?;
        let serial = r.u64()?;
        r.finish()?;
        Ok(IdentityDisclosure { platform_id, ek_public, group_id, serial })
    }
}

/// One resolution attempt, kept regardless of outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub aik_digest: Digest,
    pub requester_public: Vec<u8>,
    pub reason: String,
    pub outcome: String,
}

/// Evidence bundle for certifying a PCR-bound binding key.
#[derive(Debug, Clone)]
pub struct CertifyBindingRequest {
    pub quote: QuoteEvidence,
    pub log: Vec<MeasurementEvent>,
    pub key_credential: Credential,
    pub group_credential: Credential,
}

impl CertifyBindingRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        w.bytes(&self.quote.encode());
        w.u32(self.log.len() as u32);
        for ev in &self.log {
            ev.encode_into(&mut w);
        }
        self.key_credential.encode_into(&mut w);
        self.group_credential.encode_into(&mut w);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = crate::codec::Reader::new(bytes);
        r.version()?;
        let quote = QuoteEvidence::decode(&r.bytes()?)?;
        let n = r.u32()?;
        let mut log = Vec::with_capacity(n as usize);
        for _ in 0..n {
            log.push(MeasurementEvent::decode_from(&mut r)?);
        }
        let key_credential = Credential::decode_from(&mut r)?;
        let group_credential = Credential::decode_from(&mut r)?;
        r.finish()?;
        Ok(CertifyBindingRequest { quote, log, key_credential, group_credential })
    }
}

#[derive(Debug)]
pub struct PcaService {
    rng: DetRng,
    /// Signs binding-key certifications; its public half is the trust
    /// anchor content distributors use.
    root: KeyPair,
    trusted_manufacturers: Vec<Vec<u8>>,
    groups: BTreeMap<u32, Group>,
    next_group: u32,
    escrow: BTreeMap<Digest, EscrowRecord>,
    blacklist: BTreeSet<Digest>,
    revoked: BTreeSet<u64>,
    registered_receivers: BTreeSet<Vec<u8>>,
    outstanding_nonces: BTreeSet<Vec<u8>>,
    audit: Vec<AuditEvent>,
    next_serial: u64,
}

impl PcaService {
    pub fn new(mut rng: DetRng) -> Self {
        let root = generate_keypair(&mut rng, SCHEME_SIGN).expect("signing scheme");
        PcaService {
            rng,
            root,
            trusted_manufacturers: Vec::new(),
            groups: BTreeMap::new(),
            next_group: 1,
            escrow: BTreeMap::new(),
            blacklist: BTreeSet::new(),
            revoked: BTreeSet::new(),
            registered_receivers: BTreeSet::new(),
            outstanding_nonces: BTreeSet::new(),
            audit: Vec::new(),
            next_serial: 1,
        }
    }

    pub fn root_public(&self) -> &[u8] {
        self.root.public()
    }

    pub fn trust_manufacturer(&mut self, manufacturer_public: &[u8]) {
        self.trusted_manufacturers.push(manufacturer_public.to_vec());
    }

    pub fn register_receiver(&mut self, rs_public: &[u8]) {
        self.registered_receivers.insert(rs_public.to_vec());
    }

    pub fn create_group(
        &mut self,
        name: &str,
        price: i64,
        charge_mode: ChargeMode,
        attributes: BTreeMap<String, String>,
    ) -> u32 {
        let id = self.next_group;
        self.next_group += 1;
        let keypair = generate_keypair(&mut self.rng, SCHEME_SIGN).expect("signing scheme");
        self.groups.insert(
            id,
            Group { id, name: name.to_string(), price, charge_mode, attributes, keypair },
        );
        id
    }

    pub fn group(&self, id: u32) -> Option<&Group> {
        self.groups.get(&id)
    }

    /// Published directory mapping group ids to their verification keys.
    pub fn group_keys(&self) -> BTreeMap<u32, Vec<u8>> {
        self.groups.iter().map(|(id, g)| (*id, g.keypair.public().to_vec())).collect()
    }

    pub fn escrow_record(&self, aik_digest: &Digest) -> Option<&EscrowRecord> {
        self.escrow.get(aik_digest)
    }

    pub fn escrow_count(&self) -> usize {
        self.escrow.len()
    }

    pub fn blacklist_platform(&mut self, platform_id: Digest) {
        self.blacklist.insert(platform_id);
    }

    pub fn is_blacklisted(&self, platform_id: &Digest) -> bool {
        self.blacklist.contains(platform_id)
    }

    pub fn revoke_credential(&mut self, serial: u64) {
        self.revoked.insert(serial);
    }

    /// Published list receiving systems poll to reject revoked credentials.
    pub fn revoked_serials(&self) -> &BTreeSet<u64> {
        &self.revoked
    }

    pub fn audit_log(&self) -> &[AuditEvent] {
        &self.audit
    }

    fn manufacturer_trusted(&self, ek_credential: &Credential) -> bool {
        self.trusted_manufacturers
            .iter()
            .any(|m| verify_credential(ek_credential, Some(m)))
    }

    /// Issues a group credential for a fresh identity key.
    ///
    /// Checks, in order: the group exists; the endorsement certificate
    /// chains to a trusted manufacturer and names the submitted key; the
    /// identity binding proves possession; the platform is not blacklisted;
    /// the identity has not been certified before. Only then is the
    /// credential built, escrowed, and sealed to the endorsement key.
    pub fn issue(&mut self, request: &IdentityRequest) -> Result<IssueOutcome, PcaError> {
        let group =
            self.groups.get(&request.group_id).ok_or(PcaError::UnknownGroup(request.group_id))?;

        if request.ek_credential.subject_kind != SubjectKind::Ek
            || request.ek_credential.subject_bytes != request.ek_public
            || !self.manufacturer_trusted(&request.ek_credential)
        {
            return Err(denied("endorsement certificate not trusted"));
        }
        if !request.binding.verify() {
            return Err(denied("identity binding does not prove possession"));
        }
        let platform_id = crypto::hash(&request.ek_public);
        if self.blacklist.contains(&platform_id) {
            return Err(denied("platform is blacklisted"));
        }
        let aik_digest = crypto::hash(&request.binding.aik_public);
        if self.escrow.contains_key(&aik_digest) {
            return Err(denied("identity already certified"));
        }

        let serial = self.next_serial;
        self.next_serial += 1;
        let subject = AikGroupSubject {
            aik_public: request.binding.aik_public.clone(),
            group_id: group.id,
            serial,
            attributes: group.attributes.clone(),
        };
        let credential = make_credential(SubjectKind::AikGroup, &subject.encode(), &group.keypair)?;
        let activation_blob =
            crypto::encrypt_to(&mut self.rng, &request.ek_public, &credential.encode())?;

        self.escrow.insert(
            aik_digest,
            EscrowRecord {
                aik_digest,
                aik_public: request.binding.aik_public.clone(),
                platform_id,
                ek_public: request.ek_public.clone(),
                group_id: request.group_id,
                serial,
                label: request.binding.label.clone(),
            },
        );

        Ok(IssueOutcome {
            activation_blob,
            aik_digest,
            serial,
            price: group.price,
            charge_mode: group.charge_mode,
        })
    }

    /// De-pseudonymises an identity for a registered receiving system.
    /// Every attempt is audited; refusals never reveal whether the identity
    /// exists.
    pub fn resolve_identity(
        &mut self,
        request: &ResolveRequest,
    ) -> Result<IdentityDisclosure, PcaError> {
        let mut audit = AuditEvent {
            aik_digest: request.aik_digest,
            requester_public: request.requester_public.clone(),
            reason: request.reason.clone(),
            outcome: String::new(),
        };

        if !self.registered_receivers.contains(&request.requester_public) {
            audit.outcome = "refused: requester not registered".to_string();
            self.audit.push(audit);
            return Err(denied("requester not registered"));
        }
        let preimage = resolve_preimage(&request.aik_digest, &request.reason);
        if !crypto::verify(&request.requester_public, &request.signature, preimage.as_bytes()) {
            audit.outcome = "refused: bad signature".to_string();
            self.audit.push(audit);
            return Err(denied("request signature invalid"));
        }
        match self.escrow.get(&request.aik_digest) {
            None => {
                audit.outcome = "refused: unknown identity".to_string();
                self.audit.push(audit);
                Err(PcaError::UnknownIdentity)
            }
            Some(record) => {
                audit.outcome = "granted".to_string();
                self.audit.push(audit);
                Ok(IdentityDisclosure {
                    platform_id: record.platform_id,
                    ek_public: record.ek_public.clone(),
                    group_id: record.group_id,
                    serial: record.serial,
                })
            }
        }
    }

    /// Starts an attestation session; the returned nonce must come back
    /// inside the quote and the key certification, and is consumed on use.
    pub fn begin_attestation(&mut self) -> Vec<u8> {
        let nonce = self.rng.bytes(16);
        self.outstanding_nonces.insert(nonce.clone());
        nonce
    }

    /// Certifies a binding key against attested platform state.
    ///
    /// The caller proves group membership, quotes the selected PCRs with
    /// the session nonce, and presents the module's own certification of
    /// the key. The issued credential re-states the key under the authority
    /// root, so distributors need only that one anchor.
    pub fn certify_binding_key(
        &mut self,
        request: &CertifyBindingRequest,
    ) -> Result<Credential, PcaError> {
        if !self.outstanding_nonces.remove(&request.quote.nonce) {
            return Err(PcaError::StaleNonce);
        }

        let group_subject = match request.group_credential.subject_kind {
            SubjectKind::AikGroup => {
                let group_id = AikGroupSubject::decode(&request.group_credential.subject_bytes)?
                    .group_id;
                let group =
                    self.groups.get(&group_id).ok_or(PcaError::UnknownGroup(group_id))?;
                if !verify_credential(&request.group_credential, Some(group.keypair.public())) {
                    return Err(denied("group credential invalid"));
                }
                AikGroupSubject::decode(&request.group_credential.subject_bytes)?
            }
            _ => return Err(denied("group credential invalid")),
        };
        if request.quote.aik_public != group_subject.aik_public {
            return Err(denied("quote not signed by the certified identity"));
        }
        if !request.quote.verify_signature() {
            return Err(denied("quote signature invalid"));
        }
        let replayed = replay_log(&request.log).map_err(|_| denied("measurement log invalid"))?;
        let expected = composite_of(&replayed, &request.quote.selection)
            .map_err(|_| denied("measurement log invalid"))?;
        if expected != request.quote.composite {
            return Err(denied("quoted composite does not match the log"));
        }

        if request.key_credential.subject_kind != SubjectKind::BindingKey
            || !verify_credential(&request.key_credential, Some(&group_subject.aik_public))
        {
            return Err(denied("key certification invalid"));
        }
        let info = CertifiedKeyInfo::decode(&request.key_credential.subject_bytes)?;
        if info.key_kind != CertifiedKeyKind::Binding {
            return Err(denied("certified key is not a binding key"));
        }
        if info.nonce != request.quote.nonce {
            return Err(denied("key certification is not bound to this session"));
        }
        match &info.pcr_constraint {
            Some(c)
                if c.selection == request.quote.selection
                    && c.composite == request.quote.composite => {}
            _ => return Err(denied("key is not locked to the attested state")),
        }

        Ok(make_credential(SubjectKind::BindingKey, &info.encode(), &self.root)?)
    }

    /// Statement for operators: groups, escrow size, revocations, audit.
    pub fn ledger_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for g in self.groups.values() {
            lines.push(format!(
                "group {} {} price {} mode {}",
                g.id,
                g.name,
                g.price,
                g.charge_mode.as_str()
            ));
        }
        lines.push(format!("escrow_records {}", self.escrow.len()));
        for serial in &self.revoked {
            lines.push(format!("revoked_serial {serial}"));
        }
        for (platform, _) in self.blacklist.iter().zip(0u32..) {
            lines.push(format!("blacklisted_platform {}", platform.to_hex()));
        }
        for ev in &self.audit {
            lines.push(format!(
                "resolve {} reason \"{}\" outcome \"{}\"",
                ev.aik_digest.to_hex(),
                ev.reason,
                ev.outcome
            ));
        }
        lines
    }
}
