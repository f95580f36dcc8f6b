//! Credential and ticket data model with chain verification.
//!
//! A credential is an issuer public key together with the issuer's signature
//! over a typed subject. A ticket is a payload plus the three-link chain that
//! authorises it: the payload signed by a certified signing key (CSK), the
//! CSK certified by an attestation identity key (AIK), and the AIK certified
//! into a price/value group by the privacy CA. A receiving system accepts a
//! ticket only if every link verifies and the payload hash matches.
//!
//! The signed preimage of every credential includes its subject kind, so a
//! credential issued as one kind can never be replayed as another.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{self, Digest, KeyPair};

/// What a credential certifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectKind {
    /// An AIK bound to a price/value group.
    AikGroup,
    /// A certified signing key, certified by an AIK.
    Csk,
    /// A ticket payload (or redemption acknowledgement) digest.
    Payload,
    /// An endorsement key, certified by its manufacturer.
    Ek,
    /// A PCR-constrained binding key.
    BindingKey,
}

impl SubjectKind {
    pub fn to_u8(self) -> u8 {
        match self {
            SubjectKind::AikGroup => 1,
            SubjectKind::Csk => 2,
            SubjectKind::Payload => 3,
            SubjectKind::Ek => 4,
            SubjectKind::BindingKey => 5,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, CodecError> {
        Ok(match v {
            1 => SubjectKind::AikGroup,
            2 => SubjectKind::Csk,
            3 => SubjectKind::Payload,
            4 => SubjectKind::Ek,
            5 => SubjectKind::BindingKey,
            other => return Err(CodecError::BadTag(other)),
        })
    }
}

/// Cert(entity, certificate): issuer public key plus signature over the
/// typed subject bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub subject_kind: SubjectKind,
    pub subject_bytes: Vec<u8>,
    pub issuer_public: Vec<u8>,
    pub signature: Vec<u8>,
}

/// The digest a credential issuer signs: subject kind byte then subject.
pub fn signing_preimage(kind: SubjectKind, subject_bytes: &[u8]) -> Digest {
    crypto::hash_concat(&[&[kind.to_u8()], subject_bytes])
}

/// Issues a credential over `subject_bytes` with the given key pair.
pub fn make_credential(
    kind: SubjectKind,
    subject_bytes: &[u8],
    issuer: &KeyPair,
) -> Result<Credential, crypto::CryptoError> {
    let preimage = signing_preimage(kind, subject_bytes);
    let signature = issuer.sign(preimage.as_bytes())?;
    Ok(Credential {
        subject_kind: kind,
        subject_bytes: subject_bytes.to_vec(),
        issuer_public: issuer.public().to_vec(),
        signature,
    })
}

/// Checks the credential signature, and the issuer identity when one is
/// expected.
pub fn verify_credential(cred: &Credential, expected_issuer: Option<&[u8]>) -> bool {
    if let Some(expected) = expected_issuer {
        if cred.issuer_public != expected {
            return false;
        }
    }
    let preimage = signing_preimage(cred.subject_kind, &cred.subject_bytes);
    crypto::verify(&cred.issuer_public, &cred.signature, preimage.as_bytes())
}

impl Credential {
    pub fn encode_into(&self, w: &mut Writer) {
        w.u8(crate::codec::WIRE_VERSION);
        w.u8(self.subject_kind.to_u8());
        w.bytes(&self.subject_bytes);
        w.bytes(&self.issuer_public);
        w.bytes(&self.signature);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.into_vec()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.version()?;
        let subject_kind = SubjectKind::from_u8(r.u8()?)?;
        let subject_bytes = r.bytes()?;
        let issuer_public = r.bytes()?;
        let signature = r.bytes()?;
        Ok(Credential { subject_kind, subject_bytes, issuer_public, signature })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let c = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(c)
    }
}

/// A payload and its full credential chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ticket {
    pub payload: Vec<u8>,
    pub cert_payload: Credential,
    pub cert_csk: Credential,
    pub cert_group: Credential,
    pub group_id: u32,
}

impl Ticket {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        w.u32(self.group_id);
        w.bytes(&self.payload);
        self.cert_payload.encode_into(&mut w);
        self.cert_csk.encode_into(&mut w);
        self.cert_group.encode_into(&mut w);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.version()?;
        let group_id = r.u32()?;
        let payload = r.bytes()?;
        let cert_payload = Credential::decode_from(&mut r)?;
        let cert_csk = Credential::decode_from(&mut r)?;
        let cert_group = Credential::decode_from(&mut r)?;
        r.finish()?;
        Ok(Ticket { payload, cert_payload, cert_csk, cert_group, group_id })
    }
}

/// First failing link when a ticket chain is rejected.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ChainReject {
    #[error("ticket names an unknown group")]
    UnknownGroup,
    #[error("group credential invalid")]
    BadGroupCredential,
    #[error("certified-signing-key credential invalid")]
    BadCskCredential,
    #[error("payload signature invalid")]
    BadPayloadSignature,
    #[error("payload does not match its certified digest")]
    PayloadMismatch,
}

/// Outcome of a successful chain verification. The AIK digest is the spend
/// key: one AIK realises one ticket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedTicket {
    pub group_id: u32,
    pub payload: Vec<u8>,
    pub aik_digest: Digest,
    pub attributes: BTreeMap<String, String>,
    pub credential_serial: u64,
}

/// Verifies the full chain Cert(P,CSK), Cert(CSK,AIK), Cert(AIK,g) against
/// the published group keys. Fails at the first bad link.
pub fn verify_ticket_chain(
    ticket: &Ticket,
    known_group_keys: &BTreeMap<u32, Vec<u8>>,
) -> Result<VerifiedTicket, ChainReject> {
    let group_key = known_group_keys.get(&ticket.group_id).ok_or(ChainReject::UnknownGroup)?;

    if ticket.cert_group.subject_kind != SubjectKind::AikGroup
        || !verify_credential(&ticket.cert_group, Some(group_key))
    {
        return Err(ChainReject::BadGroupCredential);
    }
    let group_subject = AikGroupSubject::decode(&ticket.cert_group.subject_bytes)
        .map_err(|_| ChainReject::BadGroupCredential)?;
    if group_subject.group_id != ticket.group_id {
        return Err(ChainReject::BadGroupCredential);
    }

    if ticket.cert_csk.subject_kind != SubjectKind::Csk
        || !verify_credential(&ticket.cert_csk, Some(&group_subject.aik_public))
    {
        return Err(ChainReject::BadCskCredential);
    }
    let csk_info = CertifiedKeyInfo::decode(&ticket.cert_csk.subject_bytes)
        .map_err(|_| ChainReject::BadCskCredential)?;
    if csk_info.key_kind != CertifiedKeyKind::Signing {
        return Err(ChainReject::BadCskCredential);
    }

    if ticket.cert_payload.subject_kind != SubjectKind::Payload
        || !verify_credential(&ticket.cert_payload, Some(&csk_info.key_public))
    {
        return Err(ChainReject::BadPayloadSignature);
    }

    if ticket.cert_payload.subject_bytes != crypto::hash(&ticket.payload).as_bytes() {
        return Err(ChainReject::PayloadMismatch);
    }

    Ok(VerifiedTicket {
        group_id: ticket.group_id,
        payload: ticket.payload.clone(),
        aik_digest: crypto::hash(&group_subject.aik_public),
        attributes: group_subject.attributes,
        credential_serial: group_subject.serial,
    })
}

/// Subject of a group credential: the AIK public key plus the group it was
/// issued into. Deliberately carries no platform-identifying fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AikGroupSubject {
    pub aik_public: Vec<u8>,
    pub group_id: u32,
    pub serial: u64,
    pub attributes: BTreeMap<String, String>,
}

impl AikGroupSubject {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        w.bytes(&self.aik_public);
        w.u32(self.group_id);
        w.u64(self.serial);
        w.u32(self.attributes.len() as u32);
        for (k, v) in &self.attributes {
            w.string(k);
            w.string(v);
        }
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.version()?;
        let aik_public = r.bytes()?;
        let group_id = r.u32()?;
        let serial = r.u64()?;
        let n = r.u32()?;
        let mut attributes = BTreeMap::new();
        for _ in 0..n {
            let k = r.string()?;
            let v = r.string()?;
            attributes.insert(k, v);
        }
        r.finish()?;
        Ok(AikGroupSubject { aik_public, group_id, serial, attributes })
    }
}

/// Usage class of a TPM-certified key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertifiedKeyKind {
    Signing,
    Binding,
}

impl CertifiedKeyKind {
    pub fn to_u8(self) -> u8 {
        match self {
            CertifiedKeyKind::Signing => 1,
            CertifiedKeyKind::Binding => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, CodecError> {
        Ok(match v {
            1 => CertifiedKeyKind::Signing,
            2 => CertifiedKeyKind::Binding,
            other => return Err(CodecError::BadTag(other)),
        })
    }
}

/// A PCR usage constraint: the key's private half works only while the
/// composite over the selected registers equals the recorded value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcrConstraint {
    pub selection: BTreeSet<u32>,
    pub composite: Digest,
}

impl PcrConstraint {
    pub fn encode_into(&self, w: &mut Writer) {
        w.u32(self.selection.len() as u32);
        for idx in &self.selection {
            w.u32(*idx);
        }
        self.composite.encode_into(w);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.u32()?;
        let mut selection = BTreeSet::new();
        for _ in 0..n {
            selection.insert(r.u32()?);
        }
        let composite = Digest::decode_from(r)?;
        Ok(PcrConstraint { selection, composite })
    }
}

/// Subject of a key-certification credential: what the TPM (via an AIK) or
/// the privacy CA states about a held key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertifiedKeyInfo {
    pub key_public: Vec<u8>,
    pub key_kind: CertifiedKeyKind,
    pub pcr_constraint: Option<PcrConstraint>,
    pub nonce: Vec<u8>,
}

impl CertifiedKeyInfo {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        w.bytes(&self.key_public);
        w.u8(self.key_kind.to_u8());
        match &self.pcr_constraint {
            None => w.u8(0),
            Some(c) => {
                w.u8(1);
                c.encode_into(&mut w);
            }
        }
        w.bytes(&self.nonce);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.version()?;
        let key_public = r.bytes()?;
        let key_kind = CertifiedKeyKind::from_u8(r.u8()?)?;
        let pcr_constraint = match r.u8()? {
            0 => None,
            1 => Some(PcrConstraint::decode_from(&mut r)?),
            other => return Err(CodecError::BadTag(other)),
        };
        let nonce = r.bytes()?;
        r.finish()?;
        Ok(CertifiedKeyInfo { key_public, key_kind, pcr_constraint, nonce })
    }
}
