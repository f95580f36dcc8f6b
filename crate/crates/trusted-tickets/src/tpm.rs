//! Software emulation of a trusted platform module.
//!
//! Each [`Tpm`] owns an endorsement key (EK) certified by its
//! [`Manufacturer`], a bank of platform configuration registers (PCRs) with a
//! measurement log, and a shielded key store. Private key material never
//! crosses the API boundary in the clear: keys leave only inside wrapped
//! blobs encrypted under an EK-derived storage secret, and the EK itself
//! never leaves at all.
//!
//! Usage rules the emulator enforces:
//! - every key operation except PCR access requires the owner proof
//!   established by [`Tpm::take_ownership`];
//! - attestation identity keys (AIKs) sign only TPM-internal structures
//!   (identity bindings, key certifications, quotes), never caller data;
//! - a key with a PCR constraint works only while the composite over the
//!   selected registers matches the value recorded at creation.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::credential::{
    make_credential, CertifiedKeyInfo, CertifiedKeyKind, Credential, PcrConstraint, SubjectKind,
};
use crate::crypto::{
    self, generate_keypair, CryptoError, DetRng, Digest, KeyPair, SCHEME_ENCRYPT, SCHEME_SIGN,
};

/// Number of platform configuration registers.
pub const PCR_COUNT: u32 = 24;

/// Reserved handle of the endorsement key.
pub const EK_HANDLE: u64 = 0;

// Leading bytes that separate the preimages of TPM-internal signatures from
// each other and from credential signatures (whose domain bytes are the
// subject kinds 1..=5).
const DOMAIN_IDENTITY: u8 = 0x10;
const DOMAIN_QUOTE: u8 = 0x11;

// Inner tags of wrapped key blobs.
const KIND_AIK: u8 = 1;
const KIND_SIGNING: u8 = 2;
const KIND_BINDING: u8 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TpmError {
    #[error("ownership already taken")]
    AlreadyOwned,
    #[error("no owner established")]
    NotOwned,
    #[error("owner proof does not match")]
    BadOwnerProof,
    #[error("pcr index {0} out of range")]
    BadIndex(u32),
    #[error("no key at handle {0}")]
    BadHandle(u64),
    #[error("operation not permitted for this key type")]
    KeyUsageViolation,
    #[error("blob subject does not match the named key")]
    SubjectMismatch,
    #[error("identity already activated")]
    AlreadyActivated,
    #[error("identity key has no activated credential")]
    AikNotActivated,
    #[error("pcr state does not satisfy the key or blob constraint")]
    PcrMismatch,
    #[error("blob was not produced by or for this module")]
    ForeignBlob,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Role a stored key plays; determines which operations accept it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyRole {
    Endorsement,
    Identity,
    Signing,
    Binding,
}

#[derive(Debug, Clone)]
struct KeyRecord {
    role: KeyRole,
    keypair: KeyPair,
    constraint: Option<PcrConstraint>,
    /// Identity keys only: set once an activation blob has been accepted.
    activated: bool,
}

/// One `extend` operation as recorded in the measurement log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementEvent {
    pub pcr_index: u32,
    pub measurement: Digest,
    pub description: String,
}

impl MeasurementEvent {
    pub fn encode_into(&self, w: &mut Writer) {
        w.u32(self.pcr_index);
        self.measurement.encode_into(w);
        w.string(&self.description);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let pcr_index = r.u32()?;
        let measurement = Digest::decode_from(r)?;
        let description = r.string()?;
        Ok(MeasurementEvent { pcr_index, measurement, description })
    }
}

/// Statement an AIK makes about its own public key during identity creation.
/// The privacy CA checks it before issuing a group credential.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityBinding {
    pub label: String,
    pub aik_public: Vec<u8>,
    pub signature: Vec<u8>,
}

fn identity_preimage(label: &str, aik_public: &[u8]) -> Digest {
    let mut w = Writer::new();
    w.u8(DOMAIN_IDENTITY);
    w.string(label);
    w.bytes(aik_public);
    crypto::hash(&w.into_vec())
}

impl IdentityBinding {
    /// Checks the self-signature, proving possession of the AIK private half.
    pub fn verify(&self) -> bool {
        let preimage = identity_preimage(&self.label, &self.aik_public);
        crypto::verify(&self.aik_public, &self.signature, preimage.as_bytes())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        w.string(&self.label);
        w.bytes(&self.aik_public);
        w.bytes(&self.signature);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.version()?;
        let label = r.string()?;
        let aik_public = r.bytes()?;
        let signature = r.bytes()?;
        r.finish()?;
        Ok(IdentityBinding { label, aik_public, signature })
    }
}

/// AIK-signed statement of the composite over a PCR selection, bound to a
/// verifier-chosen nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuoteEvidence {
    pub selection: BTreeSet<u32>,
    pub composite: Digest,
    pub nonce: Vec<u8>,
    pub aik_public: Vec<u8>,
    pub signature: Vec<u8>,
}

fn quote_preimage(selection: &BTreeSet<u32>, composite: &Digest, nonce: &[u8]) -> Digest {
    let mut w = Writer::new();
    w.u8(DOMAIN_QUOTE);
    w.u32(selection.len() as u32);
    for idx in selection {
        w.u32(*idx);
    }
    composite.encode_into(&mut w);
    w.bytes(nonce);
    crypto::hash(&w.into_vec())
}

impl QuoteEvidence {
    /// Checks the quote signature only; callers separately replay the
    /// measurement log to decide whether the composite is acceptable.
    pub fn verify_signature(&self) -> bool {
        let preimage = quote_preimage(&self.selection, &self.composite, &self.nonce);
        crypto::verify(&self.aik_public, &self.signature, preimage.as_bytes())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::versioned();
        w.u32(self.selection.len() as u32);
        for idx in &self.selection {
            w.u32(*idx);
        }
        self.composite.encode_into(&mut w);
        w.bytes(&self.nonce);
        w.bytes(&self.aik_public);
        w.bytes(&self.signature);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.version()?;
        let n = r.u32()?;
        let mut selection = BTreeSet::new();
        for _ in 0..n {
            selection.insert(r.u32()?);
        }
        let composite = Digest::decode_from(&mut r)?;
        let nonce = r.bytes()?;
        let aik_public = r.bytes()?;
        let signature = r.bytes()?;
        r.finish()?;
        Ok(QuoteEvidence { selection, composite, nonce, aik_public, signature })
    }
}

/// Composite digest over PCR values: concatenation of the selected registers
/// in ascending index order, hashed. The empty selection hashes nothing.
pub fn composite_of(values: &[Digest], selection: &BTreeSet<u32>) -> Result<Digest, TpmError> {
    let mut parts: Vec<&[u8]> = Vec::with_capacity(selection.len());
    for idx in selection {
        let v = values.get(*idx as usize).ok_or(TpmError::BadIndex(*idx))?;
        parts.push(v.as_bytes());
    }
    Ok(crypto::hash_concat(&parts))
}

/// Recomputes the PCR bank a measurement log describes, starting from
/// all-zero registers.
pub fn replay_log(events: &[MeasurementEvent]) -> Result<Vec<Digest>, TpmError> {
    let mut values = vec![Digest::zero(); PCR_COUNT as usize];
    for ev in events {
        let idx = ev.pcr_index as usize;
        if idx >= values.len() {
            return Err(TpmError::BadIndex(ev.pcr_index));
        }
        values[idx] = crypto::hash_concat(&[values[idx].as_bytes(), ev.measurement.as_bytes()]);
    }
    Ok(values)
}

/// Issues endorsement keys and their certificates. A verifier that trusts
/// the manufacturer public key thereby trusts every module it produced.
#[derive(Debug)]
pub struct Manufacturer {
    keypair: KeyPair,
    rng: DetRng,
    next_serial: u64,
}

impl Manufacturer {
    pub fn new(mut rng: DetRng) -> Self {
        let keypair = generate_keypair(&mut rng, SCHEME_SIGN).expect("signing scheme");
        Manufacturer { keypair, rng, next_serial: 0 }
    }

    pub fn public(&self) -> &[u8] {
        self.keypair.public()
    }

    /// Produces a module with a fresh certified endorsement key.
    pub fn manufacture(&mut self) -> Tpm {
        let serial = self.next_serial;
        self.next_serial += 1;
        let ek = generate_keypair(&mut self.rng, SCHEME_ENCRYPT).expect("encrypt scheme");
        let ek_credential =
            make_credential(SubjectKind::Ek, ek.public(), &self.keypair).expect("sign EKC");
        let rng = self.rng.fork(&format!("tpm-{serial}"));
        Tpm::new(ek, ek_credential, rng)
    }
}

/// The emulated module.
#[derive(Debug)]
pub struct Tpm {
    ek_credential: Credential,
    owner: Option<Digest>,
    pcr: Vec<Digest>,
    log: Vec<MeasurementEvent>,
    keys: BTreeMap<u64, KeyRecord>,
    next_handle: u64,
    rng: DetRng,
}

impl Tpm {
    fn new(ek: KeyPair, ek_credential: Credential, rng: DetRng) -> Self {
        let mut keys = BTreeMap::new();
        keys.insert(
            EK_HANDLE,
            KeyRecord { role: KeyRole::Endorsement, keypair: ek, constraint: None, activated: false },
        );
        Tpm {
            ek_credential,
            owner: None,
            pcr: vec![Digest::zero(); PCR_COUNT as usize],
            log: Vec::new(),
            keys,
            next_handle: 1,
            rng,
        }
    }

    pub fn ek_public(&self) -> &[u8] {
        self.keys[&EK_HANDLE].keypair.public()
    }

    pub fn ek_credential(&self) -> &Credential {
        &self.ek_credential
    }

    /// Stable pseudonymous identifier of the platform, derived from the EK
    /// public half. Only parties that already know the EK can link it.
    pub fn platform_id(&self) -> Digest {
        crypto::hash(self.ek_public())
    }

    fn ek_keypair(&self) -> &KeyPair {
        &self.keys[&EK_HANDLE].keypair
    }

    /// AEAD key for wrapped and sealed blobs. Derived from the EK private
    /// half, so blobs are useless to any other module.
    fn storage_secret(&self, label: &str) -> [u8; 32] {
        let mut key = [0u8; 32];
        let d = crypto::hash_concat(&[&self.ek_keypair().export_private(), label.as_bytes()]);
        key.copy_from_slice(d.as_bytes());
        key
    }

    // ---- ownership ----

    pub fn take_ownership(&mut self, owner_secret: &[u8]) -> Result<(), TpmError> {
        if self.owner.is_some() {
            return Err(TpmError::AlreadyOwned);
        }
        self.owner = Some(crypto::hash(owner_secret));
        Ok(())
    }

    pub fn is_owned(&self) -> bool {
        self.owner.is_some()
    }

    fn check_owner(&self, proof: &Digest) -> Result<(), TpmError> {
        match &self.owner {
            None => Err(TpmError::NotOwned),
            Some(stored) if stored == proof => Ok(()),
            Some(_) => Err(TpmError::BadOwnerProof),
        }
    }

    // ---- PCRs ----

    /// Folds a measurement into a register: new = H(old || measurement).
    pub fn pcr_extend(
        &mut self,
        index: u32,
        measurement: &Digest,
        description: &str,
    ) -> Result<Digest, TpmError> {
        let slot =
            self.pcr.get_mut(index as usize).ok_or(TpmError::BadIndex(index))?;
        *slot = crypto::hash_concat(&[slot.as_bytes(), measurement.as_bytes()]);
        let updated = *slot;
        self.log.push(MeasurementEvent {
            pcr_index: index,
            measurement: *measurement,
            description: description.to_string(),
        });
        Ok(updated)
    }

    pub fn pcr_read(&self, index: u32) -> Result<Digest, TpmError> {
        self.pcr.get(index as usize).copied().ok_or(TpmError::BadIndex(index))
    }

    pub fn pcr_composite(&self, selection: &BTreeSet<u32>) -> Result<Digest, TpmError> {
        composite_of(&self.pcr, selection)
    }

    pub fn measurement_log(&self) -> &[MeasurementEvent] {
        &self.log
    }

    // ---- key lifecycle ----

    fn insert_key(&mut self, record: KeyRecord) -> u64 {
        let handle = self.next_handle;
        self.next_handle += 1;
        self.keys.insert(handle, record);
        handle
    }

    fn record(&self, handle: u64) -> Result<&KeyRecord, TpmError> {
        self.keys.get(&handle).ok_or(TpmError::BadHandle(handle))
    }

    /// Creates an identity key and the self-signed binding the privacy CA
    /// will verify. The key is unusable for certification until an
    /// activation blob for it is accepted.
    pub fn make_identity(
        &mut self,
        owner_proof: &Digest,
        label: &str,
    ) -> Result<(u64, IdentityBinding), TpmError> {
        self.check_owner(owner_proof)?;
        let keypair = generate_keypair(&mut self.rng, SCHEME_SIGN)?;
        let preimage = identity_preimage(label, keypair.public());
        let signature = keypair.sign(preimage.as_bytes())?;
        let binding = IdentityBinding {
            label: label.to_string(),
            aik_public: keypair.public().to_vec(),
            signature,
        };
        let handle = self.insert_key(KeyRecord {
            role: KeyRole::Identity,
            keypair,
            constraint: None,
            activated: false,
        });
        Ok((handle, binding))
    }

    /// Decrypts an activation blob with the EK and releases the enclosed
    /// group credential, provided it names the identity key at `handle`.
    /// Only the module holding the EK the blob was encrypted to ever sees
    /// the credential, which is what proves the platform is genuine.
    pub fn activate_identity(
        &mut self,
        owner_proof: &Digest,
        handle: u64,
        blob: &[u8],
    ) -> Result<Credential, TpmError> {
        self.check_owner(owner_proof)?;
        let record = self.record(handle)?;
        if record.role != KeyRole::Identity {
            return Err(TpmError::KeyUsageViolation);
        }
        if record.activated {
            return Err(TpmError::AlreadyActivated);
        }
        let aik_public = record.keypair.public().to_vec();
        let plaintext =
            self.ek_keypair().decrypt(blob).map_err(|_| TpmError::ForeignBlob)?;
        let credential = Credential::decode(&plaintext)?;
        if credential.subject_kind != SubjectKind::AikGroup {
            return Err(TpmError::SubjectMismatch);
        }
        let subject = crate::credential::AikGroupSubject::decode(&credential.subject_bytes)?;
        if subject.aik_public != aik_public {
            return Err(TpmError::SubjectMismatch);
        }
        self.keys.get_mut(&handle).expect("checked above").activated = true;
        Ok(credential)
    }

    /// Generates a signing key, optionally locked to the current composite
    /// over `constrain_to`.
    pub fn create_signing_key(
        &mut self,
        owner_proof: &Digest,
        constrain_to: Option<&BTreeSet<u32>>,
    ) -> Result<u64, TpmError> {
        self.check_owner(owner_proof)?;
        let constraint = self.current_constraint(constrain_to)?;
        let keypair = generate_keypair(&mut self.rng, SCHEME_SIGN)?;
        Ok(self.insert_key(KeyRecord {
            role: KeyRole::Signing,
            keypair,
            constraint,
            activated: false,
        }))
    }

    /// Generates a decryption key for inbound content, optionally locked to
    /// the current composite over `constrain_to`.
    pub fn create_binding_key(
        &mut self,
        owner_proof: &Digest,
        constrain_to: Option<&BTreeSet<u32>>,
    ) -> Result<u64, TpmError> {
        self.check_owner(owner_proof)?;
        let constraint = self.current_constraint(constrain_to)?;
        let keypair = generate_keypair(&mut self.rng, SCHEME_ENCRYPT)?;
        Ok(self.insert_key(KeyRecord {
            role: KeyRole::Binding,
            keypair,
            constraint,
            activated: false,
        }))
    }

    fn current_constraint(
        &self,
        selection: Option<&BTreeSet<u32>>,
    ) -> Result<Option<PcrConstraint>, TpmError> {
        match selection {
            None => Ok(None),
            Some(sel) => Ok(Some(PcrConstraint {
                selection: sel.clone(),
                composite: self.pcr_composite(sel)?,
            })),
        }
    }

    pub fn key_public(&self, handle: u64) -> Result<Vec<u8>, TpmError> {
        Ok(self.record(handle)?.keypair.public().to_vec())
    }

    pub fn key_role(&self, handle: u64) -> Result<KeyRole, TpmError> {
        Ok(self.record(handle)?.role)
    }

    pub fn loaded_handles(&self) -> Vec<u64> {
        self.keys.keys().copied().collect()
    }

    /// Removes a key from the store. The endorsement key is not evictable.
    pub fn evict_key(&mut self, owner_proof: &Digest, handle: u64) -> Result<(), TpmError> {
        self.check_owner(owner_proof)?;
        if handle == EK_HANDLE {
            return Err(TpmError::KeyUsageViolation);
        }
        self.keys.remove(&handle).ok_or(TpmError::BadHandle(handle))?;
        Ok(())
    }

    /// Exports a key as an encrypted blob for offline storage. The blob can
    /// only be loaded back into this same module.
    pub fn wrap_key(&mut self, owner_proof: &Digest, handle: u64) -> Result<Vec<u8>, TpmError> {
        self.check_owner(owner_proof)?;
        let record = self.record(handle)?;
        let kind = match record.role {
            KeyRole::Endorsement => return Err(TpmError::KeyUsageViolation),
            KeyRole::Identity => KIND_AIK,
            KeyRole::Signing => KIND_SIGNING,
            KeyRole::Binding => KIND_BINDING,
        };

        let mut inner = Writer::versioned();
        inner.u8(kind);
        inner.u8(record.activated as u8);
        inner.bytes(&record.keypair.export_private());
        match &record.constraint {
            None => inner.u8(0),
            Some(c) => {
                inner.u8(1);
                c.encode_into(&mut inner);
            }
        }

        let key = self.storage_secret("wrap");
        let mut nonce = [0u8; 12];
        self.rng.fill(&mut nonce);
        let ct = crypto::aead_encrypt(&key, &nonce, &inner.into_vec());

        let mut w = Writer::versioned();
        w.bytes(&nonce);
        w.bytes(&ct);
        Ok(w.into_vec())
    }

    /// Loads a blob produced by [`Tpm::wrap_key`] on this module.
    pub fn load_key(&mut self, owner_proof: &Digest, blob: &[u8]) -> Result<u64, TpmError> {
        self.check_owner(owner_proof)?;
        let mut r = Reader::new(blob);
        r.version()?;
        let nonce_bytes = r.bytes()?;
        let ct = r.bytes()?;
        r.finish()?;
        let nonce: [u8; 12] = nonce_bytes.as_slice().try_into().map_err(|_| TpmError::ForeignBlob)?;
        let key = self.storage_secret("wrap");
        let plaintext = crypto::aead_decrypt(&key, &nonce, &ct).ok_or(TpmError::ForeignBlob)?;

        let mut inner = Reader::new(&plaintext);
        inner.version()?;
        let kind = inner.u8()?;
        let activated = inner.u8()? != 0;
        let private = inner.bytes()?;
        let constraint = match inner.u8()? {
            0 => None,
            1 => Some(PcrConstraint::decode_from(&mut inner)?),
            other => return Err(TpmError::Codec(CodecError::BadTag(other))),
        };
        inner.finish()?;

        let role = match kind {
            KIND_AIK => KeyRole::Identity,
            KIND_SIGNING => KeyRole::Signing,
            KIND_BINDING => KeyRole::Binding,
            other => return Err(TpmError::Codec(CodecError::BadTag(other))),
        };
        let keypair = KeyPair::from_private_bytes(&private)?;
        Ok(self.insert_key(KeyRecord { role, keypair, constraint, activated }))
    }

    // ---- key use ----

    fn check_constraint(&self, record: &KeyRecord) -> Result<(), TpmError> {
        if let Some(c) = &record.constraint {
            if composite_of(&self.pcr, &c.selection)? != c.composite {
                return Err(TpmError::PcrMismatch);
            }
        }
        Ok(())
    }

    /// Signs caller data with a signing key. Identity, endorsement, and
    /// binding keys are refused: an AIK must never sign data chosen by the
    /// caller, or it could be tricked into certifying arbitrary claims.
    pub fn sign(
        &self,
        owner_proof: &Digest,
        handle: u64,
        message: &[u8],
    ) -> Result<Vec<u8>, TpmError> {
        self.check_owner(owner_proof)?;
        let record = self.record(handle)?;
        if record.role != KeyRole::Signing {
            return Err(TpmError::KeyUsageViolation);
        }
        self.check_constraint(record)?;
        Ok(record.keypair.sign(message)?)
    }

    /// Certifies a loaded signing or binding key with an activated AIK,
    /// echoing the verifier nonce. The produced credential carries the
    /// target's public key, role, and PCR constraint.
    pub fn certify_key(
        &self,
        owner_proof: &Digest,
        target_handle: u64,
        aik_handle: u64,
        external_nonce: &[u8],
    ) -> Result<Credential, TpmError> {
        self.check_owner(owner_proof)?;
        let aik = self.record(aik_handle)?;
        if aik.role != KeyRole::Identity {
            return Err(TpmError::KeyUsageViolation);
        }
        if !aik.activated {
            return Err(TpmError::AikNotActivated);
        }
        let target = self.record(target_handle)?;
        let (key_kind, subject_kind) = match target.role {
            KeyRole::Signing => (CertifiedKeyKind::Signing, SubjectKind::Csk),
            KeyRole::Binding => (CertifiedKeyKind::Binding, SubjectKind::BindingKey),
            _ => return Err(TpmError::KeyUsageViolation),
        };
        let info = CertifiedKeyInfo {
            key_public: target.keypair.public().to_vec(),
            key_kind,
            pcr_constraint: target.constraint.clone(),
            nonce: external_nonce.to_vec(),
        };
        Ok(make_credential(subject_kind, &info.encode(), &aik.keypair)?)
    }

    /// Signs the composite over a PCR selection with an activated AIK.
    pub fn quote(
        &self,
        owner_proof: &Digest,
        aik_handle: u64,
        selection: &BTreeSet<u32>,
        external_nonce: &[u8],
    ) -> Result<QuoteEvidence, TpmError> {
        self.check_owner(owner_proof)?;
        let aik = self.record(aik_handle)?;
        if aik.role != KeyRole::Identity {
            return Err(TpmError::KeyUsageViolation);
        }
        if !aik.activated {
            return Err(TpmError::AikNotActivated);
        }
        let composite = self.pcr_composite(selection)?;
        let preimage = quote_preimage(selection, &composite, external_nonce);
        let signature = aik.keypair.sign(preimage.as_bytes())?;
        Ok(QuoteEvidence {
            selection: selection.clone(),
            composite,
            nonce: external_nonce.to_vec(),
            aik_public: aik.keypair.public().to_vec(),
            signature,
        })
    }

    /// Encrypts data so it can only be recovered on this module while the
    /// composite over `selection` equals its value at seal time.
    pub fn seal(
        &mut self,
        owner_proof: &Digest,
        selection: &BTreeSet<u32>,
        data: &[u8],
    ) -> Result<Vec<u8>, TpmError> {
        self.check_owner(owner_proof)?;
        let composite = self.pcr_composite(selection)?;

        let mut inner = Writer::versioned();
        inner.u32(selection.len() as u32);
        for idx in selection {
            inner.u32(*idx);
        }
        composite.encode_into(&mut inner);
        inner.bytes(data);

        let key = self.storage_secret("seal");
        let mut nonce = [0u8; 12];
        self.rng.fill(&mut nonce);
        let ct = crypto::aead_encrypt(&key, &nonce, &inner.into_vec());

        let mut w = Writer::versioned();
        w.bytes(&nonce);
        w.bytes(&ct);
        Ok(w.into_vec())
    }

    /// Recovers sealed data if the recorded PCR composite still holds.
    pub fn unseal(&self, owner_proof: &Digest, blob: &[u8]) -> Result<Vec<u8>, TpmError> {
        self.check_owner(owner_proof)?;
        let mut r = Reader::new(blob);
        r.version()?;
        let nonce_bytes = r.bytes()?;
        let ct = r.bytes()?;
        r.finish()?;
        let nonce: [u8; 12] = nonce_bytes.as_slice().try_into().map_err(|_| TpmError::ForeignBlob)?;
        let key = self.storage_secret("seal");
        let plaintext = crypto::aead_decrypt(&key, &nonce, &ct).ok_or(TpmError::ForeignBlob)?;

        let mut inner = Reader::new(&plaintext);
        inner.version()?;
        let n = inner.u32()?;
        let mut selection = BTreeSet::new();
        for _ in 0..n {
            selection.insert(inner.u32()?);
        }
        let composite = Digest::decode_from(&mut inner)?;
        let data = inner.bytes()?;
        inner.finish()?;

        if self.pcr_composite(&selection)? != composite {
            return Err(TpmError::PcrMismatch);
        }
        Ok(data)
    }

    /// Decrypts a blob addressed to a binding key, subject to the key's PCR
    /// constraint. Encryption happens outside the module with the public
    /// half; only decryption is shielded.
    pub fn unbind(
        &self,
        owner_proof: &Digest,
        handle: u64,
        blob: &[u8],
    ) -> Result<Vec<u8>, TpmError> {
        self.check_owner(owner_proof)?;
        let record = self.record(handle)?;
        if record.role != KeyRole::Binding {
            return Err(TpmError::KeyUsageViolation);
        }
        self.check_constraint(record)?;
        Ok(record.keypair.decrypt(blob)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest as _, Sha256};

    fn owned_tpm(seed: u64) -> (Manufacturer, Tpm, Digest) {
        let mut maker = Manufacturer::new(DetRng::from_seed(seed));
        let mut tpm = maker.manufacture();
        let secret = b"owner passphrase";
        tpm.take_ownership(secret).unwrap();
        (maker, tpm, crypto::hash(secret))
    }

    /// Runs the full identity issuance a privacy CA would perform, directly
    /// against the module: make identity, build an activation blob for it,
    /// activate. Returns the AIK handle.
    fn activated_aik(tpm: &mut Tpm, proof: &Digest, rng: &mut DetRng, group_id: u32) -> u64 {
        let (handle, binding) = tpm.make_identity(proof, "test identity").unwrap();
        assert!(binding.verify());
        let ca = generate_keypair(rng, SCHEME_SIGN).unwrap();
        let subject = crate::credential::AikGroupSubject {
            aik_public: binding.aik_public.clone(),
            group_id,
            serial: 1,
            attributes: BTreeMap::new(),
        };
        let cred = make_credential(SubjectKind::AikGroup, &subject.encode(), &ca).unwrap();
        let blob = crypto::encrypt_to(rng, tpm.ek_public(), &cred.encode()).unwrap();
        let released = tpm.activate_identity(proof, handle, &blob).unwrap();
        assert_eq!(released, cred);
        handle
    }

    #[test]
    fn ownership_gates_key_operations() {
        let mut maker = Manufacturer::new(DetRng::from_seed(1));
        let mut tpm = maker.manufacture();
        let proof = crypto::hash(b"secret");
        assert_eq!(tpm.make_identity(&proof, "x").unwrap_err(), TpmError::NotOwned);
        assert_eq!(tpm.create_signing_key(&proof, None).unwrap_err(), TpmError::NotOwned);

        tpm.take_ownership(b"secret").unwrap();
        assert_eq!(tpm.take_ownership(b"other").unwrap_err(), TpmError::AlreadyOwned);

        let wrong = crypto::hash(b"not the secret");
        assert_eq!(tpm.make_identity(&wrong, "x").unwrap_err(), TpmError::BadOwnerProof);
        assert!(tpm.make_identity(&proof, "x").is_ok());
    }

    #[test]
    fn ekc_chains_to_manufacturer() {
        let (maker, tpm, _) = owned_tpm(2);
        let ekc = tpm.ek_credential();
        assert_eq!(ekc.subject_kind, SubjectKind::Ek);
        assert_eq!(ekc.subject_bytes, tpm.ek_public());
        assert!(crate::credential::verify_credential(ekc, Some(maker.public())));
    }

    // Oracle: recompute the expected register value with direct Sha256
    // calls, independent of the crate's digest helpers.
    #[test]
    fn extend_matches_hash_chain_oracle() {
        let (_, mut tpm, _) = owned_tpm(3);
        let m1 = crypto::hash(b"stage one");
        let m2 = crypto::hash(b"stage two");
        tpm.pcr_extend(5, &m1, "stage one").unwrap();
        tpm.pcr_extend(5, &m2, "stage two").unwrap();

        let step1: [u8; 32] =
            Sha256::digest([&[0u8; 32][..], m1.as_bytes()].concat()).into();
        let step2: [u8; 32] =
            Sha256::digest([&step1[..], m2.as_bytes()].concat()).into();
        assert_eq!(tpm.pcr_read(5).unwrap().as_bytes(), &step2);
    }

    #[test]
    fn extend_is_order_sensitive() {
        let (_, mut a, _) = owned_tpm(4);
        let (_, mut b, _) = owned_tpm(4);
        let m1 = crypto::hash(b"first");
        let m2 = crypto::hash(b"second");
        a.pcr_extend(0, &m1, "").unwrap();
        a.pcr_extend(0, &m2, "").unwrap();
        b.pcr_extend(0, &m2, "").unwrap();
        b.pcr_extend(0, &m1, "").unwrap();
        assert_ne!(a.pcr_read(0).unwrap(), b.pcr_read(0).unwrap());
    }

    #[test]
    fn composite_matches_concat_oracle() {
        let (_, mut tpm, _) = owned_tpm(5);
        tpm.pcr_extend(0, &crypto::hash(b"a"), "").unwrap();
        tpm.pcr_extend(3, &crypto::hash(b"b"), "").unwrap();

        let sel = BTreeSet::from([3, 0]);
        let expected: [u8; 32] = Sha256::digest(
            [
                tpm.pcr_read(0).unwrap().as_bytes().as_slice(),
                tpm.pcr_read(3).unwrap().as_bytes().as_slice(),
            ]
            .concat(),
        )
        .into();
        assert_eq!(tpm.pcr_composite(&sel).unwrap().as_bytes(), &expected);

        let empty: [u8; 32] = Sha256::digest([]).into();
        assert_eq!(tpm.pcr_composite(&BTreeSet::new()).unwrap().as_bytes(), &empty);

        assert_eq!(
            tpm.pcr_composite(&BTreeSet::from([PCR_COUNT])).unwrap_err(),
            TpmError::BadIndex(PCR_COUNT)
        );
    }

    #[test]
    fn log_replay_reproduces_registers() {
        let (_, mut tpm, _) = owned_tpm(6);
        for i in 0..10u32 {
            tpm.pcr_extend(i % 4, &crypto::hash(&[i as u8]), &format!("event {i}")).unwrap();
        }
        let replayed = replay_log(tpm.measurement_log()).unwrap();
        for idx in 0..PCR_COUNT {
            assert_eq!(replayed[idx as usize], tpm.pcr_read(idx).unwrap());
        }
    }

    #[test]
    fn identity_activation_happy_path() {
        let (_, mut tpm, proof) = owned_tpm(7);
        let mut rng = DetRng::from_seed(70);
        let handle = activated_aik(&mut tpm, &proof, &mut rng, 9);
        assert_eq!(tpm.key_role(handle).unwrap(), KeyRole::Identity);
    }

    #[test]
    fn activation_rejects_replay_and_cross_wiring() {
        let (_, mut tpm, proof) = owned_tpm(8);
        let mut rng = DetRng::from_seed(80);
        let ca = generate_keypair(&mut rng, SCHEME_SIGN).unwrap();

        let (h1, b1) = tpm.make_identity(&proof, "one").unwrap();
        let (h2, _b2) = tpm.make_identity(&proof, "two").unwrap();

        let subject = crate::credential::AikGroupSubject {
            aik_public: b1.aik_public.clone(),
            group_id: 1,
            serial: 1,
            attributes: BTreeMap::new(),
        };
        let cred = make_credential(SubjectKind::AikGroup, &subject.encode(), &ca).unwrap();
        let blob = crypto::encrypt_to(&mut rng, tpm.ek_public(), &cred.encode()).unwrap();

        // Credential for AIK one cannot activate AIK two.
        assert_eq!(
            tpm.activate_identity(&proof, h2, &blob).unwrap_err(),
            TpmError::SubjectMismatch
        );

        tpm.activate_identity(&proof, h1, &blob).unwrap();
        assert_eq!(
            tpm.activate_identity(&proof, h1, &blob).unwrap_err(),
            TpmError::AlreadyActivated
        );

        // A blob encrypted to a different module's EK is undecryptable here.
        let (_, mut other, other_proof) = owned_tpm(9);
        let (oh, ob) = other.make_identity(&other_proof, "other").unwrap();
        let osubject = crate::credential::AikGroupSubject {
            aik_public: ob.aik_public,
            group_id: 1,
            serial: 2,
            attributes: BTreeMap::new(),
        };
        let ocred = make_credential(SubjectKind::AikGroup, &osubject.encode(), &ca).unwrap();
        let oblob = crypto::encrypt_to(&mut rng, tpm.ek_public(), &ocred.encode()).unwrap();
        assert_eq!(
            other.activate_identity(&other_proof, oh, &oblob).unwrap_err(),
            TpmError::ForeignBlob
        );
    }

    #[test]
    fn wrap_load_round_trip_preserves_key() {
        let (_, mut tpm, proof) = owned_tpm(10);
        let handle = tpm.create_signing_key(&proof, None).unwrap();
        let public = tpm.key_public(handle).unwrap();
        let sig_before = tpm.sign(&proof, handle, b"message").unwrap();

        let blob = tpm.wrap_key(&proof, handle).unwrap();
        tpm.evict_key(&proof, handle).unwrap();
        assert_eq!(tpm.sign(&proof, handle, b"message").unwrap_err(), TpmError::BadHandle(handle));

        let reloaded = tpm.load_key(&proof, &blob).unwrap();
        assert_eq!(tpm.key_public(reloaded).unwrap(), public);
        let sig_after = tpm.sign(&proof, reloaded, b"message").unwrap();
        assert!(crypto::verify(&public, &sig_before, b"message"));
        assert!(crypto::verify(&public, &sig_after, b"message"));
    }

    #[test]
    fn wrapped_blob_is_module_bound() {
        let (_, mut tpm, proof) = owned_tpm(11);
        let (_, mut other, other_proof) = owned_tpm(12);
        let handle = tpm.create_signing_key(&proof, None).unwrap();
        let blob = tpm.wrap_key(&proof, handle).unwrap();
        assert_eq!(other.load_key(&other_proof, &blob).unwrap_err(), TpmError::ForeignBlob);

        let mut tampered = blob.clone();
        let last = tampered.len() - 1;
        tampered[last] ^= 1;
        assert_eq!(tpm.load_key(&proof, &tampered).unwrap_err(), TpmError::ForeignBlob);
    }

    #[test]
    fn certification_echoes_nonce_and_constraint() {
        let (_, mut tpm, proof) = owned_tpm(13);
        let mut rng = DetRng::from_seed(130);
        let aik = activated_aik(&mut tpm, &proof, &mut rng, 2);

        tpm.pcr_extend(7, &crypto::hash(b"config"), "config").unwrap();
        let sel = BTreeSet::from([7]);
        let csk = tpm.create_signing_key(&proof, Some(&sel)).unwrap();

        let nonce = b"verifier nonce 123";
        let cred = tpm.certify_key(&proof, csk, aik, nonce).unwrap();
        assert_eq!(cred.subject_kind, SubjectKind::Csk);
        assert!(crate::credential::verify_credential(&cred, Some(&tpm.key_public(aik).unwrap())));

        let info = CertifiedKeyInfo::decode(&cred.subject_bytes).unwrap();
        assert_eq!(info.nonce, nonce);
        assert_eq!(info.key_public, tpm.key_public(csk).unwrap());
        assert_eq!(info.key_kind, CertifiedKeyKind::Signing);
        let constraint = info.pcr_constraint.unwrap();
        assert_eq!(constraint.selection, sel);
        assert_eq!(constraint.composite, tpm.pcr_composite(&sel).unwrap());
    }

    #[test]
    fn certifying_binding_key_yields_binding_subject() {
        let (_, mut tpm, proof) = owned_tpm(14);
        let mut rng = DetRng::from_seed(140);
        let aik = activated_aik(&mut tpm, &proof, &mut rng, 2);
        let bind = tpm.create_binding_key(&proof, None).unwrap();
        let cred = tpm.certify_key(&proof, bind, aik, b"n").unwrap();
        assert_eq!(cred.subject_kind, SubjectKind::BindingKey);
        let info = CertifiedKeyInfo::decode(&cred.subject_bytes).unwrap();
        assert_eq!(info.key_kind, CertifiedKeyKind::Binding);
    }

    #[test]
    fn unactivated_aik_cannot_certify_or_quote() {
        let (_, mut tpm, proof) = owned_tpm(15);
        let (aik, _) = tpm.make_identity(&proof, "pending").unwrap();
        let csk = tpm.create_signing_key(&proof, None).unwrap();
        assert_eq!(
            tpm.certify_key(&proof, csk, aik, b"n").unwrap_err(),
            TpmError::AikNotActivated
        );
        assert_eq!(
            tpm.quote(&proof, aik, &BTreeSet::new(), b"n").unwrap_err(),
            TpmError::AikNotActivated
        );
    }

    // The restriction at the heart of identity privacy: an AIK signs only
    // structures the module itself builds, and the EK signs nothing.
    #[test]
    fn identity_and_endorsement_keys_refuse_data_signing() {
        let (_, mut tpm, proof) = owned_tpm(16);
        let mut rng = DetRng::from_seed(160);
        let aik = activated_aik(&mut tpm, &proof, &mut rng, 1);
        assert_eq!(tpm.sign(&proof, aik, b"data").unwrap_err(), TpmError::KeyUsageViolation);
        assert_eq!(tpm.sign(&proof, EK_HANDLE, b"data").unwrap_err(), TpmError::KeyUsageViolation);
        let bind = tpm.create_binding_key(&proof, None).unwrap();
        assert_eq!(tpm.sign(&proof, bind, b"data").unwrap_err(), TpmError::KeyUsageViolation);

        // Nor can another identity key be the target of certification.
        let (aik2, _) = tpm.make_identity(&proof, "second").unwrap();
        assert_eq!(
            tpm.certify_key(&proof, aik2, aik, b"n").unwrap_err(),
            TpmError::KeyUsageViolation
        );
        assert_eq!(
            tpm.certify_key(&proof, EK_HANDLE, aik, b"n").unwrap_err(),
            TpmError::KeyUsageViolation
        );
    }

    #[test]
    fn constrained_key_stops_working_after_extend() {
        let (_, mut tpm, proof) = owned_tpm(17);
        tpm.pcr_extend(2, &crypto::hash(b"boot"), "boot").unwrap();
        let sel = BTreeSet::from([2]);
        let constrained = tpm.create_signing_key(&proof, Some(&sel)).unwrap();
        let free = tpm.create_signing_key(&proof, None).unwrap();

        assert!(tpm.sign(&proof, constrained, b"m").is_ok());
        tpm.pcr_extend(2, &crypto::hash(b"update"), "update").unwrap();
        assert_eq!(tpm.sign(&proof, constrained, b"m").unwrap_err(), TpmError::PcrMismatch);
        assert!(tpm.sign(&proof, free, b"m").is_ok());
    }

    #[test]
    fn seal_unseal_tracks_pcr_state() {
        let (_, mut tpm, proof) = owned_tpm(18);
        tpm.pcr_extend(4, &crypto::hash(b"os"), "os").unwrap();
        let sel = BTreeSet::from([4]);
        let blob = tpm.seal(&proof, &sel, b"protected content").unwrap();
        assert_eq!(tpm.unseal(&proof, &blob).unwrap(), b"protected content");

        tpm.pcr_extend(4, &crypto::hash(b"rootkit"), "rootkit").unwrap();
        assert_eq!(tpm.unseal(&proof, &blob).unwrap_err(), TpmError::PcrMismatch);

        let (_, other, _) = owned_tpm(19);
        let other_proof = crypto::hash(b"owner passphrase");
        assert_eq!(other.unseal(&other_proof, &blob).unwrap_err(), TpmError::ForeignBlob);
    }

    #[test]
    fn unbind_respects_role_and_constraint() {
        let (_, mut tpm, proof) = owned_tpm(20);
        let mut rng = DetRng::from_seed(200);
        tpm.pcr_extend(1, &crypto::hash(b"fw"), "fw").unwrap();
        let sel = BTreeSet::from([1]);
        let bind = tpm.create_binding_key(&proof, Some(&sel)).unwrap();
        let public = tpm.key_public(bind).unwrap();

        let blob = crypto::encrypt_to(&mut rng, &public, b"pushed message").unwrap();
        assert_eq!(tpm.unbind(&proof, bind, &blob).unwrap(), b"pushed message");

        let signer = tpm.create_signing_key(&proof, None).unwrap();
        assert_eq!(tpm.unbind(&proof, signer, &blob).unwrap_err(), TpmError::KeyUsageViolation);

        tpm.pcr_extend(1, &crypto::hash(b"patch"), "patch").unwrap();
        assert_eq!(tpm.unbind(&proof, bind, &blob).unwrap_err(), TpmError::PcrMismatch);
    }

    #[test]
    fn quote_binds_nonce_and_matches_log() {
        let (_, mut tpm, proof) = owned_tpm(21);
        let mut rng = DetRng::from_seed(210);
        let aik = activated_aik(&mut tpm, &proof, &mut rng, 3);
        tpm.pcr_extend(0, &crypto::hash(b"bios"), "bios").unwrap();
        tpm.pcr_extend(1, &crypto::hash(b"loader"), "loader").unwrap();

        let sel = BTreeSet::from([0, 1]);
        let quote = tpm.quote(&proof, aik, &sel, b"challenge").unwrap();
        assert!(quote.verify_signature());

        // Verifier-side check: replay the shipped log and compare composites.
        let replayed = replay_log(tpm.measurement_log()).unwrap();
        assert_eq!(composite_of(&replayed, &sel).unwrap(), quote.composite);

        let mut forged = quote.clone();
        forged.nonce = b"other challenge".to_vec();
        assert!(!forged.verify_signature());
        let mut forged = quote.clone();
        forged.composite = Digest::zero();
        assert!(!forged.verify_signature());

        assert_eq!(QuoteEvidence::decode(&quote.encode()).unwrap(), quote);
    }

    // No API output or debug rendering may expose shielded private bytes.
    #[test]
    fn private_bytes_never_leave_in_clear() {
        let (_, mut tpm, proof) = owned_tpm(22);
        let mut rng = DetRng::from_seed(220);
        let aik = activated_aik(&mut tpm, &proof, &mut rng, 1);
        let csk = tpm.create_signing_key(&proof, None).unwrap();

        let mut privates: Vec<Vec<u8>> = Vec::new();
        for handle in tpm.loaded_handles() {
            privates.push(tpm.keys[&handle].keypair.export_private()[1..].to_vec());
        }

        let mut outputs: Vec<Vec<u8>> = Vec::new();
        outputs.push(tpm.wrap_key(&proof, csk).unwrap());
        outputs.push(tpm.seal(&proof, &BTreeSet::new(), b"data").unwrap());
        outputs.push(tpm.certify_key(&proof, csk, aik, b"n").unwrap().encode());
        outputs.push(tpm.quote(&proof, aik, &BTreeSet::new(), b"n").unwrap().encode());
        outputs.push(format!("{tpm:?}").into_bytes());

        for private in &privates {
            for out in &outputs {
                assert!(
                    !out.windows(private.len()).any(|w| w == private.as_slice()),
                    "private key bytes leaked into an output"
                );
            }
        }
        assert!(format!("{tpm:?}").contains("<shielded>"));
    }

    #[test]
    fn evict_removes_key_but_never_ek() {
        let (_, mut tpm, proof) = owned_tpm(23);
        let csk = tpm.create_signing_key(&proof, None).unwrap();
        tpm.evict_key(&proof, csk).unwrap();
        assert_eq!(tpm.key_public(csk).unwrap_err(), TpmError::BadHandle(csk));
        assert_eq!(tpm.evict_key(&proof, EK_HANDLE).unwrap_err(), TpmError::KeyUsageViolation);
        // Handles are never reused after eviction.
        let next = tpm.create_signing_key(&proof, None).unwrap();
        assert!(next > csk);
    }
}
