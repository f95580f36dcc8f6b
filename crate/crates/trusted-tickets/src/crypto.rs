//! Deterministic-testable cryptographic substrate.
//!
//! Every other module signs, verifies, encrypts, and hashes through this one.
//! Two schemes are registered: [`SCHEME_SIGN`] (Ed25519) and
//! [`SCHEME_ENCRYPT`] (X25519 key agreement with ChaCha20-Poly1305, switching
//! to a wrapped content key above [`DIRECT_ENCRYPT_LIMIT`]). Key bytes are
//! self-describing: the first byte of any public or private key is its scheme
//! id, so a key can never be silently used under the wrong primitive.
//!
//! All randomness flows through [`DetRng`], a seeded stream cipher generator.
//! Given the same seed and inputs, every function here produces identical
//! bytes, which is what makes whole protocol transcripts reproducible.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};

/// Default signature scheme id (Ed25519).
pub const SCHEME_SIGN: u8 = 1;
/// Default asymmetric encryption scheme id (X25519 + ChaCha20-Poly1305).
pub const SCHEME_ENCRYPT: u8 = 2;

/// Hash algorithm tag for SHA-256.
pub const HASH_ALG_SHA256: u8 = 1;

/// Plaintexts longer than this are encrypted in hybrid mode: a fresh content
/// key is wrapped under the recipient key and the body is ciphered under the
/// content key.
pub const DIRECT_ENCRYPT_LIMIT: usize = 128;

const BLOB_MODE_DIRECT: u8 = 1;
const BLOB_MODE_HYBRID: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("scheme id {0} is not registered")]
    UnknownScheme(u8),
    #[error("key bytes malformed or wrong scheme for this operation")]
    MalformedKey,
    #[error("decryption failed")]
    DecryptFailure,
}

/// Deterministic random stream. Same seed, same byte stream.
pub struct DetRng(ChaCha20Rng);

// The stream state predicts every key it will generate, so it stays out of
// debug output.
impl std::fmt::Debug for DetRng {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DetRng(..)")
    }
}

impl DetRng {
    pub fn from_seed(seed: u64) -> Self {
        let expanded = Sha256::digest(seed.to_be_bytes());
        DetRng(ChaCha20Rng::from_seed(expanded.into()))
    }

    pub fn from_seed_bytes(seed: [u8; 32]) -> Self {
        DetRng(ChaCha20Rng::from_seed(seed))
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        self.0.fill_bytes(buf);
    }

    pub fn bytes(&mut self, n: usize) -> Vec<u8> {
        let mut v = vec![0u8; n];
        self.fill(&mut v);
        v
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Derives an independent child stream. Forking with distinct labels
    /// gives each simulated party its own reproducible randomness.
    pub fn fork(&mut self, label: &str) -> DetRng {
        let mut h = Sha256::new();
        h.update(self.bytes(32));
        h.update(label.as_bytes());
        DetRng::from_seed_bytes(h.finalize().into())
    }
}

/// Fixed-length hash output plus algorithm tag.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest {
    bytes: [u8; 32],
    alg: u8,
}

impl Digest {
    pub fn zero() -> Self {
        Digest { bytes: [0u8; 32], alg: HASH_ALG_SHA256 }
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest { bytes, alg: HASH_ALG_SHA256 }
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    pub fn alg(&self) -> u8 {
        self.alg
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.u8(self.alg);
        w.raw(&self.bytes);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let alg = r.u8()?;
        if alg != HASH_ALG_SHA256 {
            return Err(CodecError::BadTag(alg));
        }
        let bytes: [u8; 32] = r.take(32)?.try_into().unwrap();
        Ok(Digest { bytes, alg })
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest::from_bytes(Sha256::digest(data).into())
}

/// Hash of the concatenation of the given parts.
pub fn hash_concat(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest::from_bytes(h.finalize().into())
}

/// Asymmetric key pair. The private half never leaves this struct through
/// `Debug`, and only [`KeyPair::export_private`] discloses it.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    scheme: u8,
    public: Vec<u8>,
    private: Vec<u8>,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("scheme", &self.scheme)
            .field("public", &hex::encode(&self.public))
            .field("private", &"<shielded>")
            .finish()
    }
}

impl KeyPair {
    pub fn scheme(&self) -> u8 {
        self.scheme
    }

    /// Scheme-tagged public key bytes.
    pub fn public(&self) -> &[u8] {
        &self.public
    }

    /// Explicit private-key export, used only by the TPM emulator to wrap
    /// keys for its own shielded storage.
    pub fn export_private(&self) -> Vec<u8> {
        self.private.clone()
    }

    /// Rebuilds a key pair from exported private bytes, re-deriving the
    /// public half.
    pub fn from_private_bytes(private: &[u8]) -> Result<KeyPair, CryptoError> {
        if private.len() != 33 {
            return Err(CryptoError::MalformedKey);
        }
        let scheme = private[0];
        let raw: [u8; 32] = private[1..].try_into().unwrap();
        let public = match scheme {
            SCHEME_SIGN => {
                let sk = SigningKey::from_bytes(&raw);
                tag_key(scheme, sk.verifying_key().as_bytes())
            }
            SCHEME_ENCRYPT => {
                let sk = x25519_dalek::StaticSecret::from(raw);
                tag_key(scheme, x25519_dalek::PublicKey::from(&sk).as_bytes())
            }
            other => return Err(CryptoError::UnknownScheme(other)),
        };
        Ok(KeyPair { scheme, public, private: private.to_vec() })
    }

    /// Signs a message with the private key. Only [`SCHEME_SIGN`] keys sign.
    pub fn sign(&self, message: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if self.scheme != SCHEME_SIGN {
            return Err(CryptoError::MalformedKey);
        }
        let raw: [u8; 32] = self.private[1..].try_into().unwrap();
        let sk = SigningKey::from_bytes(&raw);
        Ok(sk.sign(message).to_bytes().to_vec())
    }

    /// Decrypts a blob produced by [`encrypt_to`] for this key. A wrong key
    /// and a tampered blob are indistinguishable to the caller.
    pub fn decrypt(&self, blob: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if self.scheme != SCHEME_ENCRYPT {
            return Err(CryptoError::MalformedKey);
        }
        let parsed = parse_blob(blob).ok_or(CryptoError::DecryptFailure)?;
        let raw: [u8; 32] = self.private[1..].try_into().unwrap();
        let sk = x25519_dalek::StaticSecret::from(raw);
        let eph: [u8; 32] = parsed.eph_public[1..]
            .try_into()
            .map_err(|_| CryptoError::DecryptFailure)?;
        let shared = sk.diffie_hellman(&x25519_dalek::PublicKey::from(eph));
        let kek = derive_kek(shared.as_bytes(), &parsed.eph_public, &self.public);
        match parsed.mode {
            BLOB_MODE_DIRECT => aead_decrypt(&kek, &ZERO_NONCE, &parsed.body)
                .ok_or(CryptoError::DecryptFailure),
            BLOB_MODE_HYBRID => {
                let wrapped = parsed.wrapped_key.as_ref().ok_or(CryptoError::DecryptFailure)?;
                let content_key = aead_decrypt(&kek, &ZERO_NONCE, wrapped)
                    .ok_or(CryptoError::DecryptFailure)?;
                let content_key: [u8; 32] =
                    content_key.as_slice().try_into().map_err(|_| CryptoError::DecryptFailure)?;
                aead_decrypt(&content_key, &ZERO_NONCE, &parsed.body)
                    .ok_or(CryptoError::DecryptFailure)
            }
            _ => Err(CryptoError::DecryptFailure),
        }
    }
}

fn tag_key(scheme: u8, raw: &[u8; 32]) -> Vec<u8> {
    let mut v = Vec::with_capacity(33);
    v.push(scheme);
    v.extend_from_slice(raw);
    v
}

/// Generates a key pair for the given registered scheme, consuming rng state.
pub fn generate_keypair(rng: &mut DetRng, scheme: u8) -> Result<KeyPair, CryptoError> {
    let mut raw = [0u8; 32];
    rng.fill(&mut raw);
    match scheme {
        SCHEME_SIGN | SCHEME_ENCRYPT => {}
        other => return Err(CryptoError::UnknownScheme(other)),
    }
    KeyPair::from_private_bytes(&tag_key(scheme, &raw))
}

/// Verifies a signature. Returns `false` for malformed keys, malformed
/// signatures, non-signature schemes, or a failed check.
pub fn verify(public: &[u8], signature: &[u8], message: &[u8]) -> bool {
    if public.len() != 33 || public[0] != SCHEME_SIGN {
        return false;
    }
    let raw: [u8; 32] = public[1..].try_into().unwrap();
    let Ok(vk) = VerifyingKey::from_bytes(&raw) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; 64]>::try_from(signature) else {
        return false;
    };
    vk.verify(message, &Signature::from_bytes(&sig_bytes)).is_ok()
}

/// Encrypts to a [`SCHEME_ENCRYPT`] public key. Plaintexts above
/// [`DIRECT_ENCRYPT_LIMIT`] transparently switch to hybrid mode.
pub fn encrypt_to(rng: &mut DetRng, public: &[u8], plaintext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if public.len() != 33 || public[0] != SCHEME_ENCRYPT {
        return Err(CryptoError::MalformedKey);
    }
    let recipient: [u8; 32] = public[1..].try_into().unwrap();
    let mut eph_raw = [0u8; 32];
    rng.fill(&mut eph_raw);
    let eph_secret = x25519_dalek::StaticSecret::from(eph_raw);
    let eph_public = tag_key(SCHEME_ENCRYPT, x25519_dalek::PublicKey::from(&eph_secret).as_bytes());
    let shared = eph_secret.diffie_hellman(&x25519_dalek::PublicKey::from(recipient));
    let kek = derive_kek(shared.as_bytes(), &eph_public, public);

    let mut w = Writer::versioned();
    if plaintext.len() <= DIRECT_ENCRYPT_LIMIT {
        w.u8(BLOB_MODE_DIRECT);
        w.bytes(&eph_public);
        w.bytes(&aead_encrypt(&kek, &ZERO_NONCE, plaintext));
    } else {
        let mut content_key = [0u8; 32];
        rng.fill(&mut content_key);
        w.u8(BLOB_MODE_HYBRID);
        w.bytes(&eph_public);
        w.bytes(&aead_encrypt(&kek, &ZERO_NONCE, &content_key));
        w.bytes(&aead_encrypt(&content_key, &ZERO_NONCE, plaintext));
    }
    Ok(w.into_vec())
}

/// True if the blob was produced in hybrid (wrapped content key) mode.
pub fn is_hybrid_blob(blob: &[u8]) -> bool {
    matches!(parse_blob(blob), Some(p) if p.mode == BLOB_MODE_HYBRID)
}

struct ParsedBlob {
    mode: u8,
    eph_public: Vec<u8>,
    wrapped_key: Option<Vec<u8>>,
    body: Vec<u8>,
}

fn parse_blob(blob: &[u8]) -> Option<ParsedBlob> {
    let mut r = Reader::new(blob);
    r.version().ok()?;
    let mode = r.u8().ok()?;
    let eph_public = r.bytes().ok()?;
    if eph_public.len() != 33 {
        return None;
    }
    let (wrapped_key, body) = match mode {
        BLOB_MODE_DIRECT => (None, r.bytes().ok()?),
        BLOB_MODE_HYBRID => (Some(r.bytes().ok()?), r.bytes().ok()?),
        _ => return None,
    };
    r.finish().ok()?;
    Some(ParsedBlob { mode, eph_public, wrapped_key, body })
}

const ZERO_NONCE: [u8; 12] = [0u8; 12];

fn derive_kek(shared: &[u8], eph_public: &[u8], recipient_public: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"ecies-kek");
    h.update(shared);
    h.update(eph_public);
    h.update(recipient_public);
    h.finalize().into()
}

/// Authenticated symmetric encryption. Keys are single-purpose 32-byte
/// secrets; nonces must not repeat under the same key.
pub fn aead_encrypt(key: &[u8; 32], nonce: &[u8; 12], plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    cipher
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad: &[] })
        .expect("chacha20poly1305 encrypt cannot fail")
}

pub fn aead_decrypt(key: &[u8; 32], nonce: &[u8; 12], ciphertext: &[u8]) -> Option<Vec<u8>> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    cipher.decrypt(Nonce::from_slice(nonce), Payload { msg: ciphertext, aad: &[] }).ok()
}
