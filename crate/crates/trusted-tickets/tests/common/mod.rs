//! Independent verification oracles shared by the integration suites.
//!
//! Everything here re-derives results from raw bytes with the base
//! primitives (sha2, ed25519-dalek) and its own parsers. None of the
//! crate's verification helpers are called, so a defect in them cannot
//! vouch for itself.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ed25519_dalek::{Signature, Verifier, VerifyingKey};
use sha2::{Digest as _, Sha256};

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    let nibble = |c: u8| -> Option<u8> {
        match c {
            b'0'..=b'9' => Some(c - b'0'),
            b'a'..=b'f' => Some(c - b'a' + 10),
            b'A'..=b'F' => Some(c - b'A' + 10),
            _ => None,
        }
    };
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len() / 2);
    for pair in raw.chunks(2) {
        out.push(nibble(pair[0])? << 4 | nibble(pair[1])?);
    }
    Some(out)
}

/// Signature check straight on the curve library. Public keys in this
/// system carry a one-byte scheme tag; 0x01 is the signing scheme.
pub fn ed25519_ok(tagged_public: &[u8], signature: &[u8], message: &[u8]) -> bool {
    if tagged_public.len() != 33 || tagged_public[0] != 0x01 {
        return false;
    }
    let raw: [u8; 32] = tagged_public[1..].try_into().unwrap();
    let Ok(vk) = VerifyingKey::from_bytes(&raw) else {
        return false;
    };
    let Ok(sig) = <[u8; 64]>::try_from(signature) else {
        return false;
    };
    vk.verify(message, &Signature::from_bytes(&sig)).is_ok()
}

/// One transcript line as this suite parses it: `seq|from|to|SEG|KIND|hex`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireLine {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub segment: String,
    pub kind: String,
    pub body: Vec<u8>,
}

pub fn parse_wire_line(line: &str) -> Option<WireLine> {
    let mut fields = line.splitn(6, '|');
    let seq = fields.next()?.parse().ok()?;
    let from = fields.next()?.to_string();
    let to = fields.next()?.to_string();
    let segment = fields.next()?.to_string();
    let kind = fields.next()?.to_string();
    let body = hex_decode(fields.next()?)?;
    Some(WireLine { seq, from, to, segment, kind, body })
}

pub fn parse_wire(transcript: &str) -> Vec<WireLine> {
    transcript
        .lines()
        .map(|l| parse_wire_line(l).expect("transcript line"))
        .collect()
}

/// Minimal big-endian reader over the crate's wire layout: a version byte
/// 0x01 up front, `u32` length prefixes on variable fields.
pub struct Raw<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Raw<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Raw { buf, pos: 0 }
    }

    /// Current byte offset, for mapping parsed fields back to positions.
    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn u8(&mut self) -> Option<u8> {
        let b = *self.buf.get(self.pos)?;
        self.pos += 1;
        Some(b)
    }

    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return None;
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    pub fn u32(&mut self) -> Option<u32> {
        Some(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        Some(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Option<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn version(&mut self) -> Option<()> {
        (self.u8()? == 0x01).then_some(())
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// A credential as laid out on the wire: version, kind byte, then subject,
/// issuer key, and signature, each length-prefixed.
#[derive(Debug, Clone)]
pub struct RawCredential {
    pub kind: u8,
    pub subject: Vec<u8>,
    pub issuer: Vec<u8>,
    pub signature: Vec<u8>,
}

impl RawCredential {
    pub fn read(r: &mut Raw<'_>) -> Option<Self> {
        r.version()?;
        let kind = r.u8()?;
        // Five registered subject kinds; anything else is not a credential.
        if !(1..=5).contains(&kind) {
            return None;
        }
        let subject = r.bytes()?.to_vec();
        let issuer = r.bytes()?.to_vec();
        let signature = r.bytes()?.to_vec();
        Some(RawCredential { kind, subject, issuer, signature })
    }

    pub fn parse(bytes: &[u8]) -> Option<Self> {
        let mut r = Raw::new(bytes);
        let c = Self::read(&mut r)?;
        r.done().then_some(c)
    }

    /// The signed message is the hash of the kind byte followed by the
    /// subject bytes; the signature must come from `expected_issuer` when
    /// one is demanded.
    pub fn signature_ok(&self, expected_issuer: Option<&[u8]>) -> bool {
        if let Some(expected) = expected_issuer {
            if self.issuer != expected {
                return false;
            }
        }
        let preimage = sha256(&[&[self.kind], &self.subject]);
        ed25519_ok(&self.issuer, &self.signature, &preimage)
    }
}

/// Group-credential subject: the pseudonymous identity key, its group, the
/// issuance serial, and the group's service attributes.
#[derive(Debug, Clone)]
pub struct RawGroupSubject {
    pub aik_public: Vec<u8>,
    pub group_id: u32,
    pub serial: u64,
    pub attributes: BTreeMap<String, String>,
}

impl RawGroupSubject {
    pub fn parse(bytes: &[u8]) -> Option<Self> {
        let mut r = Raw::new(bytes);
        r.version()?;
        let aik_public = r.bytes()?.to_vec();
        let group_id = r.u32()?;
        let serial = r.u64()?;
        let n = r.u32()?;
        let mut attributes = BTreeMap::new();
        for _ in 0..n {
            let k = String::from_utf8(r.bytes()?.to_vec()).ok()?;
            let v = String::from_utf8(r.bytes()?.to_vec()).ok()?;
            attributes.insert(k, v);
        }
        r.done().then_some(RawGroupSubject { aik_public, group_id, serial, attributes })
    }
}

/// Certified-key subject: the key, its usage class, an optional register
/// constraint, and the freshness nonce.
#[derive(Debug, Clone)]
pub struct RawKeyInfo {
    pub key_public: Vec<u8>,
    pub key_kind: u8,
    pub constraint: Option<(Vec<u32>, [u8; 32])>,
    pub nonce: Vec<u8>,
}

impl RawKeyInfo {
    pub fn parse(bytes: &[u8]) -> Option<Self> {
        let mut r = Raw::new(bytes);
        r.version()?;
        let key_public = r.bytes()?.to_vec();
        let key_kind = r.u8()?;
        let constraint = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()?;
                let mut selection = Vec::new();
                for _ in 0..n {
                    selection.push(r.u32()?);
                }
                if r.u8()? != 0x01 {
                    return None;
                }
                let composite: [u8; 32] = r.take(32)?.try_into().unwrap();
                Some((selection, composite))
            }
            _ => return None,
        };
        let nonce = r.bytes()?.to_vec();
        r.done().then_some(RawKeyInfo { key_public, key_kind, constraint, nonce })
    }
}

/// A full ticket: payload plus its three-credential chain.
#[derive(Debug, Clone)]
pub struct RawTicket {
    pub group_id: u32,
    pub payload: Vec<u8>,
    pub cert_payload: RawCredential,
    pub cert_csk: RawCredential,
    pub cert_group: RawCredential,
}

impl RawTicket {
    pub fn parse(bytes: &[u8]) -> Option<Self> {
        let mut r = Raw::new(bytes);
        r.version()?;
        let group_id = r.u32()?;
        let payload = r.bytes()?.to_vec();
        let cert_payload = RawCredential::read(&mut r)?;
        let cert_csk = RawCredential::read(&mut r)?;
        let cert_group = RawCredential::read(&mut r)?;
        r.done().then_some(RawTicket { group_id, payload, cert_payload, cert_csk, cert_group })
    }
}

/// What this suite's chain check accepts: the spend key and the facts the
/// chain proved.
#[derive(Debug, Clone)]
pub struct RawVerified {
    pub group_id: u32,
    pub serial: u64,
    pub aik_digest: [u8; 32],
    pub payload: Vec<u8>,
    pub attributes: BTreeMap<String, String>,
}

/// First failing link, named the way this suite sees it. The order matches
/// the service's documented decision sequence: group lookup, group
/// credential, signing-key credential, payload signature, payload digest.
pub const REJECT_MALFORMED: &str = "malformed";
pub const REJECT_UNKNOWN_GROUP: &str = "unknown group";
pub const REJECT_GROUP_CREDENTIAL: &str = "group credential";
pub const REJECT_CSK_CREDENTIAL: &str = "csk credential";
pub const REJECT_PAYLOAD_SIGNATURE: &str = "payload signature";
pub const REJECT_PAYLOAD_MISMATCH: &str = "payload mismatch";

/// Re-verifies an encoded ticket from scratch against a group key
/// directory. Subject kinds: 1 group membership, 2 certified signing key,
/// 3 payload.
pub fn reverify_chain(
    ticket_bytes: &[u8],
    group_keys: &BTreeMap<u32, Vec<u8>>,
) -> Result<RawVerified, &'static str> {
    let ticket = RawTicket::parse(ticket_bytes).ok_or(REJECT_MALFORMED)?;
    let group_key = group_keys.get(&ticket.group_id).ok_or(REJECT_UNKNOWN_GROUP)?;

    if ticket.cert_group.kind != 1 || !ticket.cert_group.signature_ok(Some(group_key)) {
        return Err(REJECT_GROUP_CREDENTIAL);
    }
    let subject =
        RawGroupSubject::parse(&ticket.cert_group.subject).ok_or(REJECT_GROUP_CREDENTIAL)?;
    if subject.group_id != ticket.group_id {
        return Err(REJECT_GROUP_CREDENTIAL);
    }

    if ticket.cert_csk.kind != 2 || !ticket.cert_csk.signature_ok(Some(&subject.aik_public)) {
        return Err(REJECT_CSK_CREDENTIAL);
    }
    let info = RawKeyInfo::parse(&ticket.cert_csk.subject).ok_or(REJECT_CSK_CREDENTIAL)?;
    if info.key_kind != 1 {
        return Err(REJECT_CSK_CREDENTIAL);
    }

    if ticket.cert_payload.kind != 3 || !ticket.cert_payload.signature_ok(Some(&info.key_public)) {
        return Err(REJECT_PAYLOAD_SIGNATURE);
    }

    if ticket.cert_payload.subject != sha256(&[&ticket.payload]) {
        return Err(REJECT_PAYLOAD_MISMATCH);
    }

    Ok(RawVerified {
        group_id: ticket.group_id,
        serial: subject.serial,
        aik_digest: sha256(&[&subject.aik_public]),
        payload: ticket.payload,
        attributes: subject.attributes,
    })
}

/// Re-checks a redemption acknowledgement from its encoded form: a payload
/// credential from the service key over hash(payload || spend key).
pub fn ack_ok(ack_bytes: &[u8], rs_public: &[u8], payload: &[u8], aik_digest: &[u8; 32]) -> bool {
    let Some(cred) = RawCredential::parse(ack_bytes) else {
        return false;
    };
    cred.kind == 3
        && cred.subject == sha256(&[payload, aik_digest])
        && cred.signature_ok(Some(rs_public))
}

/// Group-key directory plus revoked serials, as carried in a policy update.
pub type PolicyView = (BTreeMap<u32, Vec<u8>>, Vec<u64>);

/// Group-key directory as published in a policy update: version byte,
/// keyed group entries, then the revocation list.
pub fn parse_policy(body: &[u8]) -> Option<PolicyView> {
    let mut r = Raw::new(body);
    r.version()?;
    let n = r.u32()?;
    let mut keys = BTreeMap::new();
    for _ in 0..n {
        let id = r.u32()?;
        keys.insert(id, r.bytes()?.to_vec());
    }
    let m = r.u32()?;
    let mut revoked = Vec::new();
    for _ in 0..m {
        revoked.push(r.u64()?);
    }
    r.done().then_some((keys, revoked))
}

/// Mathematical floor of `amount * num / den` in wide arithmetic.
pub fn floor_share(amount: i64, num: i64, den: i64) -> i64 {
    let wide = amount as i128 * num as i128;
    wide.div_euclid(den as i128) as i64
}

/// Weighted mean as a reduced fraction, summed in plain integers.
pub fn weighted_mean(samples: &[(u8, i64)]) -> Option<(i64, i64)> {
    let num: i64 = samples.iter().map(|(score, w)| *score as i64 * w).sum();
    let den: i64 = samples.iter().map(|(_, w)| w).sum();
    if den == 0 {
        return None;
    }
    if num == 0 {
        return Some((0, 1));
    }
    let g = gcd(num.abs(), den);
    Some((num / g, den / g))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
