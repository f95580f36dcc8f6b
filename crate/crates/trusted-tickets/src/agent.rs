//! Client-side agent: drives the module through ticket acquisition and
//! redemption.
//!
//! Acquisition creates a fresh identity key per ticket and has the privacy
//! CA certify it into a group; the group credential released by identity
//! activation is the ticket's anchor. Redemption certifies a fresh one-shot
//! signing key under that identity, signs the service payload with it, and
//! submits the assembled chain. The agent accepts the transaction as
//! complete only when the returned acknowledgement verifies against the
//! receiving system's key; an unverifiable acknowledgement leaves the
//! ticket locally unspent so it can be retried.
//!
//! The counterparties are traits, so the same agent code runs against
//! in-process services or a simulated network.

use thiserror::Error;

use crate::credential::{
    signing_preimage, Credential, SubjectKind, Ticket,
};
use crate::crypto::{self, Digest};
use crate::pca::{IdentityRequest, PcaService};
use crate::receiving::{verify_ack, ReceivingSystem};
use crate::tpm::{Tpm, TpmError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgentError {
    #[error(transparent)]
    Tpm(#[from] TpmError),
    #[error("certification authority refused: {0}")]
    Authority(String),
    #[error("receiving system refused: {0}")]
    Rejected(String),
    #[error("acknowledgement does not verify for this redemption")]
    BadAck,
    #[error("ticket already redeemed by this agent")]
    AlreadySpentLocally,
    #[error("agent holds no such ticket")]
    NotHeld,
    #[error("transport failed: {0}")]
    Transport(String),
}

/// Issues group credentials; either a privacy CA in process or a channel to
/// one across a simulated network.
pub trait IdentityAuthority {
    /// Returns the activation blob for the requested identity.
    fn request_identity(&mut self, request: &IdentityRequest) -> Result<Vec<u8>, AgentError>;
}

impl IdentityAuthority for PcaService {
    fn request_identity(&mut self, request: &IdentityRequest) -> Result<Vec<u8>, AgentError> {
        self.issue(request)
            .map(|outcome| outcome.activation_blob)
            .map_err(|e| AgentError::Authority(e.to_string()))
    }
}

/// Accepts encoded tickets. The inner result carries the service decision:
/// an acknowledgement or the refusal text.
pub trait TicketAcceptor {
    fn submit_ticket(&mut self, ticket_bytes: &[u8])
        -> Result<Result<Credential, String>, AgentError>;
}

impl TicketAcceptor for &ReceivingSystem {
    fn submit_ticket(
        &mut self,
        ticket_bytes: &[u8],
    ) -> Result<Result<Credential, String>, AgentError> {
        Ok(self.redeem(ticket_bytes).map_err(|e| e.to_string()))
    }
}

/// One acquired ticket: the group credential plus local bookkeeping.
#[derive(Debug)]
pub struct TicketRecord {
    pub aik_digest: Digest,
    pub group_id: u32,
    pub credential: Credential,
    pub spent: bool,
    aik_handle: u64,
}

impl TicketRecord {
    /// Handle of the identity key backing this ticket, for quoting and key
    /// certification while the ticket is unspent.
    pub fn aik_handle(&self) -> u64 {
        self.aik_handle
    }
}

#[derive(Debug)]
pub struct Agent {
    pub name: String,
    tpm: Tpm,
    owner_proof: Digest,
    tickets: Vec<TicketRecord>,
}

impl Agent {
    /// Takes ownership of the module and binds it to this agent.
    pub fn new(name: &str, mut tpm: Tpm, owner_secret: &[u8]) -> Result<Self, AgentError> {
        tpm.take_ownership(owner_secret)?;
        Ok(Agent {
            name: name.to_string(),
            tpm,
            owner_proof: crypto::hash(owner_secret),
            tickets: Vec::new(),
        })
    }

    pub fn tpm(&self) -> &Tpm {
        &self.tpm
    }

    /// Scenario drivers use this to measure software into the PCRs.
    pub fn tpm_mut(&mut self) -> &mut Tpm {
        &mut self.tpm
    }

    pub fn owner_proof(&self) -> Digest {
        self.owner_proof
    }

    pub fn tickets(&self) -> &[TicketRecord] {
        &self.tickets
    }

    pub fn ticket(&self, aik_digest: &Digest) -> Option<&TicketRecord> {
        self.tickets.iter().find(|t| &t.aik_digest == aik_digest)
    }

    /// Obtains a ticket for `group_id`: fresh identity, certification
    /// request, activation. A refused or unusable identity is evicted so
    /// failures leave no key material behind.
    pub fn acquire_ticket(
        &mut self,
        authority: &mut impl IdentityAuthority,
        group_id: u32,
        label: &str,
    ) -> Result<Digest, AgentError> {
        let (handle, binding) = self.tpm.make_identity(&self.owner_proof, label)?;
        let aik_digest = crypto::hash(&binding.aik_public);
        let request = IdentityRequest {
            binding,
            ek_public: self.tpm.ek_public().to_vec(),
            ek_credential: self.tpm.ek_credential().clone(),
            group_id,
        };

        let blob = match authority.request_identity(&request) {
            Ok(blob) => blob,
            Err(e) => {
                self.tpm.evict_key(&self.owner_proof, handle)?;
                return Err(e);
            }
        };
        let credential = match self.tpm.activate_identity(&self.owner_proof, handle, &blob) {
            Ok(c) => c,
            Err(e) => {
                self.tpm.evict_key(&self.owner_proof, handle)?;
                return Err(e.into());
            }
        };

        self.tickets.push(TicketRecord {
            aik_digest,
            group_id,
            credential,
            spent: false,
            aik_handle: handle,
        });
        Ok(aik_digest)
    }

    /// Builds the submission for `payload` under a held ticket without
    /// spending anything: certifies a fresh signing key, signs the payload
    /// digest, and assembles the chain. The returned handle is the one-shot
    /// signing key, which the caller must evict.
    fn build_submission(
        &mut self,
        aik_digest: &Digest,
        payload: &[u8],
    ) -> Result<(Ticket, u64), AgentError> {
        let record = self
            .tickets
            .iter()
            .find(|t| &t.aik_digest == aik_digest)
            .ok_or(AgentError::NotHeld)?;
        if record.spent {
            return Err(AgentError::AlreadySpentLocally);
        }
        let aik_handle = record.aik_handle;
        let cert_group = record.credential.clone();
        let group_id = record.group_id;

        let payload_digest = crypto::hash(payload);
        let csk = self.tpm.create_signing_key(&self.owner_proof, None)?;
        let cert_csk = match self.tpm.certify_key(
            &self.owner_proof,
            csk,
            aik_handle,
            payload_digest.as_bytes(),
        ) {
            Ok(c) => c,
            Err(e) => {
                self.tpm.evict_key(&self.owner_proof, csk)?;
                return Err(e.into());
            }
        };

        let preimage = signing_preimage(SubjectKind::Payload, payload_digest.as_bytes());
        let signature = match self.tpm.sign(&self.owner_proof, csk, preimage.as_bytes()) {
            Ok(s) => s,
            Err(e) => {
                self.tpm.evict_key(&self.owner_proof, csk)?;
                return Err(e.into());
            }
        };
        let cert_payload = Credential {
            subject_kind: SubjectKind::Payload,
            subject_bytes: payload_digest.as_bytes().to_vec(),
            issuer_public: self.tpm.key_public(csk)?,
            signature,
        };

        let ticket = Ticket {
            payload: payload.to_vec(),
            cert_payload,
            cert_csk,
            cert_group,
            group_id,
        };
        Ok((ticket, csk))
    }

    /// First half of a redemption: the encoded ticket ready to submit, plus
    /// the state [`Agent::complete_redemption`] needs to finish or abort.
    /// Nothing is spent until the response comes back and verifies.
    pub fn prepare_redemption(
        &mut self,
        aik_digest: &Digest,
        payload: &[u8],
    ) -> Result<PreparedRedemption, AgentError> {
        let (ticket, csk) = self.build_submission(aik_digest, payload)?;
        Ok(PreparedRedemption {
            aik_digest: *aik_digest,
            payload: payload.to_vec(),
            ticket_bytes: ticket.encode(),
            csk,
        })
    }

    /// Second half of a redemption: verifies the service response for a
    /// prepared submission. Marks the ticket spent and evicts its keys only
    /// when the acknowledgement verifies; any other outcome retires just
    /// the one-shot signing key and leaves the ticket redeemable.
    pub fn complete_redemption(
        &mut self,
        prepared: PreparedRedemption,
        rs_public: &[u8],
        response: Result<Credential, String>,
    ) -> Result<Credential, AgentError> {
        self.tpm.evict_key(&self.owner_proof, prepared.csk)?;
        let ack = match response {
            Ok(ack) => ack,
            Err(refusal) => return Err(AgentError::Rejected(refusal)),
        };
        if !verify_ack(&ack, rs_public, &prepared.payload, &prepared.aik_digest) {
            return Err(AgentError::BadAck);
        }

        let record = self
            .tickets
            .iter_mut()
            .find(|t| t.aik_digest == prepared.aik_digest)
            .expect("record existed during prepare");
        record.spent = true;
        let aik_handle = record.aik_handle;
        self.tpm.evict_key(&self.owner_proof, aik_handle)?;
        Ok(ack)
    }

    /// Redeems a held ticket for `payload` at a receiving system.
    ///
    /// The ticket is marked spent only after the acknowledgement verifies,
    /// so a forged or dropped acknowledgement never burns the ticket. On
    /// success the identity and signing keys are evicted; the group
    /// credential stays in the record for audit.
    pub fn redeem_ticket(
        &mut self,
        acceptor: &mut impl TicketAcceptor,
        rs_public: &[u8],
        aik_digest: &Digest,
        payload: &[u8],
    ) -> Result<Credential, AgentError> {
        let prepared = self.prepare_redemption(aik_digest, payload)?;
        let outcome = acceptor.submit_ticket(&prepared.ticket_bytes);
        match outcome {
            Ok(response) => self.complete_redemption(prepared, rs_public, response),
            Err(transport) => {
                self.tpm.evict_key(&self.owner_proof, prepared.csk)?;
                Err(transport)
            }
        }
    }
}

/// In-flight redemption between prepare and complete.
#[derive(Debug)]
pub struct PreparedRedemption {
    pub aik_digest: Digest,
    pub payload: Vec<u8>,
    pub ticket_bytes: Vec<u8>,
    csk: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charging::ChargeMode;
    use crate::crypto::{generate_keypair, DetRng, SCHEME_SIGN};
    use crate::receiving::RsPolicy;
    use crate::tpm::{Manufacturer, EK_HANDLE};
    use std::collections::BTreeMap;

    struct World {
        pca: PcaService,
        rs: ReceivingSystem,
        group_id: u32,
    }

    fn world(seed: u64) -> (World, Agent) {
        let mut maker = Manufacturer::new(DetRng::from_seed(seed));
        let mut pca = PcaService::new(DetRng::from_seed(seed + 1));
        pca.trust_manufacturer(maker.public());
        let group_id = pca.create_group("transit", 10, ChargeMode::Pre, BTreeMap::new());

        let mut rng = DetRng::from_seed(seed + 2);
        let rs_key = generate_keypair(&mut rng, SCHEME_SIGN).unwrap();
        let rs = ReceivingSystem::new(
            rs_key,
            RsPolicy { group_keys: pca.group_keys(), revoked_serials: Default::default() },
        );
        pca.register_receiver(&rs.public());

        let agent = Agent::new("client-1", maker.manufacture(), b"owner secret").unwrap();
        (World { pca, rs, group_id }, agent)
    }

    /// Forwards to a real receiving system while recording raw submissions.
    struct RecordingAcceptor<'a> {
        rs: &'a ReceivingSystem,
        seen: Vec<Vec<u8>>,
    }

    impl TicketAcceptor for RecordingAcceptor<'_> {
        fn submit_ticket(
            &mut self,
            ticket_bytes: &[u8],
        ) -> Result<Result<Credential, String>, AgentError> {
            self.seen.push(ticket_bytes.to_vec());
            Ok(self.rs.redeem(ticket_bytes).map_err(|e| e.to_string()))
        }
    }

    #[test]
    fn acquire_and_redeem_round_trip() {
        let (mut w, mut agent) = world(1);
        let digest = agent.acquire_ticket(&mut w.pca, w.group_id, "commute").unwrap();
        assert_eq!(agent.tickets().len(), 1);
        assert!(!agent.ticket(&digest).unwrap().spent);
        assert!(w.pca.escrow_record(&digest).is_some());

        let rs_public = w.rs.public();
        let ack = agent
            .redeem_ticket(&mut (&w.rs), &rs_public, &digest, b"ride downtown")
            .unwrap();
        assert!(verify_ack(&ack, &rs_public, b"ride downtown", &digest));
        assert!(agent.ticket(&digest).unwrap().spent);
        assert_eq!(w.rs.spent_count(), 1);

        // All session keys are gone; only the endorsement key remains.
        assert_eq!(agent.tpm().loaded_handles(), vec![EK_HANDLE]);
    }

    #[test]
    fn local_replay_is_blocked_before_any_submission() {
        let (mut w, mut agent) = world(2);
        let digest = agent.acquire_ticket(&mut w.pca, w.group_id, "t").unwrap();
        let rs_public = w.rs.public();
        agent.redeem_ticket(&mut (&w.rs), &rs_public, &digest, b"p").unwrap();

        let journal_before = w.rs.journal().len();
        assert_eq!(
            agent
                .redeem_ticket(&mut (&w.rs), &rs_public, &digest, b"p")
                .unwrap_err(),
            AgentError::AlreadySpentLocally
        );
        // Nothing reached the receiving system.
        assert_eq!(w.rs.journal().len(), journal_before);
    }

    #[test]
    fn unknown_ticket_and_refused_acquisition() {
        let (mut w, mut agent) = world(3);
        assert_eq!(
            agent
                .redeem_ticket(&mut (&w.rs), &w.rs.public(), &crypto::hash(b"none"), b"p")
                .unwrap_err(),
            AgentError::NotHeld
        );

        // A refused acquisition leaves no identity key behind.
        w.pca.blacklist_platform(agent.tpm().platform_id());
        let err = agent.acquire_ticket(&mut w.pca, w.group_id, "t").unwrap_err();
        assert!(matches!(err, AgentError::Authority(_)));
        assert_eq!(agent.tickets().len(), 0);
        assert_eq!(agent.tpm().loaded_handles(), vec![EK_HANDLE]);
    }

    /// Acceptor that replaces the acknowledgement with one signed by an
    /// unrelated key, simulating a tampering network position.
    struct ForgingAcceptor<'a> {
        rs: &'a ReceivingSystem,
        forger: crate::crypto::KeyPair,
    }

    impl TicketAcceptor for ForgingAcceptor<'_> {
        fn submit_ticket(
            &mut self,
            ticket_bytes: &[u8],
        ) -> Result<Result<Credential, String>, AgentError> {
            let _ = self.rs.redeem(ticket_bytes);
            let ticket = Ticket::decode(ticket_bytes).unwrap();
            let subject = crate::receiving::ack_subject(
                &ticket.payload,
                &crypto::hash(b"whoever"),
            );
            let forged = crate::credential::make_credential(
                SubjectKind::Payload,
                subject.as_bytes(),
                &self.forger,
            )
            .unwrap();
            Ok(Ok(forged))
        }
    }

    #[test]
    fn forged_ack_leaves_ticket_locally_unspent() {
        let (mut w, mut agent) = world(4);
        let digest = agent.acquire_ticket(&mut w.pca, w.group_id, "t").unwrap();
        let mut rng = DetRng::from_seed(44);
        let mut acceptor = ForgingAcceptor {
            rs: &w.rs,
            forger: generate_keypair(&mut rng, SCHEME_SIGN).unwrap(),
        };
        assert_eq!(
            agent
                .redeem_ticket(&mut acceptor, &w.rs.public(), &digest, b"p")
                .unwrap_err(),
            AgentError::BadAck
        );
        // The service spent it, but the agent still holds its claim: the
        // record is evidence the acknowledgement never arrived intact.
        assert!(!agent.ticket(&digest).unwrap().spent);
    }

    #[test]
    fn service_refusal_is_surfaced_and_ticket_kept() {
        let (mut w, mut agent) = world(5);
        let digest = agent.acquire_ticket(&mut w.pca, w.group_id, "t").unwrap();

        // Empty the policy so the chain cannot verify server-side.
        w.rs.set_policy(RsPolicy::default());
        let err = agent
            .redeem_ticket(&mut (&w.rs), &w.rs.public(), &digest, b"p")
            .unwrap_err();
        assert!(matches!(err, AgentError::Rejected(_)));
        assert!(!agent.ticket(&digest).unwrap().spent);

        // Restoring the policy lets the same ticket through.
        w.rs.set_policy(RsPolicy {
            group_keys: w.pca.group_keys(),
            revoked_serials: Default::default(),
        });
        agent.redeem_ticket(&mut (&w.rs), &w.rs.public(), &digest, b"p").unwrap();
    }

    #[test]
    fn each_redemption_uses_a_fresh_signing_key() {
        let (mut w, mut agent) = world(6);
        let d1 = agent.acquire_ticket(&mut w.pca, w.group_id, "one").unwrap();
        let d2 = agent.acquire_ticket(&mut w.pca, w.group_id, "two").unwrap();

        let mut acceptor = RecordingAcceptor { rs: &w.rs, seen: Vec::new() };
        let rs_public = w.rs.public();
        agent.redeem_ticket(&mut acceptor, &rs_public, &d1, b"p1").unwrap();
        agent.redeem_ticket(&mut acceptor, &rs_public, &d2, b"p2").unwrap();

        let t1 = Ticket::decode(&acceptor.seen[0]).unwrap();
        let t2 = Ticket::decode(&acceptor.seen[1]).unwrap();
        assert_ne!(t1.cert_payload.issuer_public, t2.cert_payload.issuer_public);
        assert_ne!(t1.cert_group.subject_bytes, t2.cert_group.subject_bytes);
    }

    // Privacy floor: nothing derived from the endorsement key may appear in
    // what the receiving system sees.
    #[test]
    fn submissions_carry_no_endorsement_material() {
        let (mut w, mut agent) = world(7);
        let digest = agent.acquire_ticket(&mut w.pca, w.group_id, "t").unwrap();
        let mut acceptor = RecordingAcceptor { rs: &w.rs, seen: Vec::new() };
        let rs_public = w.rs.public();
        agent.redeem_ticket(&mut acceptor, &rs_public, &digest, b"p").unwrap();

        let ek_needle = agent.tpm().ek_public()[1..].to_vec();
        let platform_needle = agent.tpm().platform_id().as_bytes().to_vec();
        for seen in &acceptor.seen {
            assert!(!seen.windows(ek_needle.len()).any(|w| w == ek_needle));
            assert!(!seen.windows(platform_needle.len()).any(|w| w == platform_needle));
        }
    }
}
