//! Pseudonymous ticketing built on emulated trusted platform modules.
//!
//! A platform owns a [`tpm::Tpm`], a software security module whose
//! endorsement key never signs application data. To take part in a service
//! the platform asks the identity authority ([`pca::PcaService`]) to turn a
//! freshly minted attestation identity key into a group credential; the
//! authority escrows the platform identity and certifies the key into a
//! named group. Spending produces a three-link chain, a [`credential::Ticket`]:
//! the group credential vouches for the identity key, the identity key
//! certifies a one-shot signing key, and the one-shot key signs the payload.
//! A [`receiving::ReceivingSystem`] verifies the chain against its group
//! directory, accepts each identity at most once, and answers with a signed
//! acknowledgement. Misbehaviour can be reported back to the authority,
//! which alone can map a pseudonym to the escrowed platform. Revenue from
//! issued tickets is split by a [`charging::ChargingProvider`] under exact
//! rational shares.
//!
//! Everything is deterministic: all randomness flows from [`crypto::DetRng`]
//! seeds, so a run, its transcript, and its ledgers reproduce byte for byte.
//! The [`scenarios`] module drives whole workloads over a simulated network
//! with optional fault injection, and the `ttk` binary exposes them from the
//! command line. The `examples/` directory walks through each capability.
//!
//! ```
//! use std::collections::BTreeMap;
//! use std::collections::BTreeSet;
//! use trusted_tickets::agent::Agent;
//! use trusted_tickets::charging::ChargeMode;
//! use trusted_tickets::crypto::{generate_keypair, DetRng, SCHEME_SIGN};
//! use trusted_tickets::pca::PcaService;
//! use trusted_tickets::receiving::{ReceivingSystem, RsPolicy};
//! use trusted_tickets::tpm::Manufacturer;
//!
//! let mut maker = Manufacturer::new(DetRng::from_seed(1));
//! let mut pca = PcaService::new(DetRng::from_seed(2));
//! pca.trust_manufacturer(maker.public());
//! let group = pca.create_group("cinema", 12, ChargeMode::Pre, BTreeMap::new());
//!
//! let rs_keys = generate_keypair(&mut DetRng::from_seed(3), SCHEME_SIGN).unwrap();
//! pca.register_receiver(rs_keys.public());
//! let rs = ReceivingSystem::new(
//!     rs_keys,
//!     RsPolicy { group_keys: pca.group_keys(), revoked_serials: BTreeSet::new() },
//! );
//!
//! let mut agent = Agent::new("visitor", maker.manufacture(), b"owner secret").unwrap();
//! let ticket = agent.acquire_ticket(&mut pca, group, "evening show").unwrap();
//! agent.redeem_ticket(&mut &rs, &rs.public(), &ticket, b"seat 12").unwrap();
//! assert_eq!(rs.spent_count(), 1);
//! ```

pub mod agent;
pub mod charging;
pub mod cli;
pub mod codec;
pub mod credential;
pub mod crypto;
pub mod harness;
pub mod pca;
pub mod receiving;
pub mod scenarios;
pub mod tpm;
