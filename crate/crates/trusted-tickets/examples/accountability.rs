// Shows who may pierce a pseudonym and when: a registered receiving
// system with a signed request gets the escrowed identity, anyone else is
// refused, and every attempt lands in the authority's audit log.
//
// Run with: cargo run --example accountability

use std::collections::BTreeMap;

use trusted_tickets::agent::Agent;
use trusted_tickets::charging::ChargeMode;
use trusted_tickets::crypto::{generate_keypair, hash, DetRng, SCHEME_SIGN};
use trusted_tickets::pca::{PcaService, ResolveRequest};
use trusted_tickets::receiving::{ReceivingSystem, RsError, RsPolicy};
use trusted_tickets::tpm::Manufacturer;

fn main() {
    let mut maker = Manufacturer::new(DetRng::from_seed(31));
    let mut pca = PcaService::new(DetRng::from_seed(32));
    pca.trust_manufacturer(maker.public());
    let group = pca.create_group("venue entry", 12, ChargeMode::Post, BTreeMap::new());

    let mut rng = DetRng::from_seed(33);
    let rs_keypair = generate_keypair(&mut rng, SCHEME_SIGN).unwrap();
    pca.register_receiver(rs_keypair.public());
    let rs = ReceivingSystem::new(
        rs_keypair,
        RsPolicy { group_keys: pca.group_keys(), revoked_serials: Default::default() },
    );

    let mut agent = Agent::new("carol", maker.manufacture(), b"carol-secret").unwrap();
    let aik = agent.acquire_ticket(&mut pca, group, "entry").unwrap();
    agent.redeem_ticket(&mut &rs, &rs.public(), &aik, b"gate 3").unwrap();

    // A journalled identity plus the system's signature: disclosure granted.
    let request = rs.report_misbehaviour(aik, "chargeback dispute").unwrap();
    let disclosure = pca.resolve_identity(&request).unwrap();
    println!("authorised request granted, platform {}", disclosure.platform_id.to_hex());

    // The journal is the admissible evidence; an identity this system never
    // saw cannot even be asked about.
    match rs.report_misbehaviour(hash(b"never seen"), "fishing") {
        Err(RsError::UnknownIdentity) => println!("request about an unseen identity refused locally"),
        other => panic!("expected a local refusal, got {other:?}"),
    }

    // A rogue party signs a well-formed request with its own key. The
    // authority refuses before looking at anything else.
    let rogue = generate_keypair(&mut rng, SCHEME_SIGN).unwrap();
    let forged = ResolveRequest::sign(aik, "curiosity", &rogue);
    match pca.resolve_identity(&forged) {
        Err(e) => println!("unregistered requester refused: {e}"),
        Ok(_) => panic!("rogue request must not be granted"),
    }

    // Altering any signed field invalidates the request.
    let mut tampered = rs.report_misbehaviour(aik, "probe").unwrap();
    tampered.reason = "a different story".to_string();
    match pca.resolve_identity(&tampered) {
        Err(e) => println!("tampered request refused: {e}"),
        Ok(_) => panic!("tampered request must not be granted"),
    }

    // Escrow is local to the issuing authority. Another authority that
    // happens to trust the same receiving system still cannot resolve a
    // pseudonym it never issued.
    let mut other_pca = PcaService::new(DetRng::from_seed(34));
    other_pca.register_receiver(&rs.public());
    let elsewhere = rs.report_misbehaviour(aik, "cross check").unwrap();
    match other_pca.resolve_identity(&elsewhere) {
        Err(e) => println!("foreign authority refused: {e}"),
        Ok(_) => panic!("foreign authority must not resolve"),
    }

    println!("audit trail:");
    for event in pca.audit_log() {
        println!("  {} about {} -> {}", event.reason, event.aik_digest.to_hex(), event.outcome);
    }
}
