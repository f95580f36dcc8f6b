// Replays captured ticket bytes at the receiving system and shows the
// spend ledger refusing the second presentation, then traces the
// misbehaving pseudonym back to its platform through the escrow.
//
// Run with: cargo run --example double_spend

use std::collections::BTreeMap;

use trusted_tickets::agent::Agent;
use trusted_tickets::charging::ChargeMode;
use trusted_tickets::crypto::{generate_keypair, hash, DetRng, SCHEME_SIGN};
use trusted_tickets::pca::PcaService;
use trusted_tickets::receiving::{ReceivingSystem, RsError, RsPolicy};
use trusted_tickets::tpm::Manufacturer;

fn main() {
    let mut maker = Manufacturer::new(DetRng::from_seed(21));
    let mut pca = PcaService::new(DetRng::from_seed(22));
    pca.trust_manufacturer(maker.public());
    let group = pca.create_group("day pass", 8, ChargeMode::Pre, BTreeMap::new());

    let mut rng = DetRng::from_seed(23);
    let rs_keypair = generate_keypair(&mut rng, SCHEME_SIGN).unwrap();
    pca.register_receiver(rs_keypair.public());
    let rs = ReceivingSystem::new(
        rs_keypair,
        RsPolicy { group_keys: pca.group_keys(), revoked_serials: Default::default() },
    );

    let tpm = maker.manufacture();
    let platform_id = tpm.platform_id();
    let mut agent = Agent::new("mallory", tpm, b"mallory-secret").unwrap();
    let aik = agent.acquire_ticket(&mut pca, group, "day pass").unwrap();

    // Capture the exact wire bytes of a submission, as an attacker with a
    // tap would, then present them twice.
    let prepared = agent.prepare_redemption(&aik, b"ride 07:14").unwrap();
    let captured = prepared.ticket_bytes.clone();

    let first = rs.redeem(&captured);
    println!("first presentation accepted: {}", first.is_ok());
    agent
        .complete_redemption(prepared, &rs.public(), first.map_err(|e| e.to_string()))
        .unwrap();

    match rs.redeem(&captured) {
        Err(RsError::AlreadySpent) => println!("replayed bytes refused: identity already spent"),
        other => panic!("expected the spend ledger to refuse, got {other:?}"),
    }

    // Both attempts are journalled; the refusal is evidence.
    for entry in rs.journal() {
        println!("journal {} -> {}", entry.seq, entry.outcome);
    }

    // The receiving system escalates with a signed request; the authority
    // opens the escrow entry for that pseudonym only.
    let request = rs.report_misbehaviour(aik, "duplicate submission").unwrap();
    let disclosure = pca.resolve_identity(&request).unwrap();
    println!("pseudonym {} resolves to platform {}", aik.to_hex(), disclosure.platform_id.to_hex());
    println!("matches the module that misbehaved: {}", disclosure.platform_id == platform_id);
    println!(
        "platform id is the endorsement key fingerprint: {}",
        disclosure.platform_id == hash(&disclosure.ek_public)
    );

    // Once blacklisted, the platform gets no further credentials.
    pca.blacklist_platform(disclosure.platform_id);
    match agent.acquire_ticket(&mut pca, group, "second pass") {
        Err(e) => println!("re-enrolment refused: {e}"),
        Ok(_) => panic!("blacklisted platform must not enrol"),
    }
}
