// End-to-end ticket life cycle against in-process services: enrol a
// platform, acquire a group credential under a fresh pseudonym, redeem it
// once, and watch a second attempt fail on both sides.
//
// Run with: cargo run --example acquire_redeem

use std::collections::BTreeMap;

use trusted_tickets::agent::{Agent, AgentError};
use trusted_tickets::charging::ChargeMode;
use trusted_tickets::crypto::{generate_keypair, DetRng, SCHEME_SIGN};
use trusted_tickets::pca::PcaService;
use trusted_tickets::receiving::{verify_ack, ReceivingSystem, RsPolicy};
use trusted_tickets::tpm::Manufacturer;

fn main() {
    // Infrastructure: a manufacturer the certification authority trusts,
    // and a receiving system whose verification key the authority knows.
    let mut maker = Manufacturer::new(DetRng::from_seed(11));
    let mut pca = PcaService::new(DetRng::from_seed(12));
    pca.trust_manufacturer(maker.public());

    let mut attrs = BTreeMap::new();
    attrs.insert("service".to_string(), "cinema".to_string());
    let group = pca.create_group("evening show", 25, ChargeMode::Pre, attrs);

    let mut rng = DetRng::from_seed(13);
    let rs_keypair = generate_keypair(&mut rng, SCHEME_SIGN).unwrap();
    pca.register_receiver(rs_keypair.public());
    let rs = ReceivingSystem::new(
        rs_keypair,
        RsPolicy { group_keys: pca.group_keys(), revoked_serials: Default::default() },
    );

    // The agent wraps a freshly manufactured module and takes ownership.
    let mut agent = Agent::new("alice", maker.manufacture(), b"alice-secret").unwrap();

    let aik = agent.acquire_ticket(&mut pca, group, "cinema visit").unwrap();
    println!("ticket issued, pseudonym {}", aik.to_hex());
    println!("authority escrow holds {} identity(ies)", pca.escrow_count());

    let payload = b"admit one, row 4";
    let ack = agent.redeem_ticket(&mut &rs, &rs.public(), &aik, payload).unwrap();
    println!(
        "redeemed; acknowledgement verifies independently: {}",
        verify_ack(&ack, &rs.public(), payload, &aik)
    );
    println!("receiving system spent count: {}", rs.spent_count());

    // The agent refuses to resubmit locally; the service side would refuse
    // the identity anyway, as double_spend shows.
    match agent.redeem_ticket(&mut &rs, &rs.public(), &aik, payload) {
        Err(AgentError::AlreadySpentLocally) => {
            println!("agent refuses to reuse a spent ticket");
        }
        other => panic!("expected a local refusal, got {other:?}"),
    }

    for line in rs.ledger_lines() {
        println!("rs | {line}");
    }
}
