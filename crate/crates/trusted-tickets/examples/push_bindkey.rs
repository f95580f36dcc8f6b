// Push delivery, attest-once flavour: a single attestation provisions a
// binding key locked to the approved platform state, certified under the
// authority's root. Every later bulletin is just an encryption to that
// key; protection comes from the state lock, not from re-attestation.
//
// Run with: cargo run --example push_bindkey

use trusted_tickets::scenarios::{push, ScenarioConfig, ScenarioName};

fn main() {
    let mut config = ScenarioConfig::new(ScenarioName::PushBind);
    config.seed = 81;
    config.agents = 2;
    config.messages = 6;

    let outcome = push::run_bind(&config).unwrap();
    print!("{}", outcome.summary.render());

    let mut quotes_on_relay = 0;
    let mut quotes_total = 0;
    let mut contents = 0;
    for line in outcome.transcript.lines() {
        let mut fields = line.split('|');
        let segment = fields.nth(3).unwrap();
        let kind = fields.next().unwrap();
        if kind == "QUOTE" {
            quotes_total += 1;
            if segment == "NOC" {
                quotes_on_relay += 1;
            }
        }
        if kind == "CONTENT" {
            contents += 1;
        }
    }
    println!("\nattestations: {quotes_total} (one per device, none on the relay: {quotes_on_relay})");
    println!("bulletins delivered without re-attestation: {contents}");
    assert_eq!(quotes_total, config.agents);

    // The state lock does the ongoing enforcement: after a device drifts
    // from the approved configuration, its delivery key stops working.
    let refusal = outcome
        .summary
        .events
        .iter()
        .find(|e| e.contains("refuses to work"))
        .expect("drift demonstration");
    println!("{refusal}");

    assert!(outcome.summary.violations.is_empty());
    println!("relay scan found no readable content");
}
