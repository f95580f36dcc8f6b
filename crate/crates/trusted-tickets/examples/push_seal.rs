// Push delivery, attest-per-message flavour: the station challenges the
// device before every bulletin, checks the quoted platform state against
// its approved reference, and the device seals what it stores. Nothing
// readable ever crosses the relay, and stored content dies with a state
// change.
//
// Run with: cargo run --example push_seal

use trusted_tickets::scenarios::{push, ScenarioConfig, ScenarioName};

fn main() {
    let mut config = ScenarioConfig::new(ScenarioName::PushSeal);
    config.seed = 71;
    config.agents = 2;
    config.messages = 5;

    let outcome = push::run_seal(&config).unwrap();
    print!("{}", outcome.summary.render());

    // Count the wire traffic: one challenge, one quote, one protected
    // content envelope per message, plus the local seal round trips.
    let mut quotes = 0;
    let mut contents = 0;
    let mut stored = 0;
    for line in outcome.transcript.lines() {
        let kind = line.split('|').nth(4).unwrap();
        match kind {
            "QUOTE" => quotes += 1,
            "CONTENT" => contents += 1,
            "SEAL_STORE" => stored += 1,
            _ => {}
        }
    }
    println!("\nquotes {quotes}, protected deliveries {contents}, sealed writes {stored}");
    assert_eq!(quotes, config.messages, "this flavour attests every single message");

    // The relay sees ciphertext only; the runner itself scans for leaked
    // plaintext and would have flagged a violation.
    assert!(outcome.summary.violations.is_empty());
    println!("relay scan found no readable content");

    // Tampering with a quote in transit withholds the message instead of
    // delivering to an unverified platform.
    let mut faulty = config;
    faulty.faults = vec!["TAMPER_BIT:kind=QUOTE:nth=1".to_string()];
    let outcome = push::run_seal(&faulty).unwrap();
    let withheld: Vec<_> = outcome
        .summary
        .events
        .iter()
        .filter(|e| e.contains("withheld"))
        .collect();
    println!("\nwith a tampered quote: {}", withheld[0]);
}
