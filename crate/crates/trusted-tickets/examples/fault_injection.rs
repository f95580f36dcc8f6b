// Injects wire faults into the generic workload and shows how each one
// surfaces: tampering is caught by signatures, replays by the spend
// ledger, drops leave tickets unspent, and delays merely reorder.
//
// Run with: cargo run --example fault_injection

use trusted_tickets::scenarios::{run_scenario, ScenarioConfig, ScenarioName};

fn run_with(label: &str, faults: &[&str]) {
    let mut config = ScenarioConfig::new(ScenarioName::Generic);
    config.seed = 51;
    config.agents = 4;
    config.faults = faults.iter().map(|f| f.to_string()).collect();

    let outcome = run_scenario(&config).unwrap();
    println!("== {label} ==");
    for line in &outcome.summary.events {
        println!("  {line}");
    }
    for line in &outcome.summary.violations {
        println!("  violation: {line}");
    }
    println!();
}

fn main() {
    run_with("baseline, no faults", &[]);

    // One flipped bit in the first submission breaks a signature somewhere
    // in the chain; the service refuses, the agent keeps the ticket.
    run_with("bit flip on a ticket submission", &["TAMPER_BIT:kind=TICKET_SUBMIT:nth=1"]);

    // The wire duplicates the second submission. The copy reaches the
    // service after the original spent the identity, is refused, and the
    // duplicate's pseudonym gets resolved to its platform.
    run_with("replay of a ticket submission", &["REPLAY:kind=TICKET_SUBMIT:nth=2"]);

    // The acknowledgement for the first redemption never arrives. The
    // service has spent the identity, the agent keeps its ticket rather
    // than trusting a response it never saw.
    run_with("dropped acknowledgement", &["DROP:kind=TICKET_ACK:nth=1"]);

    // The first acknowledgement is held back for two further deliveries on
    // its segment, then released. Every redemption still completes; the
    // order of arrival is the only difference.
    run_with("delayed acknowledgement", &["DELAY:kind=TICKET_ACK:nth=1:window=2"]);
}
