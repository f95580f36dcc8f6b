// Runs the generic access workload over the simulated network: eight
// agents acquire pseudonymous group credentials, get charged, redeem at
// the receiving system, and the three operator ledgers are printed.
//
// Run with: cargo run --example generic_access

use trusted_tickets::harness::Segment;
use trusted_tickets::scenarios::{
    parse_groups, run_scenario, ScenarioConfig, ScenarioName,
};

fn main() {
    let mut config = ScenarioConfig::new(ScenarioName::Generic);
    config.seed = 41;
    config.agents = 8;
    // Two named services with their own prices and billing modes.
    config.groups =
        parse_groups("cinema:25:service=screenings,bus:3:mode=POST;service=transit").unwrap();

    let outcome = run_scenario(&config).unwrap();

    println!("== summary ==");
    print!("{}", outcome.summary.render());

    // The transcript is the complete wire view, one envelope per line:
    // seq|from|to|SEGMENT|KIND|hex(body).
    println!("\n== transcript (first 6 of {} envelopes) ==", outcome.transcript.lines().count());
    for line in outcome.transcript.lines().take(6) {
        let shown: String = line.chars().take(96).collect();
        println!("{shown}...");
    }

    // Quick wire statistics from the transcript alone.
    let mut kinds = std::collections::BTreeMap::new();
    let mut issuance = 0;
    for line in outcome.transcript.lines() {
        let mut fields = line.split('|');
        let (_seq, _from, _to) = (fields.next(), fields.next(), fields.next());
        let segment = fields.next().unwrap();
        let kind = fields.next().unwrap();
        *kinds.entry(kind.to_string()).or_insert(0u32) += 1;
        if segment == Segment::TaPca.as_str() {
            issuance += 1;
        }
    }
    println!("\n== wire statistics ==");
    println!("envelopes on the issuance segment: {issuance}");
    for (kind, count) in kinds {
        println!("{kind}: {count}");
    }

    for party in ["pca", "rs", "cp"] {
        println!("\n== {party} ledger ==");
        for line in &outcome.ledgers[party] {
            println!("{line}");
        }
    }

    assert!(outcome.summary.violations.is_empty(), "clean run must not flag violations");
}
