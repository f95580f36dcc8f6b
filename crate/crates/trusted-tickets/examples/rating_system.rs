// Pseudonymous ratings: every rating rides on a fresh one-shot identity,
// the platform history needed for usage-based pricing lives only at the
// certification authority, and aggregation weights each score by the
// group's impact factor.
//
// Run with: cargo run --example rating_system

use trusted_tickets::scenarios::rating::{self, PriceSchedule};
use trusted_tickets::scenarios::{parse_groups, ScenarioConfig, ScenarioName};

fn run_with_schedule(label: &str, schedule: &str) -> rating::RatingRun {
    let mut config = ScenarioConfig::new(ScenarioName::Rating);
    config.seed = 61;
    config.agents = 3;
    config.ratings = 3;
    // Two reviewer classes: experts count three times as much as guests.
    config.groups = parse_groups("expert:10:impact_factor=3,guest:5:impact_factor=1").unwrap();
    config.schedule = schedule.to_string();

    let run = rating::run(&config).unwrap();
    println!("== {label} (schedule {schedule}) ==");
    println!("prices charged, in order: {:?}", run.prices);
    for line in &run.outcome.summary.events {
        if line.contains("aggregate") || line.contains("recorded") || line.contains("escrowed") {
            println!("  {line}");
        }
    }
    println!();
    run
}

fn main() {
    // Flat pricing: the group price, every time.
    run_with_schedule("flat rate", "flat");

    // Each platform pays one unit more per rating it has already bought.
    // The count lives in the authority's escrow, keyed by platform, so the
    // rating portal never learns it.
    run_with_schedule("linear in platform usage", "linear:1");

    // Only recent activity counts: two units per rating inside the window.
    run_with_schedule("frequency with a sliding window", "frequency:2:4");

    // Negative price: the provider pays platforms for contributing.
    let run = run_with_schedule("incentive payments", "incentive:5");
    println!("incentives settle through the provider ledger:");
    for line in &run.outcome.ledgers["cp"] {
        if line.starts_with("balance") {
            println!("  {line}");
        }
    }

    // The aggregate is an exact rational, never a rounded float.
    println!("\nweighted aggregates (score sum / weight sum):");
    for (subject, value) in &run.aggregates {
        println!("  subject {}.. -> {value}", &subject.to_hex()[..8]);
    }

    // Same schedule arithmetic, spelled out.
    let schedule = PriceSchedule::LinearCount { slope: 1 };
    let past = [1, 2, 3];
    println!(
        "\nlinear schedule check: base 10 with {} prior ratings -> {}",
        past.len(),
        schedule.price_for(10, &past, 9)
    );
}
