//! Command-line front end.
//!
//! Three subcommands: `scenario` runs a workload and prints its summary,
//! `inspect` answers questions about a recorded transcript, and `ledger`
//! reproduces a run and prints one party's ledger. Exit codes: 0 on
//! success, 1 when a scenario finished with violated invariants or failed
//! mid-run, 2 for unusable arguments or inputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::harness::{count_kind, parse_transcript, timeline, Envelope, FaultPlan, Segment, Transport};
use crate::scenarios::{
    parse_groups, run_scenario, ConfigFile, ScenarioConfig, ScenarioName, ScenarioOutcome,
};

#[derive(Debug, Parser)]
#[command(
    name = "ttk",
    about = "Deterministic trusted-ticket simulation",
    version,
    max_term_width = 100
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that needs to run a scenario.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Root seed; equal seeds give byte-identical runs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of agents (devices in push scenarios).
    #[arg(long)]
    pub agents: Option<usize>,
    /// Groups: a count, or comma-separated name:price[:key=value[;...]].
    #[arg(long)]
    pub groups: Option<String>,
    /// Fault rule, repeatable: ACTION[:key=value]... with keys segment,
    /// kind, seq, nth, window.
    #[arg(long = "fault")]
    pub faults: Vec<String>,
    /// Write the transcript here; party ledgers land next to it.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Byte path between parties: inproc or socket.
    #[arg(long)]
    pub transport: Option<String>,
    /// TOML file with the same settings; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Push scenarios: number of content messages.
    #[arg(long)]
    pub messages: Option<usize>,
    /// Rating scenario: ratings per agent.
    #[arg(long)]
    pub ratings: Option<usize>,
    /// Rating scenario: flat, linear[:slope], frequency[:slope[:window]],
    /// or incentive[:amount].
    #[arg(long)]
    pub schedule: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario: generic, rating, push_seal, push_bind, or
    /// push_ticketed.
    Scenario {
        name: String,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Query a recorded transcript.
    Inspect {
        transcript: PathBuf,
        /// Count envelopes of this kind.
        #[arg(long)]
        count_kind: Option<String>,
        /// Restrict --needle-hex scanning to this segment.
        #[arg(long)]
        segment: Option<String>,
        /// Hex bytes to look for inside envelope bodies.
        #[arg(long)]
        needle_hex: Option<String>,
        /// Print one party's envelopes in order.
        #[arg(long)]
        party: Option<String>,
    },
    /// Re-run a scenario and print one party's ledger: pca, rs, or cp.
    Ledger {
        party: String,
        /// Scenario to reproduce (defaults to generic).
        #[arg(long)]
        scenario: Option<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
}

/// Resolves defaults, config file, and flags into a runnable configuration.
/// Errors are user mistakes and map to exit code 2.
pub fn build_config(name: ScenarioName, flags: &RunFlags) -> Result<ScenarioConfig, String> {
    let mut config = ScenarioConfig::new(name);
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let file = ConfigFile::parse(&text).map_err(|e| e.to_string())?;
        file.apply(&mut config).map_err(|e| e.to_string())?;
    }
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    if let Some(agents) = flags.agents {
        config.agents = agents;
    }
    if let Some(groups) = &flags.groups {
        config.groups = parse_groups(groups).map_err(|e| e.to_string())?;
    }
    if !flags.faults.is_empty() {
        config.faults = flags.faults.clone();
    }
    if let Some(transport) = &flags.transport {
        config.transport = Transport::parse(transport)
            .ok_or_else(|| format!("unknown transport {transport:?} (inproc or socket)"))?;
    }
    if let Some(messages) = flags.messages {
        config.messages = messages;
    }
    if let Some(ratings) = flags.ratings {
        config.ratings = ratings;
    }
    if let Some(schedule) = &flags.schedule {
        config.schedule = schedule.clone();
    }
    // Surface fault-spec mistakes before running anything.
    FaultPlan::parse_all(&config.faults).map_err(|e| e.to_string())?;
    Ok(config)
}

fn write_artifacts(outcome: &ScenarioOutcome, path: &Path) -> Result<(), String> {
    fs::write(path, &outcome.transcript)
        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    for (party, lines) in &outcome.ledgers {
        let ledger_path = PathBuf::from(format!("{}.{party}.ledger", path.display()));
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(&ledger_path, text)
            .map_err(|e| format!("cannot write {}: {e}", ledger_path.display()))?;
    }
    Ok(())
}

fn scenario_command(name: &str, flags: &RunFlags) -> i32 {
    let Some(name) = ScenarioName::parse(name) else {
        let known: Vec<&str> = ScenarioName::ALL.iter().map(|n| n.as_str()).collect();
        eprintln!("unknown scenario {name:?}; expected one of {}", known.join(", "));
        return 2;
    };
    let config = match build_config(name, flags) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("{message}");
            return 2;
        }
    };
    let outcome = match run_scenario(&config) {
        Ok(o) => o,
        Err(crate::scenarios::ScenarioError::Config(message)) => {
            eprintln!("{message}");
            return 2;
        }
        Err(e) => {
            eprintln!("scenario failed: {e}");
            return 1;
        }
    };
    print!("{}", outcome.summary.render());
    if let Some(path) = &flags.transcript {
        if let Err(message) = write_artifacts(&outcome, path) {
            eprintln!("{message}");
            return 2;
        }
    }
    if outcome.summary.violations.is_empty() {
        0
    } else {
        1
    }
}

fn overview(envelopes: &[Envelope]) -> String {
    use std::collections::BTreeMap;
    let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
    let mut by_segment: BTreeMap<&str, usize> = BTreeMap::new();
    for e in envelopes {
        *by_kind.entry(e.kind.as_str()).or_insert(0) += 1;
        *by_segment.entry(e.segment.as_str()).or_insert(0) += 1;
    }
    let mut out = format!("envelopes {}\n", envelopes.len());
    for (segment, n) in by_segment {
        out.push_str(&format!("segment {segment} {n}\n"));
    }
    for (kind, n) in by_kind {
        out.push_str(&format!("kind {kind} {n}\n"));
    }
    out
}

fn inspect_command(
    transcript: &Path,
    count: Option<&String>,
    segment: Option<&String>,
    needle_hex: Option<&String>,
    party: Option<&String>,
) -> i32 {
    let text = match fs::read_to_string(transcript) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", transcript.display());
            return 2;
        }
    };
    let envelopes = match parse_transcript(&text) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };

    let mut queried = false;
    if let Some(kind) = count {
        println!("{}", count_kind(&envelopes, kind));
        queried = true;
    }
    if let Some(hex_needle) = needle_hex {
        let Ok(needle) = hex::decode(hex_needle) else {
            eprintln!("--needle-hex is not valid hex");
            return 2;
        };
        if needle.is_empty() {
            eprintln!("--needle-hex needs at least one byte");
            return 2;
        }
        let segment = match segment {
            None => None,
            Some(raw) => match Segment::parse(raw) {
                Some(s) => Some(s),
                None => {
                    eprintln!("unknown segment {raw:?}");
                    return 2;
                }
            },
        };
        let hits: Vec<u64> = envelopes
            .iter()
            .filter(|e| segment.is_none_or(|s| e.segment == s))
            .filter(|e| e.body.windows(needle.len()).any(|w| w == needle))
            .map(|e| e.seq)
            .collect();
        if hits.is_empty() {
            println!("no matches");
        } else {
            for seq in hits {
                println!("match {seq}");
            }
        }
        queried = true;
    }
    if let Some(party) = party {
        for e in timeline(&envelopes, party) {
            println!("{}", e.transcript_line());
        }
        queried = true;
    }
    if !queried {
        print!("{}", overview(&envelopes));
    }
    0
}

fn ledger_command(party: &str, scenario: Option<&String>, flags: &RunFlags) -> i32 {
    if !["pca", "rs", "cp"].contains(&party) {
        eprintln!("unknown party {party:?}; expected pca, rs, or cp");
        return 2;
    }
    let name = match scenario {
        None => ScenarioName::Generic,
        Some(raw) => match ScenarioName::parse(raw) {
            Some(n) => n,
            None => {
                eprintln!("unknown scenario {raw:?}");
                return 2;
            }
        },
    };
    let config = match build_config(name, flags) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("{message}");
            return 2;
        }
    };
    let outcome = match run_scenario(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("scenario failed: {e}");
            return 1;
        }
    };
    for line in &outcome.ledgers[party] {
        println!("{line}");
    }
    0
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if e.kind() == ErrorKind::DisplayHelp
                || e.kind() == ErrorKind::DisplayVersion
                || e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 2;
        }
    };
    match &cli.command {
        Command::Scenario { name, flags } => scenario_command(name, flags),
        Command::Inspect { transcript, count_kind, segment, needle_hex, party } => {
            inspect_command(
                transcript,
                count_kind.as_ref(),
                segment.as_ref(),
                needle_hex.as_ref(),
                party.as_ref(),
            )
        }
        Command::Ledger { party, scenario, flags } => {
            ledger_command(party, scenario.as_ref(), flags)
        }
    }
}
