//! Exercises the installed `ttk` binary end to end: argument parsing, exit
//! codes, transcript and ledger artifacts, and the inspect queries. Exit
//! code 1 is reserved for violated invariants or mid-run transport failure,
//! neither of which a healthy build can produce, so these tests pin codes
//! 0 and 2.

mod common;

use std::path::Path;
use std::process::{Command, Output};

fn ttk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttk"))
        .args(args)
        .output()
        .expect("spawn ttk")
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("utf8 stdout")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

#[test]
fn scenario_runs_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("run.transcript");
    let out = ttk(&[
        "scenario",
        "generic",
        "--seed",
        "11",
        "--agents",
        "3",
        "--transcript",
        transcript.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("policy published"));
    assert!(text.contains("acknowledgements verified: 3"));
    assert!(!text.contains("violation:"));

    let recorded = std::fs::read_to_string(&transcript).unwrap();
    let wire = common::parse_wire(&recorded);
    assert_eq!(wire.iter().filter(|l| l.kind == "TICKET_SUBMIT").count(), 3);

    let sidecar = |party: &str| {
        let path = format!("{}.{party}.ledger", transcript.display());
        std::fs::read_to_string(path).unwrap()
    };
    assert!(sidecar("pca").contains("escrow_records 3"));
    assert!(sidecar("rs").contains("spent_identities 3"));
    assert!(sidecar("cp").trim_end().ends_with("trial_balance 0"));
}

#[test]
fn reruns_are_byte_identical() {
    let args =
        ["ledger", "cp", "--seed", "7", "--agents", "4", "--groups", "2"];
    let first = ttk(&args);
    let second = ttk(&args);
    assert_eq!(code(&first), 0);
    assert_eq!(first.stdout, second.stdout);
    assert!(stdout(&first).contains("trial_balance 0"));

    let dir = tempfile::tempdir().unwrap();
    let record = |name: &str| {
        let path = dir.path().join(name);
        let out = ttk(&[
            "scenario",
            "push_seal",
            "--seed",
            "5",
            "--agents",
            "2",
            "--messages",
            "4",
            "--transcript",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        std::fs::read(path).unwrap()
    };
    assert_eq!(record("a.transcript"), record("b.transcript"));
}

#[test]
fn inspect_answers_queries() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("run.transcript");
    let out = ttk(&[
        "scenario",
        "generic",
        "--seed",
        "3",
        "--agents",
        "2",
        "--transcript",
        transcript.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let path = transcript.to_str().unwrap();

    // Bare inspect prints an overview.
    let overview = ttk(&["inspect", path]);
    assert_eq!(code(&overview), 0);
    let text = stdout(&overview);
    assert!(text.starts_with("envelopes "));
    assert!(text.contains("segment TA_RS"));
    assert!(text.contains("kind TICKET_SUBMIT 2"));

    let count = ttk(&["inspect", path, "--count-kind", "TICKET_SUBMIT"]);
    assert_eq!(stdout(&count).trim(), "2");

    // A needle taken from a recorded body is found; a fabricated one is not.
    let recorded = std::fs::read_to_string(&transcript).unwrap();
    let wire = common::parse_wire(&recorded);
    let submit = wire.iter().find(|l| l.kind == "TICKET_SUBMIT").unwrap();
    let present = hex::encode(&submit.body[40..56]);
    let hits = ttk(&["inspect", path, "--needle-hex", &present, "--segment", "TA_RS"]);
    assert_eq!(code(&hits), 0);
    assert!(stdout(&hits).lines().all(|l| l.starts_with("match ")));
    assert!(stdout(&hits).lines().count() >= 1);

    let absent = "00112233445566778899aabbccddeeff0123456789abcdef";
    let misses = ttk(&["inspect", path, "--needle-hex", absent]);
    assert_eq!(stdout(&misses).trim(), "no matches");

    let party = ttk(&["inspect", path, "--party", "agent-0"]);
    assert_eq!(code(&party), 0);
    let party_text = stdout(&party);
    let lines: Vec<&str> = party_text.lines().collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l.contains("agent-0")));
}

#[test]
fn faults_show_up_as_events_not_failures() {
    let out = ttk(&[
        "scenario",
        "generic",
        "--seed",
        "13",
        "--agents",
        "3",
        "--fault",
        "TAMPER_BIT:kind=TICKET_SUBMIT:nth=1",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("redemption failed"));
    assert!(!text.contains("violation:"));
}

#[test]
fn usage_errors_exit_two() {
    let cases: &[&[&str]] = &[
        &["scenario", "karaoke"],
        &["scenario", "generic", "--transport", "pigeon"],
        &["scenario", "generic", "--fault", "EXPLODE"],
        &["scenario", "generic", "--groups", "cinema"],
        &["scenario", "generic", "--config", "/no/such/file.toml"],
        &["ledger", "bank"],
        &["ledger", "cp", "--scenario", "karaoke"],
        &["inspect", "/no/such/transcript"],
        &["teleport"],
    ];
    for case in cases {
        let out = ttk(case);
        assert_eq!(code(&out), 2, "args {case:?}");
        assert!(!out.stderr.is_empty(), "args {case:?} should explain itself");
    }

    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("t");
    std::fs::write(&transcript, "not a transcript\n").unwrap();
    let out = ttk(&["inspect", transcript.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    assert!(Path::new(env!("CARGO_BIN_EXE_ttk")).exists());
}

#[test]
fn help_and_version_exit_zero() {
    let help = ttk(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = stdout(&help);
    for word in ["scenario", "inspect", "ledger"] {
        assert!(text.contains(word));
    }
    assert_eq!(code(&ttk(&["--version"])), 0);
    assert_eq!(code(&ttk(&["scenario", "--help"])), 0);
}
