use std::path::Path;

use anchored_cil::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use anchored_cil::io::config::Config;
use anchored_cil::io::results::read_records;
use serde_json::Value;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Outcome {
    fn json(&self) -> Value {
        serde_json::from_str(self.stdout.trim()).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }
}

fn acil(args: &[&str]) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("acil").chain(args.iter().copied()), &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 14] = [
    "--d_in", "16", "--d", "8", "--k", "3", "--b", "2", "--samples_per_class", "10", "--epochs", "2",
    "--batch_size", "8",
];

fn generate(dir: &Path) {
    let mut args = vec!["gen", "--out", s(dir)];
    args.extend(SMALL);
    let o = acil(&args);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = acil(&["train", "--bogus", "1"]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.stderr.contains("--bogus"), "{}", o.stderr);
    assert!(o.stderr.to_lowercase().contains("usage"), "{}", o.stderr);
    assert_eq!(acil(&[]).code, EXIT_USAGE);
}

#[test]
fn help_exits_cleanly() {
    let o = acil(&["--help"]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.stdout.contains("verify"));
}

#[test]
fn invalid_config_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = acil(&["gen", "--out", s(dir.path()), "--k", "40"]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.stderr.contains("k = 40"), "{}", o.stderr);

    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "d = 8\nflavour = mint\n").unwrap();
    let o = acil(&["gen", "--out", s(dir.path()), "--config", s(&cfg)]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.stderr.contains("line 2"), "{}", o.stderr);

    let o = acil(&["gen", "--out", s(dir.path()), "--epsilon", "-1"]);
    assert_eq!(o.code, EXIT_USAGE);
}

#[test]
fn corrupt_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let train = dir.path().join("train.area");
    let test = dir.path().join("test.area");
    let state = dir.path().join("state.acst");

    let bytes = std::fs::read(&train).unwrap();
    let cut = dir.path().join("cut.area");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let mut args = vec!["train", "--train", s(&cut), "--test", s(&test), "--state", s(&state)];
    args.extend(SMALL);
    let o = acil(&args);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("truncated"), "{}", o.stderr);

    let mut args = vec!["train", "--train", s(&train), "--test", s(&test), "--state", s(&state)];
    args.extend(SMALL);
    assert_eq!(acil(&args).code, EXIT_OK);
    let mut bytes = std::fs::read(&state).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("bad.acst");
    std::fs::write(&bad, &bytes).unwrap();
    let o = acil(&["eval", "--state", s(&bad), "--test", s(&test)]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("digest mismatch"), "{}", o.stderr);

    let o = acil(&["eval", "--state", s(&dir.path().join("missing")), "--test", s(&test)]);
    assert_eq!(o.code, EXIT_DATA);

    // Data generated for d_in = 16 does not fit the default d_in.
    let o = acil(&["train", "--train", s(&train), "--test", s(&test), "--state", s(&state)]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("d_in"), "{}", o.stderr);
}

#[test]
fn verify_quick_reports_every_battery() {
    let o = acil(&["verify", "--quick"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let v = o.json();
    assert_eq!(v["ok"], true);
    assert_eq!(v["passed"], v["trials"]);
    let names: Vec<&str> = v["batteries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["name"].as_str().unwrap())
        .collect();
    for want in ["log_exp_round_trip", "dirac_closed_form", "pga_subspace", "grad_intervention"] {
        assert!(names.contains(&want), "{names:?}");
    }
}

#[test]
fn train_then_eval_agree_and_log_the_config_digest() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let train = dir.path().join("train.area");
    let test = dir.path().join("test.area");
    let state = dir.path().join("state.acst");
    let log = dir.path().join("results.jsonl");
    let cfg_path = dir.path().join("config.txt");

    let t = acil(&[
        "train", "--config", s(&cfg_path), "--train", s(&train), "--test", s(&test), "--state", s(&state),
        "--results", s(&log),
    ]);
    assert_eq!(t.code, EXIT_OK, "{}", t.stderr);
    let t = t.json();

    let e = acil(&["eval", "--state", s(&state), "--test", s(&test), "--results", s(&log)]);
    assert_eq!(e.code, EXIT_OK, "{}", e.stderr);
    let e = e.json();
    assert_eq!(t["last_accuracy"], e["accuracy"]);
    assert_eq!(t["state_digest"], e["state_digest"]);

    let digest = Config::load(&cfg_path).unwrap().digest_hex();
    assert_eq!(t["config_digest"], digest.as_str());
    let records = read_records(&log).unwrap();
    assert!(records.iter().any(|r| r.run == "train"));
    assert!(records.iter().any(|r| r.run == "eval"));
    assert!(records.iter().all(|r| r.config_digest == digest));
}

#[test]
fn ablate_reports_requested_variants() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let train = dir.path().join("train.area");
    let test = dir.path().join("test.area");
    let mut args = vec![
        "ablate",
        "--train",
        s(&train),
        "--test",
        s(&test),
        "--variants",
        "full,sim_only",
    ];
    args.extend(SMALL);
    let o = acil(&args);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let v = o.json();
    let variants = v["variants"].as_object().unwrap();
    assert_eq!(variants.len(), 2);
    assert!(variants.contains_key("full") && variants.contains_key("sim_only"));

    let mut args = vec![
        "ablate",
        "--train",
        s(&train),
        "--test",
        s(&test),
        "--variants",
        "nonsense",
    ];
    args.extend(SMALL);
    assert_eq!(acil(&args).code, EXIT_USAGE);
}
