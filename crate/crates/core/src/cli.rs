//! The `acil` command line.
//!
//! Every config field is available as a `--key value` flag on every
//! subcommand, applied on top of the defaults and of `--config <path>` if
//! given. A successful command prints one JSON line on stdout.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or config error, 3 data
//! error, 4 verification failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{json, Map, Value};

use crate::error::Error;
use crate::io::config::{Config, Variant, KEYS};
use crate::io::dataset::{load_dataset, save_dataset};
use crate::io::results::{append_records, report_records, ResultRecord};
use crate::io::state::{load_state, save_state, state_digest};
use crate::io::synth::gen_synthetic;
use crate::pipeline::{evaluate_stage, run_ablation, run_training, Predictor, RoutingMode, StagedSource, TaskStream};
use crate::verify::{run_all, Plan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

enum Failure {
    Usage(String),
    Lib(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) => EXIT_USAGE,
        Error::Format { .. }
        | Error::Truncated { .. }
        | Error::Version { .. }
        | Error::DigestMismatch { .. }
        | Error::Io(_)
        | Error::Geometry(_)
        | Error::Dimension(_)
        | Error::UnknownTask(_)
        | Error::InsufficientData(_) => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn optional(arg: Arg) -> Arg {
    arg.required(false)
}

pub fn command() -> Command {
    let mut cmd = Command::new("acil")
        .about("Exemplar-free class-incremental learning with anchored attributes and transport routing")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(clap::value_parser!(PathBuf))
                .global(true)
                .help("Flat `key = value` config file"),
        );
    let defaults = Config::default();
    for key in KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .global(true)
                .help(format!("default {}", defaults.get(key).unwrap_or_default()))
                .help_heading("Config"),
        );
    }
    cmd.subcommand(
        Command::new("gen")
            .about("Generate a synthetic train/test pair")
            .arg(path_arg("out", "Output directory (train.area, test.area, config.txt)")),
    )
    .subcommand(
        Command::new("train")
            .about("Learn every task of a training file and save the state")
            .arg(path_arg("train", "Training dataset"))
            .arg(path_arg("test", "Test dataset used for stage evaluation"))
            .arg(path_arg("state", "Where to write the state"))
            .arg(optional(path_arg("results", "Results log to append to")))
            .arg(Arg::new("run").long("run").value_name("ID").default_value("train")),
    )
    .subcommand(
        Command::new("eval")
            .about("Evaluate a saved state on a test file")
            .arg(path_arg("state", "Saved state"))
            .arg(path_arg("test", "Test dataset"))
            .arg(optional(path_arg("results", "Results log to append to")))
            .arg(Arg::new("run").long("run").value_name("ID").default_value("eval")),
    )
    .subcommand(
        Command::new("verify").about("Run the oracle batteries").arg(
            Arg::new("quick")
                .long("quick")
                .action(ArgAction::SetTrue)
                .help("Smaller instance counts"),
        ),
    )
    .subcommand(
        Command::new("ablate")
            .about("Compare inference and anchor variants on one stream")
            .arg(path_arg("train", "Training dataset"))
            .arg(path_arg("test", "Test dataset"))
            .arg(
                Arg::new("variants")
                    .long("variants")
                    .value_name("LIST")
                    .value_delimiter(',')
                    .help("Comma-separated variants (default: all)"),
            )
            .arg(optional(path_arg("results", "Results log to append to")))
            .arg(Arg::new("run").long("run").value_name("ID").default_value("ablate")),
    )
}

fn config_from(m: &ArgMatches) -> Result<Config, Failure> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by clap")
}

fn check_dim(stream: &TaskStream, cfg: &Config, what: &str) -> Result<(), Failure> {
    if let Some(s) = stream.samples().next() {
        if s.dim() != cfg.d_in {
            return Err(Error::Dimension(format!(
                "{what} has d_in = {} but the config says {}",
                s.dim(),
                cfg.d_in
            ))
            .into());
        }
    }
    Ok(())
}

fn log(m: &ArgMatches, records: &[ResultRecord]) -> Result<(), Failure> {
    if let Some(p) = m.get_one::<PathBuf>("results") {
        append_records(p, records)?;
    }
    Ok(())
}

fn cmd_gen(cfg: &Config, m: &ArgMatches) -> Result<Value, Failure> {
    let out = path(m, "out");
    let (train, test) = gen_synthetic(cfg)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let train_path = out.join("train.area");
    let test_path = out.join("test.area");
    save_dataset(&train_path, &train)?;
    save_dataset(&test_path, &test)?;
    std::fs::write(out.join("config.txt"), cfg.render()).map_err(Error::from)?;
    Ok(json!({
        "command": "gen",
        "train": train_path.display().to_string(),
        "test": test_path.display().to_string(),
        "tasks": train.len(),
        "train_samples": train.num_samples(),
        "test_samples": test.num_samples(),
        "split": train.descriptor(),
        "config_digest": cfg.digest_hex(),
    }))
}

fn cmd_train(cfg: &Config, m: &ArgMatches) -> Result<Value, Failure> {
    let train = load_dataset(path(m, "train"))?;
    let test = load_dataset(path(m, "test"))?;
    check_dim(&train, cfg, "training data")?;
    check_dim(&test, cfg, "test data")?;
    let run = run_training(&mut StagedSource::new(&train), &test, cfg)?;
    save_state(path(m, "state"), &run.state)?;
    let id = m.get_one::<String>("run").expect("defaulted");
    log(m, &report_records(id, &run.report))?;
    let r = &run.report;
    Ok(json!({
        "command": "train",
        "variant": r.variant,
        "stages": r.stages.len(),
        "average_accuracy": r.average_accuracy,
        "last_accuracy": r.last_accuracy,
        "max_forgetting": r.max_forgetting,
        "state_digest": format!("{:016x}", state_digest(&run.state)),
        "config_digest": r.config_digest,
    }))
}

fn cmd_eval(m: &ArgMatches) -> Result<Value, Failure> {
    let state = load_state(path(m, "state"))?;
    let test = load_dataset(path(m, "test"))?;
    check_dim(&test, &state.config, "test data")?;
    let p = Predictor::new(&state, RoutingMode::for_variant(state.config.variant))?;
    let stage = state.task_order.len().saturating_sub(1);
    let s = evaluate_stage(&p, &test, stage)?;
    let digest = state.config.digest_hex();
    let id = m.get_one::<String>("run").expect("defaulted");
    let rec = |metric: &str, value| ResultRecord {
        run: id.clone(),
        stage: Some(stage),
        metric: metric.into(),
        value,
        config_digest: digest.clone(),
    };
    log(
        m,
        &[
            rec("accuracy", s.accuracy),
            rec("routing_accuracy", s.routing_accuracy),
            rec("zero_shot_accuracy", s.zero_shot_accuracy),
        ],
    )?;
    Ok(json!({
        "command": "eval",
        "variant": state.config.variant.name(),
        "accuracy": s.accuracy,
        "routing_accuracy": s.routing_accuracy,
        "zero_shot_accuracy": s.zero_shot_accuracy,
        "samples": s.samples,
        "state_digest": format!("{:016x}", state_digest(&state)),
        "config_digest": digest,
    }))
}

fn cmd_verify(cfg: &Config, m: &ArgMatches) -> Result<Value, Failure> {
    let plan = if m.get_flag("quick") { Plan::quick() } else { Plan::full() };
    let batteries = run_all(&plan, cfg.seed)?;
    let failed: Vec<&str> = batteries.iter().filter(|b| !b.ok()).map(|b| b.name.as_str()).collect();
    let summary = json!({
        "command": "verify",
        "ok": failed.is_empty(),
        "passed": batteries.iter().map(|b| b.passed).sum::<usize>(),
        "trials": batteries.iter().map(|b| b.trials).sum::<usize>(),
        "batteries": batteries,
    });
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(Failure::Verify(format!("{summary}\nfailed batteries: {}", failed.join(", "))))
    }
}

fn cmd_ablate(cfg: &Config, m: &ArgMatches) -> Result<Value, Failure> {
    let variants: Vec<Variant> = match m.get_many::<String>("variants") {
        Some(vs) => vs.map(|v| v.parse()).collect::<Result<_, Error>>()?,
        None => Variant::ALL.to_vec(),
    };
    let train = load_dataset(path(m, "train"))?;
    let test = load_dataset(path(m, "test"))?;
    check_dim(&train, cfg, "training data")?;
    check_dim(&test, cfg, "test data")?;
    let reports = run_ablation(&train, &test, cfg, &variants)?;
    let id = m.get_one::<String>("run").expect("defaulted");
    let mut out = Map::new();
    let mut records = Vec::new();
    for (v, r) in &reports {
        records.extend(report_records(&format!("{id}/{}", v.name()), r));
        out.insert(
            v.name().to_string(),
            json!({
                "average_accuracy": r.average_accuracy,
                "last_accuracy": r.last_accuracy,
                "max_forgetting": r.max_forgetting,
            }),
        );
    }
    log(m, &records)?;
    Ok(json!({
        "command": "ablate",
        "config_digest": cfg.digest_hex(),
        "variants": out,
    }))
}

fn dispatch(m: &ArgMatches) -> Result<Value, Failure> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    if name == "eval" {
        return cmd_eval(sub);
    }
    let cfg = config_from(sub)?;
    match name {
        "gen" => cmd_gen(&cfg, sub),
        "train" => cmd_train(&cfg, sub),
        "verify" => cmd_verify(&cfg, sub),
        "ablate" => cmd_ablate(&cfg, sub),
        other => Err(Failure::Usage(format!("unknown subcommand {other}"))),
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{text}");
            return code;
        }
    };
    match dispatch(&matches) {
        Ok(summary) => {
            let _ = writeln!(out, "{summary}");
            EXIT_OK
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Verify(msg)) => {
            let _ = writeln!(err, "verification failed: {msg}");
            EXIT_VERIFY
        }
        Err(Failure::Lib(e)) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
