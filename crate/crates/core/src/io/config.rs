//! Run configuration as a flat `key = value` text file.
//!
//! Every field is a scalar. Keys are case-insensitive (`K`, `B` and `M` are
//! accepted for `k`, `b` and `m`), `#` starts a comment, and unknown or
//! repeated keys are rejected. The canonical rendering lists every field in
//! declaration order and is what the config digest is computed over.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::PerturbationSpec;
use crate::error::{Error, Result};
use crate::expert::{LossWeights, LrSchedule, TrainConfig};
use crate::hash::fnv1a;
use crate::routing::OtParams;

/// Inference/anchoring variant of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// PGA anchors, Sinkhorn routing, soft mixture.
    #[default]
    Full,
    /// Euclidean PCA anchors, otherwise full.
    Pca,
    /// Uniform routing weights.
    SimOnly,
    /// All weight on the cheapest task.
    SingleTask,
    /// Softmax over best single-atom cosine instead of transport.
    CosineRoute,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Pca,
        Variant::SimOnly,
        Variant::SingleTask,
        Variant::CosineRoute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Pca => "pca",
            Variant::SimOnly => "sim_only",
            Variant::SingleTask => "single_task",
            Variant::CosineRoute => "cosine_route",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim().replace('-', "_"))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected one of full, pca, sim_only, single_task, cosine_route)"
                ))
            })
    }
}

fn parse_schedule(s: &str) -> Result<LrSchedule> {
    match s {
        "cosine" => Ok(LrSchedule::Cosine),
        "step" => Ok(LrSchedule::Step),
        _ => Err(Error::Config(format!("unknown lr_schedule '{s}' (expected cosine or step)"))),
    }
}

fn schedule_name(s: LrSchedule) -> &'static str {
    match s {
        LrSchedule::Cosine => "cosine",
        LrSchedule::Step => "step",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub d_in: usize,
    pub d: usize,
    pub k: usize,
    pub b: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub spread_sigma: f64,
    pub min_class_angle: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_schedule: LrSchedule,
    pub lambda_int: f64,
    pub lambda_comp: f64,
    pub tau_cont: f64,
    pub epsilon: f64,
    pub tau_route: f64,
    pub debias: bool,
    pub m: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d_in: 128,
            d: 32,
            k: 8,
            b: 5,
            classes_per_task: 4,
            samples_per_class: 50,
            spread_sigma: 0.05,
            min_class_angle: 0.5,
            epochs: 20,
            batch_size: 64,
            lr_init: 0.05,
            lr_schedule: LrSchedule::Cosine,
            lambda_int: 0.8,
            lambda_comp: 1.0,
            tau_cont: 0.07,
            epsilon: 0.1,
            tau_route: 0.05,
            debias: false,
            m: 3,
            rho_min: 0.02,
            rho_max: 0.4,
            seed: 1993,
            variant: Variant::Full,
        }
    }
}

/// Field names in canonical order.
pub const KEYS: [&str; 23] = [
    "d_in",
    "d",
    "k",
    "b",
    "classes_per_task",
    "samples_per_class",
    "spread_sigma",
    "min_class_angle",
    "epochs",
    "batch_size",
    "lr_init",
    "lr_schedule",
    "lambda_int",
    "lambda_comp",
    "tau_cont",
    "epsilon",
    "tau_route",
    "debias",
    "m",
    "rho_min",
    "rho_max",
    "seed",
    "variant",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

impl Config {
    /// The overlapping fixture: wider classes, closer class means.
    pub fn overlapping() -> Self {
        Self {
            spread_sigma: 0.25,
            min_class_angle: 0.2,
            ..Self::default()
        }
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        match key.as_str() {
            "d_in" => self.d_in = parse_num(&key, value)?,
            "d" => self.d = parse_num(&key, value)?,
            "k" => self.k = parse_num(&key, value)?,
            "b" => self.b = parse_num(&key, value)?,
            "classes_per_task" => self.classes_per_task = parse_num(&key, value)?,
            "samples_per_class" => self.samples_per_class = parse_num(&key, value)?,
            "spread_sigma" => self.spread_sigma = parse_num(&key, value)?,
            "min_class_angle" => self.min_class_angle = parse_num(&key, value)?,
            "epochs" => self.epochs = parse_num(&key, value)?,
            "batch_size" => self.batch_size = parse_num(&key, value)?,
            "lr_init" => self.lr_init = parse_num(&key, value)?,
            "lr_schedule" => self.lr_schedule = parse_schedule(value)?,
            "lambda_int" => self.lambda_int = parse_num(&key, value)?,
            "lambda_comp" => self.lambda_comp = parse_num(&key, value)?,
            "tau_cont" => self.tau_cont = parse_num(&key, value)?,
            "epsilon" => self.epsilon = parse_num(&key, value)?,
            "tau_route" => self.tau_route = parse_num(&key, value)?,
            "debias" => self.debias = parse_num(&key, value)?,
            "m" => self.m = parse_num(&key, value)?,
            "rho_min" => self.rho_min = parse_num(&key, value)?,
            "rho_max" => self.rho_max = parse_num(&key, value)?,
            "seed" => self.seed = parse_num(&key, value)?,
            "variant" => self.variant = value.parse()?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key.to_ascii_lowercase().as_str() {
            "d_in" => self.d_in.to_string(),
            "d" => self.d.to_string(),
            "k" => self.k.to_string(),
            "b" => self.b.to_string(),
            "classes_per_task" => self.classes_per_task.to_string(),
            "samples_per_class" => self.samples_per_class.to_string(),
            "spread_sigma" => format!("{:?}", self.spread_sigma),
            "min_class_angle" => format!("{:?}", self.min_class_angle),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_init" => format!("{:?}", self.lr_init),
            "lr_schedule" => schedule_name(self.lr_schedule).to_string(),
            "lambda_int" => format!("{:?}", self.lambda_int),
            "lambda_comp" => format!("{:?}", self.lambda_comp),
            "tau_cont" => format!("{:?}", self.tau_cont),
            "epsilon" => format!("{:?}", self.epsilon),
            "tau_route" => format!("{:?}", self.tau_route),
            "debias" => self.debias.to_string(),
            "m" => self.m.to_string(),
            "rho_min" => format!("{:?}", self.rho_min),
            "rho_max" => format!("{:?}", self.rho_max),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let norm = key.trim().to_ascii_lowercase();
            if !seen.insert(norm.clone()) {
                return Err(Error::Config(format!("line {}: duplicate key '{norm}'", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Every field as `key = value`, one per line, in canonical order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("canonical key"));
            out.push('\n');
        }
        out
    }

    /// FNV-1a of the canonical rendering.
    pub fn digest(&self) -> u64 {
        fnv1a(self.render().as_bytes())
    }

    pub fn digest_hex(&self) -> String {
        format!("{:016x}", self.digest())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("d_in", self.d_in),
            ("d", self.d),
            ("k", self.k),
            ("b", self.b),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("m", self.m),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.k >= self.d {
            return fail(format!("k = {} must be smaller than d = {}", self.k, self.d));
        }
        if self.d_in < 4 {
            return fail("d_in must be at least 4 for block occlusion".into());
        }
        if self.classes_per_task < 2 {
            return fail("classes_per_task must be at least 2".into());
        }
        if self.samples_per_class < 3 {
            return fail("samples_per_class must be at least 3 (2 for training, 1 held out)".into());
        }
        if !(self.spread_sigma >= 0.0 && self.spread_sigma.is_finite()) {
            return fail("spread_sigma must be finite and non-negative".into());
        }
        if !(self.min_class_angle >= 0.0 && self.min_class_angle < std::f64::consts::PI) {
            return fail("min_class_angle must lie in [0, π)".into());
        }
        for (name, v) in [
            ("lr_init", self.lr_init),
            ("tau_cont", self.tau_cont),
            ("epsilon", self.epsilon),
            ("tau_route", self.tau_route),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lambda_int", self.lambda_int), ("lambda_comp", self.lambda_comp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative"));
            }
        }
        self.perturbation().validate().map_err(|e| Error::Config(strip_prefix(e)))?;
        Ok(())
    }

    pub fn perturbation(&self) -> PerturbationSpec {
        PerturbationSpec {
            rho_min: self.rho_min,
            rho_max: self.rho_max,
            views: self.m,
            ..PerturbationSpec::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_init: self.lr_init,
            schedule: self.lr_schedule,
            perturb: self.perturbation(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_int: self.lambda_int,
            lambda_comp: self.lambda_comp,
            tau_cont: self.tau_cont,
        }
    }

    pub fn ot_params(&self) -> OtParams<f64> {
        OtParams {
            epsilon: self.epsilon,
            tau_route: self.tau_route,
            debias: self.debias,
            ..OtParams::default()
        }
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}
