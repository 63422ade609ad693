//! Experiment configuration: every tunable of data generation, training,
//! sampling, losses and the classifier under one flat `key = value`
//! namespace.
//!
//! Resolution order, later wins: built-in defaults, the `RECAL_SEED`
//! environment variable (root seed only), the config file, command-line
//! overrides. Unknown keys are rejected.

use crate::calibration::{NegativeMode, PositiveMode};
use crate::dataset::Precision;
use crate::error::{Error, Result};
use crate::head::ClassifierConfig;
use crate::kv;
use crate::losses::CsReduction;
use crate::synthetic::SyntheticSpec;
use crate::training::{SweepAxis, TrainConfig};
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

pub const SEED_ENV: &str = "RECAL_SEED";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Dataset for `eval` and `export-embeddings`.
    pub eval: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub precision: Precision,
    pub erm: TrainConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<f64>,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SyntheticSpec::default(),
            precision: Precision::F64,
            erm: TrainConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            sweep_axis: SweepAxis::Lambda,
            sweep_values: vec![0.1, 0.2, 0.5, 1.0, 2.0, 5.0],
            paths: Paths::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn groups(key: &str, v: &str) -> Result<[usize; 4]> {
    let list: Vec<usize> = kv::parse_list(v, "config", 0).map_err(|_| Error::config(format!("{key}: bad list {v:?}")))?;
    list.try_into()
        .map_err(|l: Vec<usize>| Error::config(format!("{key}: expected 4 group sizes, got {}", l.len())))
}

fn text<T: Display>(v: T) -> String {
    v.to_string()
}

impl ExperimentConfig {
    /// Desk-scale benchmark settings: the default synthetic data with step
    /// sizes large enough to converge in 20 epochs.
    pub fn benchmark() -> Self {
        let mut cfg = Self::default();
        cfg.erm.lr = 0.05;
        cfg.erm.epochs = 20;
        cfg.train.lr = 0.02;
        cfg.train.epochs = 20;
        cfg
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        if let Some(rest) = key.strip_prefix("erm.") {
            return set_train(&mut self.erm, rest, key, v);
        }
        if let Some(rest) = key.strip_prefix("train.") {
            return set_train(&mut self.train, rest, key, v);
        }
        let path = || Some(PathBuf::from(v));
        match key {
            "seed" => self.seed = value(key, v)?,
            "data.n_per_group" => self.data.n_per_group = groups(key, v)?,
            "data.val_per_group" => self.data.val_per_group = groups(key, v)?,
            "data.test_per_group" => self.data.test_per_group = groups(key, v)?,
            "data.core_separation" => self.data.core_separation = value(key, v)?,
            "data.spurious_separation" => self.data.spurious_separation = value(key, v)?,
            "data.d_in" => self.data.d_in = value(key, v)?,
            "data.d_out" => self.data.d_out = value(key, v)?,
            "data.noise_sigma" => self.data.noise_sigma = value(key, v)?,
            "data.precision" => self.precision = value(key, v)?,
            "sampler.positive_mode" => self.train.sampler.positive_mode = PositiveMode::from_str(v)?,
            "sampler.negative_mode" => self.train.sampler.negative_mode = NegativeMode::from_str(v)?,
            "sampler.p_size" => self.train.sampler.p_size = value(key, v)?,
            "sampler.n_size" => self.train.sampler.n_size = value(key, v)?,
            "sampler.nns_candidate_size" => self.train.sampler.nns_candidate_size = value(key, v)?,
            "loss.tau" => self.train.loss.tau = value(key, v)?,
            "loss.lambda" => self.train.loss.lambda = value(key, v)?,
            "loss.holistic" => self.train.loss.holistic = value(key, v)?,
            "loss.cs_reduction" => self.train.loss.cs_reduction = CsReduction::from_str(v)?,
            "classifier.beta" => self.classifier.beta = value(key, v)?,
            "classifier.normalize_output" => self.classifier.normalize_output = value(key, v)?,
            "classifier.beta_in_training" => self.classifier.beta_in_training = value(key, v)?,
            "sweep.axis" => self.sweep_axis = SweepAxis::from_str(v)?,
            "sweep.values" => {
                self.sweep_values =
                    kv::parse_list(v, "config", 0).map_err(|_| Error::config(format!("{key}: bad list {v:?}")))?
            }
            "paths.train" => self.paths.train = path(),
            "paths.val" => self.paths.val = path(),
            "paths.test" => self.paths.test = path(),
            "paths.eval" => self.paths.eval = path(),
            "paths.head" => self.paths.head = path(),
            "paths.out" => self.paths.out = path(),
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file's entries on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let entries = kv::parse(text, "config").map_err(|e| Error::config(e.to_string()))?;
        for e in entries {
            self.set(&e.key, &e.value)
                .map_err(|err| Error::config(format!("line {}: {err}", e.line)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Full resolution from optional env seed, file text and overrides.
    pub fn resolve(env_seed: Option<&str>, file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}: cannot parse {s:?}")))?;
        }
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates the root seed into every component.
    pub fn seeded(&self) -> Self {
        let mut cfg = self.clone();
        cfg.data.seed = self.seed;
        cfg.erm.seed = self.seed;
        cfg.train.seed = self.seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.erm.validate()?;
        self.train.validate()?;
        self.classifier.validate()
    }

    /// Every key with its current value, in a fixed order. Unset paths are
    /// omitted.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), text(self.seed)),
            ("data.n_per_group".into(), kv::join_list(&d.n_per_group)),
            ("data.val_per_group".into(), kv::join_list(&d.val_per_group)),
            ("data.test_per_group".into(), kv::join_list(&d.test_per_group)),
            ("data.core_separation".into(), text(d.core_separation)),
            ("data.spurious_separation".into(), text(d.spurious_separation)),
            ("data.d_in".into(), text(d.d_in)),
            ("data.d_out".into(), text(d.d_out)),
            ("data.noise_sigma".into(), text(d.noise_sigma)),
            ("data.precision".into(), text(self.precision)),
        ];
        for (prefix, t) in [("erm", &self.erm), ("train", &self.train)] {
            for (k, v) in train_entries(t) {
                out.push((format!("{prefix}.{k}"), v));
            }
        }
        let s = &self.train.sampler;
        let l = &self.train.loss;
        let c = &self.classifier;
        out.extend([
            ("sampler.positive_mode".into(), text(s.positive_mode)),
            ("sampler.negative_mode".into(), text(s.negative_mode)),
            ("sampler.p_size".into(), text(s.p_size)),
            ("sampler.n_size".into(), text(s.n_size)),
            ("sampler.nns_candidate_size".into(), text(s.nns_candidate_size)),
            ("loss.tau".into(), text(l.tau)),
            ("loss.lambda".into(), text(l.lambda)),
            ("loss.holistic".into(), text(l.holistic)),
            ("loss.cs_reduction".into(), text(l.cs_reduction)),
            ("classifier.beta".into(), text(c.beta)),
            ("classifier.normalize_output".into(), text(c.normalize_output)),
            ("classifier.beta_in_training".into(), text(c.beta_in_training)),
            ("sweep.axis".into(), text(self.sweep_axis)),
            ("sweep.values".into(), kv::join_list(&self.sweep_values)),
        ]);
        let p = &self.paths;
        for (k, v) in [
            ("paths.train", &p.train),
            ("paths.val", &p.val),
            ("paths.test", &p.test),
            ("paths.eval", &p.eval),
            ("paths.head", &p.head),
            ("paths.out", &p.out),
        ] {
            if let Some(v) = v {
                out.push((k.into(), v.display().to_string()));
            }
        }
        out
    }

    /// The resolved config as a loadable file.
    pub fn to_text(&self) -> String {
        kv::render(self.entries().iter().map(|(k, v)| (k.as_str(), v.clone())))
    }
}

fn train_entries(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("lr", text(t.lr)),
        ("momentum", text(t.momentum)),
        ("weight_decay", text(t.weight_decay)),
        ("epochs", text(t.epochs)),
        ("anchor_batch", text(t.anchor_batch)),
        ("cs_batch", text(t.cs_batch)),
        ("batch", text(t.erm_batch)),
        ("eval_every", text(t.eval_every)),
        ("ema_gamma", text(t.ema_gamma)),
    ]
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "lr" => t.lr = value(key, v)?,
        "momentum" => t.momentum = value(key, v)?,
        "weight_decay" => t.weight_decay = value(key, v)?,
        "epochs" => t.epochs = value(key, v)?,
        "anchor_batch" => t.anchor_batch = value(key, v)?,
        "cs_batch" => t.cs_batch = value(key, v)?,
        "batch" => t.erm_batch = value(key, v)?,
        "eval_every" => t.eval_every = value(key, v)?,
        "ema_gamma" => t.ema_gamma = value(key, v)?,
        _ => return Err(Error::config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// `(key, value)` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Splits `--key value` / `--key=value` pairs. `--config` is returned
/// separately.
pub fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Overrides)> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let flag = a
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("expected a --key flag, got {a:?}")))?;
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if k == "config" {
            config = Some(PathBuf::from(v));
        } else {
            pairs.push((k, v));
        }
    }
    Ok((config, pairs))
}
