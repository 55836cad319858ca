//! `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, dotted keys group related
//! settings (`train.lambda = 0.1`). Every key has a documented default
//! except `mode`; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fire_core::batchfire::TrainConfig;
use fire_core::fedsim::{FedConfig, Partition};
use fire_core::fisher::{FisherConfig, FisherKind};
use fire_core::shiftlab::{ShiftKind, ShiftSpec};
use fire_core::synth::{BlobParams, MoonParams};

use crate::error::{CliError, Result};

/// Every accepted key with its default; `None` means the key is mandatory.
const KEYS: &[(&str, Option<&str>)] = &[
    ("mode", None),
    ("seed", Some("0")),
    ("output_dir", Some("out")),
    ("dataset.kind", Some("blobs")),
    ("dataset.n", Some("600")),
    ("dataset.val_n", Some("300")),
    ("dataset.classes", Some("3")),
    ("dataset.std", Some("0.35")),
    ("dataset.radius0", Some("1.0")),
    ("dataset.spacing", Some("1.25")),
    ("dataset.noise", Some("0.15")),
    ("dataset.path", Some("")),
    ("dataset.val_path", Some("")),
    ("dataset.label_column", Some("label")),
    ("dataset.val_fraction", Some("0.3")),
    ("dataset.fragments", Some("10")),
    ("shift.kind", Some("none")),
    ("shift.a", Some("2")),
    ("shift.b", Some("4")),
    ("shift.strength", Some("1.0")),
    ("shift.delta", Some("")),
    ("shift.swap_for_test", Some("true")),
    ("model.hidden", Some("8")),
    ("train.eta", Some("0.001")),
    ("train.lambda", Some("0.1")),
    ("train.epochs", Some("100")),
    ("train.baseline", Some("true")),
    ("fisher.variant", Some("lowrank")),
    ("fisher.rank_k", Some("50")),
    ("fisher.alpha", Some("0.9")),
    ("fisher.mu", Some("0.5")),
    ("fisher.refresh_every", Some("0")),
    ("fed.num_clients", Some("5")),
    ("fed.rounds", Some("50")),
    ("fed.local_epochs", Some("1")),
    ("fed.fim_exchange_period", Some("5")),
    ("fed.exchange_fim", Some("true")),
    ("fed.partition", Some("iid")),
    ("fed.dirichlet_beta", Some("0.5")),
    ("fed.shards_per_client", Some("2")),
    ("fed.server_side_val_fim", Some("false")),
    ("diagnostics.epochs", Some("50")),
    ("theory.trials", Some("10000")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Batch,
    Folds,
    Federated,
    Diagnostics,
    VerifyTheory,
}

impl Mode {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "batch" => Mode::Batch,
            "folds" => Mode::Folds,
            "federated" => Mode::Federated,
            "diagnostics" => Mode::Diagnostics,
            "verify_theory" => Mode::VerifyTheory,
            other => return Err(CliError::Config(format!("unknown mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    SyntheticBlobs { train: BlobParams, val_n: usize },
    TwoMoons { train: MoonParams, val_n: usize },
    Csv { path: PathBuf, val_path: Option<PathBuf>, label_column: String, val_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetSpec,
    /// Number of batches (or folds) the training pool is cut into.
    pub fragments: usize,
    pub shift: Option<ShiftSpec>,
    pub hidden_sizes: Vec<usize>,
    pub train: TrainConfig,
    /// Also run the plain-SGD baseline in batch/folds mode.
    pub baseline: bool,
    pub fed: Option<FedConfig>,
    pub diagnostics_epochs: usize,
    pub theory_trials: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    resolved: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// Every key that influenced the run with its final value, one `key = value` per line.
    pub fn manifest_lines(&self) -> Vec<String> {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}")).collect()
    }
}

fn value<'a>(map: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    map.get(key).map(String::as_str).unwrap_or("")
}

fn parse_num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = value(map, key);
    raw.parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{raw}`")))
}

fn parse_bool(map: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match value(map, key) {
        "true" => Ok(true),
        "false" => Ok(false),
        raw => Err(CliError::Config(format!("`{key}`: expected true or false, got `{raw}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>> {
    let raw = value(map, key).trim();
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{p}`"))))
        .collect()
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut given: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(CliError::Config(format!("line {}: unknown key `{k}`", lineno + 1)));
        }
        if given.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
    }
    let mode = Mode::parse(
        given.get("mode").ok_or_else(|| CliError::Config("`mode` is mandatory".into()))?,
    )?;
    if mode != Mode::Federated {
        if let Some(k) = given.keys().find(|k| k.starts_with("fed.")) {
            return Err(CliError::Config(format!("`{k}` is only valid with mode = federated")));
        }
    }
    let mut map = given.clone();
    for (k, default) in KEYS {
        if let Some(d) = default {
            map.entry(k.to_string()).or_insert_with(|| d.to_string());
        }
    }
    if mode != Mode::Federated {
        map.retain(|k, _| !k.starts_with("fed."));
    }

    let seed: u64 = parse_num(&map, "seed")?;
    let dataset = match value(&map, "dataset.kind") {
        "blobs" => DatasetSpec::SyntheticBlobs {
            train: BlobParams {
                n: parse_num(&map, "dataset.n")?,
                classes: parse_num(&map, "dataset.classes")?,
                std: parse_num(&map, "dataset.std")?,
                radius0: parse_num(&map, "dataset.radius0")?,
                spacing: parse_num(&map, "dataset.spacing")?,
            },
            val_n: parse_num(&map, "dataset.val_n")?,
        },
        "two_moons" => DatasetSpec::TwoMoons {
            train: MoonParams { n: parse_num(&map, "dataset.n")?, noise: parse_num(&map, "dataset.noise")? },
            val_n: parse_num(&map, "dataset.val_n")?,
        },
        "csv" => {
            let path = value(&map, "dataset.path");
            if path.is_empty() {
                return Err(CliError::Config("dataset.kind = csv needs dataset.path".into()));
            }
            let val_path = value(&map, "dataset.val_path");
            let val_fraction: f64 = parse_num(&map, "dataset.val_fraction")?;
            if !(val_fraction > 0.0 && val_fraction < 1.0) {
                return Err(CliError::Config("dataset.val_fraction must lie in (0, 1)".into()));
            }
            DatasetSpec::Csv {
                path: PathBuf::from(path),
                val_path: (!val_path.is_empty()).then(|| PathBuf::from(val_path)),
                label_column: value(&map, "dataset.label_column").to_string(),
                val_fraction,
            }
        }
        other => return Err(CliError::Config(format!("unknown dataset.kind `{other}`"))),
    };
    match &dataset {
        DatasetSpec::SyntheticBlobs { train, val_n } => {
            if train.n == 0 || *val_n == 0 || train.classes < 2 || !(train.std > 0.0) {
                return Err(CliError::Config("blob dataset needs n, val_n >= 1, classes >= 2, std > 0".into()));
            }
        }
        DatasetSpec::TwoMoons { train, val_n } => {
            if train.n == 0 || *val_n == 0 || train.noise < 0.0 {
                return Err(CliError::Config("two_moons dataset needs n, val_n >= 1 and noise >= 0".into()));
            }
        }
        DatasetSpec::Csv { .. } => {}
    }

    let swap = parse_bool(&map, "shift.swap_for_test")?;
    let shift = match value(&map, "shift.kind") {
        "none" => None,
        "rotation" => Some(ShiftSpec {
            kind: ShiftKind::RotationBeta { a: parse_num(&map, "shift.a")?, b: parse_num(&map, "shift.b")? },
            swap_for_test: swap,
        }),
        "tabular_bias" => Some(ShiftSpec {
            kind: ShiftKind::TabularBias { strength: parse_num(&map, "shift.strength")? },
            swap_for_test: swap,
        }),
        "gaussian_mean" => Some(ShiftSpec {
            kind: ShiftKind::GaussianMean { delta: parse_list(&map, "shift.delta")? },
            swap_for_test: swap,
        }),
        other => return Err(CliError::Config(format!("unknown shift.kind `{other}`"))),
    };
    if let Some(s) = &shift {
        s.validate()?;
    }

    let variant = value(&map, "fisher.variant");
    let fisher = FisherConfig {
        variant_kind: FisherKind::parse(variant)
            .ok_or_else(|| CliError::Config(format!("unknown fisher.variant `{variant}`")))?,
        rank_k: parse_num(&map, "fisher.rank_k")?,
        momentum_alpha: parse_num(&map, "fisher.alpha")?,
        mix_mu: parse_num(&map, "fisher.mu")?,
        refresh_every_batches: parse_num(&map, "fisher.refresh_every")?,
    };
    let train = TrainConfig {
        eta: parse_num(&map, "train.eta")?,
        lambda: parse_num(&map, "train.lambda")?,
        epochs: parse_num(&map, "train.epochs")?,
        fisher: fisher.clone(),
        seed,
    };
    train.validate()?;

    let fed = if mode == Mode::Federated {
        let partition = match value(&map, "fed.partition") {
            "iid" => Partition::Iid,
            "dirichlet" => Partition::Dirichlet(parse_num(&map, "fed.dirichlet_beta")?),
            "shard" => Partition::Shard(parse_num(&map, "fed.shards_per_client")?),
            other => return Err(CliError::Config(format!("unknown fed.partition `{other}`"))),
        };
        let fc = FedConfig {
            num_clients: parse_num(&map, "fed.num_clients")?,
            rounds: parse_num(&map, "fed.rounds")?,
            local_epochs: parse_num(&map, "fed.local_epochs")?,
            eta: train.eta,
            lambda: train.lambda,
            fim_exchange_period: parse_num(&map, "fed.fim_exchange_period")?,
            exchange_fim: parse_bool(&map, "fed.exchange_fim")?,
            fisher,
            partition,
            server_side_val_fim: parse_bool(&map, "fed.server_side_val_fim")?,
            seed,
        };
        fc.validate()?;
        Some(fc)
    } else {
        None
    };

    let hidden_sizes: Vec<usize> = parse_list(&map, "model.hidden")?;
    if hidden_sizes.contains(&0) {
        return Err(CliError::Config("model.hidden sizes must be >= 1".into()));
    }
    let fragments: usize = parse_num(&map, "dataset.fragments")?;
    if fragments == 0 {
        return Err(CliError::Config("dataset.fragments must be >= 1".into()));
    }
    let theory_trials: usize = parse_num(&map, "theory.trials")?;
    if theory_trials == 0 {
        return Err(CliError::Config("theory.trials must be >= 1".into()));
    }
    Ok(ExperimentConfig {
        mode,
        dataset,
        fragments,
        shift,
        hidden_sizes,
        train,
        baseline: parse_bool(&map, "train.baseline")?,
        fed,
        diagnostics_epochs: parse_num(&map, "diagnostics.epochs")?,
        theory_trials,
        output_dir: PathBuf::from(value(&map, "output_dir")),
        seed,
        resolved: map,
    })
}
