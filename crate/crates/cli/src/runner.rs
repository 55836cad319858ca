//! Mode dispatch and result files.

use std::fs;
use std::path::Path;

use log::info;

use fire_core::batchfire::{fmt_real, initial_params, train_fire_batchwise, train_sgd_baseline, TrainConfig};
use fire_core::fedsim::{comm_cost_report, comm_log_csv, FedSim};
use fire_core::fisher::empirical_fim;
use fire_core::model::{accuracy, loss, Fragment, ModelSpec, Provenance};
use fire_core::numkernel::Rng;
use fire_core::shiftlab::{
    diagnostics, diagnostics_csv, expansion_slope, induce_shift, kl_bound_suite, marginal_suite, theory_csv, Family,
    Role,
};
use fire_core::synth::{radial_blobs, two_moons, BlobParams, MoonParams};

use crate::config::{DatasetSpec, ExperimentConfig, Mode};
use crate::data::{load_csv_pair, read_raw_csv, split_csv};
use crate::error::{CliError, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Step sizes of the cubic-remainder check in `expansion.csv`.
const EXPANSION_DELTAS: [f64; 5] = [1e-3, 2e-3, 3e-3, 5e-3, 1e-2];

/// Training pool, validation set and class count.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<(Fragment, Fragment, usize)> {
    let seed = cfg.seed;
    let (train, val, classes) = match &cfg.dataset {
        DatasetSpec::SyntheticBlobs { train, val_n } => {
            let tr = radial_blobs(train, &mut Rng::substream(seed, "train", 0));
            let va = radial_blobs(&BlobParams { n: *val_n, ..train.clone() }, &mut Rng::substream(seed, "val", 0));
            (
                Fragment::new("train", tr, Provenance::Batch(0))?,
                Fragment::new("val", va, Provenance::Validation)?,
                train.classes,
            )
        }
        DatasetSpec::TwoMoons { train, val_n } => {
            let tr = two_moons(train, &mut Rng::substream(seed, "train", 0));
            let va = two_moons(&MoonParams { n: *val_n, ..train.clone() }, &mut Rng::substream(seed, "val", 0));
            (Fragment::new("train", tr, Provenance::Batch(0))?, Fragment::new("val", va, Provenance::Validation)?, 2)
        }
        DatasetSpec::Csv { path, val_path: Some(vp), label_column, .. } => load_csv_pair(path, vp, label_column)?,
        DatasetSpec::Csv { path, val_path: None, label_column, val_fraction } => {
            let table = read_raw_csv(path, label_column)?;
            let n = table.features.len();
            let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
            let mut idx: Vec<usize> = (0..n).collect();
            Rng::substream(seed, "split", 0).shuffle(&mut idx);
            split_csv(&table, &idx[..n_val])?
        }
    };
    match &cfg.shift {
        None => Ok((train, val, classes)),
        Some(shift) => {
            let tr = induce_shift(&train, shift, Role::Train, &mut Rng::substream(seed, "shift", 0))?;
            let va = induce_shift(&val, shift, Role::Test, &mut Rng::substream(seed, "shift", 1))?;
            Ok((tr, va, classes))
        }
    }
}

/// Cuts the pool, in order, into `count` contiguous pieces whose sizes differ by at most one.
pub fn split_fragments(pool: &Fragment, count: usize, folds: bool) -> Result<Vec<Fragment>> {
    let n = pool.n();
    if count > n {
        return Err(CliError::Data(format!("cannot cut {n} examples into {count} fragments")));
    }
    let (base, extra) = (n / count, n % count);
    let mut start = 0;
    (0..count)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let ex = pool.examples[start..start + len].to_vec();
            start += len;
            let (id, prov) = if folds { (format!("fold{i}"), Provenance::Fold(i)) } else { (format!("batch{i}"), Provenance::Batch(i)) };
            Ok(Fragment::new(id, ex, prov)?)
        })
        .collect()
}

fn model_spec(cfg: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<ModelSpec> {
    Ok(ModelSpec::new(input_dim, cfg.hidden_sizes.clone(), classes)?)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_manifest(cfg: &ExperimentConfig, dir: &Path, derived: &[(&str, String)]) -> Result<()> {
    let mut lines = cfg.manifest_lines();
    lines.push(format!("artifact_version = {ARTIFACT_VERSION}"));
    lines.extend(derived.iter().map(|(k, v)| format!("derived.{k} = {v}")));
    lines.sort();
    let mut s = lines.join("\n");
    s.push('\n');
    write(dir, "manifest.txt", &s)
}

fn eval_row(name: &str, spec: &ModelSpec, theta: &fire_core::numkernel::ParamVec, val: &Fragment) -> Result<String> {
    Ok(format!("{name},{},{}\n", fmt_real(accuracy(spec, theta, val)?), fmt_real(loss(spec, theta, val)?)))
}

fn run_batch(cfg: &ExperimentConfig, dir: &Path, folds: bool) -> Result<Vec<(&'static str, String)>> {
    let (pool, val, classes) = build_dataset(cfg)?;
    let spec = model_spec(cfg, pool.feature_dim(), classes)?;
    let frags = split_fragments(&pool, cfg.fragments, folds)?;
    let (theta, trace) = train_fire_batchwise(&spec, &frags, &val, &cfg.train)?;
    write(dir, "trace.csv", &trace.to_csv())?;
    let mut summary = String::from("method,val_accuracy,val_loss\n");
    summary.push_str(&eval_row("fire", &spec, &theta, &val)?);
    if cfg.baseline {
        let base_cfg = TrainConfig { lambda: 0.0, ..cfg.train.clone() };
        let (tb, tr) = train_sgd_baseline(&spec, &frags, &val, &base_cfg)?;
        write(dir, "trace_baseline.csv", &tr.to_csv())?;
        summary.push_str(&eval_row("baseline", &spec, &tb, &val)?);
    }
    write(dir, "summary.csv", &summary)?;
    Ok(vec![("input_dim", spec.input_dim.to_string()), ("num_classes", classes.to_string()), ("param_count", spec.param_count().to_string())])
}

fn run_federated(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<(&'static str, String)>> {
    let fed = cfg.fed.clone().ok_or_else(|| CliError::Config("federated mode without fed settings".into()))?;
    let (pool, val, classes) = build_dataset(cfg)?;
    let spec = model_spec(cfg, pool.feature_dim(), classes)?;
    let mut sim = FedSim::from_pool(&spec, &pool, &val, fed.clone())?;
    sim.run()?;
    write(dir, "rounds.csv", &sim.rounds_csv())?;
    write(dir, "comm.csv", &comm_log_csv(&sim.server.comm_log))?;
    let d = spec.param_count();
    let rep = comm_cost_report(&sim.server, d, &fed)?;
    let theta = &sim.server.theta_global;
    let summary = format!(
        "val_accuracy,val_loss,params_bytes,fim_payload_bytes_measured,fim_payload_bytes_analytic,bytes_per_client_round,relative_to_fedavg,relative_to_fedavg_analytic\n{},{},{},{},{},{},{},{}\n",
        fmt_real(accuracy(&spec, theta, &val)?),
        fmt_real(loss(&spec, theta, &val)?),
        rep.params_bytes,
        fmt_real(rep.fim_payload_bytes_measured),
        rep.fim_payload_bytes_analytic,
        fmt_real(rep.bytes_per_client_round),
        fmt_real(rep.relative_to_fedavg),
        fmt_real(rep.relative_to_fedavg_analytic),
    );
    write(dir, "summary.csv", &summary)?;
    let sizes: Vec<String> = sim.clients.iter().map(|c| c.n_k.to_string()).collect();
    Ok(vec![
        ("input_dim", spec.input_dim.to_string()),
        ("num_classes", classes.to_string()),
        ("param_count", d.to_string()),
        ("client_sizes", sizes.join(";")),
    ])
}

fn run_diagnostics(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<(&'static str, String)>> {
    let (pool, val, classes) = build_dataset(cfg)?;
    let spec = model_spec(cfg, pool.feature_dim(), classes)?;
    let frags = split_fragments(&pool, cfg.fragments, false)?;
    let fit_cfg = TrainConfig { lambda: 0.0, epochs: cfg.diagnostics_epochs, ..cfg.train.clone() };
    let fit = |f: &Fragment| -> Result<_> { Ok(train_sgd_baseline(&spec, std::slice::from_ref(f), &val, &fit_cfg)?.0) };
    let theta_val = if cfg.diagnostics_epochs == 0 { initial_params(&spec, cfg.seed) } else { fit(&val)? };
    let i_val = empirical_fim(&spec, &theta_val, &val, &cfg.train.fisher)?;
    let mut reports = Vec::with_capacity(frags.len());
    for (i, f) in frags.iter().enumerate() {
        let theta_i = if cfg.diagnostics_epochs == 0 { theta_val.clone() } else { fit(f)? };
        let mut rng = Rng::substream(cfg.seed, "diagnostics", i as u64);
        reports.push(diagnostics(f, &val, &theta_i, &theta_val, &i_val, &mut rng)?);
    }
    write(dir, "diagnostics.csv", &diagnostics_csv(&reports))?;
    Ok(vec![("input_dim", spec.input_dim.to_string()), ("num_classes", classes.to_string()), ("param_count", spec.param_count().to_string())])
}

fn run_theory(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<(&'static str, String)>> {
    let trials = kl_bound_suite(cfg.theory_trials, cfg.seed)?;
    write(dir, "theory.csv", &theory_csv(&trials))?;
    let marg = marginal_suite(cfg.theory_trials, cfg.seed)?;
    let mut s = String::from("trial,gamma,kl,bound,holds\n");
    for (i, m) in marg.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{},{}\n", fmt_real(m.gamma), fmt_real(m.kl), fmt_real(m.bound), m.holds));
    }
    write(dir, "marginal.csv", &s)?;
    let (slope, recs) = expansion_slope(Family::Bernoulli, &[0.3], &[1.0], &EXPANSION_DELTAS)?;
    let mut s = String::from("family,delta,remainder,cubic_bound,holds\n");
    for r in &recs {
        s.push_str(&format!("bernoulli,{},{},{},{}\n", fmt_real(r.delta), fmt_real(r.remainder), fmt_real(r.cubic_bound), r.holds));
    }
    write(dir, "expansion.csv", &s)?;
    let bound_violations = trials.iter().filter(|t| !t.record.holds).count();
    let marginal_violations = marg.iter().filter(|m| !m.holds).count();
    write(
        dir,
        "summary.csv",
        &format!(
            "bound_trials,bound_violations,marginal_trials,marginal_violations,expansion_slope\n{},{bound_violations},{},{marginal_violations},{}\n",
            trials.len(),
            marg.len(),
            fmt_real(slope)
        ),
    )?;
    Ok(Vec::new())
}

/// Runs the configured mode and writes every result file plus `manifest.txt`.
pub fn execute(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    info!("mode {:?}, writing to {}", cfg.mode, dir.display());
    let derived = match cfg.mode {
        Mode::Batch => run_batch(cfg, dir, false)?,
        Mode::Folds => run_batch(cfg, dir, true)?,
        Mode::Federated => run_federated(cfg, dir)?,
        Mode::Diagnostics => run_diagnostics(cfg, dir)?,
        Mode::VerifyTheory => run_theory(cfg, dir)?,
    };
    write_manifest(cfg, dir, &derived)
}

/// Process exit code for a run: 0 on success, otherwise the error category.
pub fn run(cfg: &ExperimentConfig) -> i32 {
    match execute(cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
