//! Batchwise Fisher accumulation trainer and its plain-SGD baseline.
//!
//! Per optimizer step on batch `B_i`:
//!
//! ```text
//! I_B  = empirical_fim(B_i, theta)
//! I_i  = mu * I_B + (1 - mu) * I_V
//! I_G  = alpha * I_G + (1 - alpha) * I_i
//! theta -= eta * (I + lambda * I_G) grad L(B_i)
//! ```
//!
//! `I_V` is computed once at the initial parameters (optionally refreshed
//! every `refresh_every_batches` steps). Epochs repeat the pass over the
//! fragments in index order and `I_G` keeps accumulating across epochs.

use std::fmt::Write as _;

use crate::error::{FireError, Result};
use crate::fisher::{apply_preconditioner, ema_update, empirical_fim, mix_fim, trace_penalty, FisherConfig, FisherEstimate};
use crate::model::{accuracy, init_params, loss_and_grad, Fragment, ModelSpec};
use crate::numkernel::{axpy, ParamVec, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub fisher: FisherConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { eta: 0.001, lambda: 0.1, epochs: 100, fisher: FisherConfig::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(FireError::invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FireError::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(FireError::invalid("epochs must be >= 1"));
        }
        self.fisher.validate()
    }
}

/// Initial parameters for a run with `seed`; shared by every trainer so runs are comparable.
pub fn initial_params(spec: &ModelSpec, seed: u64) -> ParamVec {
    init_params(spec, &mut Rng::substream(seed, "init", 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub precond_grad_norm_sq: f64,
    pub penalized_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
}

pub const TRACE_HEADER: &str = "step,epoch,batch,loss,grad_norm_sq,precond_grad_norm_sq,penalized_loss,val_acc";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.batch,
                fmt_real(r.loss),
                fmt_real(r.grad_norm_sq),
                fmt_real(r.precond_grad_norm_sq),
                fmt_real(r.penalized_loss),
                fmt_real(r.val_acc)
            );
        }
        out
    }
}

/// Stateful form of the batchwise trainer: one call to [`FireTrainer::step`] per batch.
#[derive(Debug, Clone)]
pub struct FireTrainer<'a> {
    spec: &'a ModelSpec,
    val: &'a Fragment,
    cfg: TrainConfig,
    theta: ParamVec,
    i_val: FisherEstimate,
    i_global: FisherEstimate,
    last_batch: Option<FisherEstimate>,
    last_mixed: Option<FisherEstimate>,
    steps: usize,
}

impl<'a> FireTrainer<'a> {
    pub fn new(spec: &'a ModelSpec, val: &'a Fragment, cfg: TrainConfig, theta0: ParamVec) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        crate::error::check_dim(spec.param_count(), theta0.len())?;
        val.check_against(spec)?;
        let d = theta0.len();
        let i_val = empirical_fim(spec, &theta0, val, &cfg.fisher)?;
        let i_global = FisherEstimate::zeros(cfg.fisher.variant_kind, d, cfg.fisher.effective_rank(d));
        Ok(FireTrainer {
            spec,
            val,
            cfg,
            theta: theta0,
            i_val,
            i_global,
            last_batch: None,
            last_mixed: None,
            steps: 0,
        })
    }

    pub fn theta(&self) -> &ParamVec {
        &self.theta
    }

    pub fn into_theta(self) -> ParamVec {
        self.theta
    }

    pub fn i_global(&self) -> &FisherEstimate {
        &self.i_global
    }

    pub fn i_val(&self) -> &FisherEstimate {
        &self.i_val
    }

    /// Batch estimate of the most recent step.
    pub fn last_batch_fim(&self) -> Option<&FisherEstimate> {
        self.last_batch.as_ref()
    }

    /// Mixed (batch + validation) estimate of the most recent step.
    pub fn last_mixed_fim(&self) -> Option<&FisherEstimate> {
        self.last_mixed.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, batch: &Fragment, epoch: usize, batch_index: usize) -> Result<StepRecord> {
        let fc = &self.cfg.fisher;
        let refresh = fc.refresh_every_batches;
        if refresh > 0 && self.steps > 0 && self.steps.is_multiple_of(refresh) {
            self.i_val = empirical_fim(self.spec, &self.theta, self.val, fc)?;
        }
        let i_batch = empirical_fim(self.spec, &self.theta, batch, fc)?;
        let mixed = mix_fim(&i_batch, &self.i_val, fc.mix_mu)?;
        self.i_global = ema_update(&self.i_global, &mixed, fc.momentum_alpha)?;
        self.last_batch = Some(i_batch);
        self.last_mixed = Some(mixed);

        let (loss, grad) = loss_and_grad(self.spec, &self.theta, batch)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(FireError::NonFinite { step: self.steps, what: "loss or gradient".into() });
        }
        let pg = apply_preconditioner(&self.i_global, &grad, self.cfg.lambda)?;
        let penalized_loss = loss + self.cfg.lambda * trace_penalty(&self.i_global);
        let rec = self.finish_step(loss, &grad, &pg, penalized_loss, epoch, batch_index)?;
        Ok(rec)
    }

    fn finish_step(
        &mut self,
        loss: f64,
        grad: &ParamVec,
        pg: &ParamVec,
        penalized_loss: f64,
        epoch: usize,
        batch: usize,
    ) -> Result<StepRecord> {
        let next = axpy(-self.cfg.eta, pg, &self.theta)?;
        if !next.is_finite() {
            return Err(FireError::NonFinite { step: self.steps, what: "parameters".into() });
        }
        self.theta = next;
        let rec = StepRecord {
            step: self.steps,
            epoch,
            batch,
            loss,
            grad_norm_sq: grad.norm_sq(),
            precond_grad_norm_sq: pg.norm_sq(),
            penalized_loss,
            val_acc: accuracy(self.spec, &self.theta, self.val)?,
        };
        self.steps += 1;
        Ok(rec)
    }
}

fn check_inputs(spec: &ModelSpec, fragments: &[Fragment], val: &Fragment) -> Result<()> {
    if fragments.is_empty() {
        return Err(FireError::invalid("no training fragments"));
    }
    for f in fragments {
        f.check_against(spec)?;
    }
    val.check_against(spec)
}

/// Batchwise Fisher-accumulation training over `cfg.epochs` passes of `fragments`.
pub fn train_fire_batchwise(
    spec: &ModelSpec,
    fragments: &[Fragment],
    val: &Fragment,
    cfg: &TrainConfig,
) -> Result<(ParamVec, TrainTrace)> {
    check_inputs(spec, fragments, val)?;
    let mut trainer = FireTrainer::new(spec, val, cfg.clone(), initial_params(spec, cfg.seed))?;
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        for (b, frag) in fragments.iter().enumerate() {
            trace.records.push(trainer.step(frag, epoch, b)?);
        }
    }
    Ok((trainer.into_theta(), trace))
}

/// The same loop with `lambda = 0` and no Fisher work at all.
pub fn train_sgd_baseline(
    spec: &ModelSpec,
    fragments: &[Fragment],
    val: &Fragment,
    cfg: &TrainConfig,
) -> Result<(ParamVec, TrainTrace)> {
    check_inputs(spec, fragments, val)?;
    cfg.validate()?;
    let mut theta = initial_params(spec, cfg.seed);
    let mut trace = TrainTrace::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for (b, frag) in fragments.iter().enumerate() {
            let (loss, grad) = loss_and_grad(spec, &theta, frag)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(FireError::NonFinite { step, what: "loss or gradient".into() });
            }
            theta = axpy(-cfg.eta, &grad, &theta)?;
            if !theta.is_finite() {
                return Err(FireError::NonFinite { step, what: "parameters".into() });
            }
            let g2 = grad.norm_sq();
            trace.records.push(StepRecord {
                step,
                epoch,
                batch: b,
                loss,
                grad_norm_sq: g2,
                precond_grad_norm_sq: g2,
                penalized_loss: loss,
                val_acc: accuracy(spec, &theta, val)?,
            });
            step += 1;
        }
    }
    Ok((theta, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSize {
    Ok,
    TooLarge,
}

/// Step-size condition `eta <= 1 / (L (1 + lambda G)^2)` of the preconditioned-SGD convergence bound.
pub fn check_step_size(l_smooth: f64, lambda: f64, g_bound: f64, eta: f64) -> StepSize {
    let s = 1.0 + lambda * g_bound;
    // eta * L * s^2 <= 1 avoids rounding in the reciprocal at the boundary
    if eta * l_smooth * s * s <= 1.0 {
        StepSize::Ok
    } else {
        StepSize::TooLarge
    }
}

/// Stochastic preconditioned SGD on a fixed dataset, tracking the full-data gradient.
///
/// Each step draws a mini-batch with replacement, runs one [`FireTrainer`]
/// step on it, and records `||grad L(theta_t)||^2` of the full objective at
/// the iterate *before* the step.
#[derive(Debug, Clone)]
pub struct ConvergenceProbe {
    pub spec: ModelSpec,
    pub data: Fragment,
    pub val: Fragment,
    pub batch_size: usize,
    pub lambda: f64,
    pub fisher: FisherConfig,
}

impl ConvergenceProbe {
    pub fn run(&self, steps: usize, eta: f64, seed: u64) -> Result<Vec<f64>> {
        let cfg = TrainConfig { eta, lambda: self.lambda, epochs: 1, fisher: self.fisher.clone(), seed };
        let mut trainer = FireTrainer::new(&self.spec, &self.val, cfg, initial_params(&self.spec, seed))?;
        let mut rng = Rng::substream(seed, "minibatch", 0);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let (_, full) = loss_and_grad(&self.spec, trainer.theta(), &self.data)?;
            out.push(full.norm_sq());
            let picks = (0..self.batch_size)
                .map(|_| self.data.examples[rng.below(self.data.n())].clone())
                .collect();
            let batch = Fragment::new(format!("mb{t}"), picks, crate::model::Provenance::Batch(t))?;
            trainer.step(&batch, 0, t)?;
        }
        Ok(out)
    }

    /// `min_t ||grad L||^2` for each horizon `T`, using `eta = c / sqrt(T)`.
    pub fn min_grad_sq_by_horizon(&self, horizons: &[usize], c: f64, seed: u64) -> Result<Vec<f64>> {
        horizons
            .iter()
            .map(|&t| {
                let g = self.run(t, c / (t as f64).sqrt(), seed)?;
                Ok(g.into_iter().fold(f64::INFINITY, f64::min))
            })
            .collect()
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_size_boundaries() {
        assert_eq!(check_step_size(1.0, 0.0, 5.0, 1.0), StepSize::Ok);
        assert_eq!(check_step_size(1.0, 1.0, 1.0, 0.25), StepSize::Ok);
        assert_eq!(check_step_size(1.0, 1.0, 1.0, 0.26), StepSize::TooLarge);
        assert_eq!(check_step_size(2.0, 3.0, 0.0, 0.5), StepSize::Ok);
        assert_eq!(check_step_size(2.0, 3.0, 0.0, 0.5000001), StepSize::TooLarge);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [10.0, 100.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((loglog_slope(&xs, &ys) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_header_and_precision() {
        let t = TrainTrace {
            records: vec![StepRecord {
                step: 0,
                epoch: 0,
                batch: 1,
                loss: 0.1,
                grad_norm_sq: 1.0 / 3.0,
                precond_grad_norm_sq: 2.0,
                penalized_loss: 0.1,
                val_acc: 0.5,
            }],
        };
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[4].parse::<f64>().unwrap(), 1.0 / 3.0);
    }
}
