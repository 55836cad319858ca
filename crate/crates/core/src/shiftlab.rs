//! Covariate-shift induction, shift diagnostics and analytic checks of the
//! Fisher-quadratic KL bound.

use std::fmt::Write as _;

use rand_distr::{Beta, Distribution};
use rayon::prelude::*;

use crate::batchfire::fmt_real;
use crate::error::{check_dim, FireError, Result};
use crate::fisher::FisherEstimate;
use crate::model::{loss_and_grad, predict_proba, Example, Fragment, ModelSpec};
use crate::numkernel::{axpy, quad_form, ParamVec, Rng};

#[derive(Debug, Clone, PartialEq)]
pub enum ShiftKind {
    RotationBeta { a: f64, b: f64 },
    TabularBias { strength: f64 },
    GaussianMean { delta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// Test role uses the mirrored shift (Beta(b,a), negated strength).
    pub swap_for_test: bool,
}

impl ShiftSpec {
    pub fn rotation(a: f64, b: f64) -> Self {
        ShiftSpec { kind: ShiftKind::RotationBeta { a, b }, swap_for_test: true }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ShiftKind::RotationBeta { a, b } if !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite()) => {
                Err(FireError::invalid(format!("rotation Beta parameters must be > 0, got ({a}, {b})")))
            }
            ShiftKind::TabularBias { strength } if !strength.is_finite() => {
                Err(FireError::invalid("tabular bias strength must be finite"))
            }
            ShiftKind::GaussianMean { delta } if delta.iter().any(|v| !v.is_finite()) => {
                Err(FireError::invalid("gaussian mean shift must be finite"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

/// Rotation angles in degrees, `180 * Beta(a, b)` (or `Beta(b, a)` for the test role).
pub fn sample_rotation_degrees(a: f64, b: f64, swap: bool, role: Role, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let (a, b) = if swap && role == Role::Test { (b, a) } else { (a, b) };
    let beta = Beta::new(a, b).map_err(|e| FireError::invalid(format!("Beta({a}, {b}): {e}")))?;
    Ok((0..n).map(|_| 180.0 * beta.sample(rng)).collect())
}

fn rotate_point(x: &[f64], deg: f64) -> Vec<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    vec![c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

/// Nearest-neighbour rotation of a square image about its centre; pixels
/// that map outside the frame become 0.
fn rotate_image(x: &[f64], side: usize, deg: f64) -> Vec<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    let mid = (side as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; x.len()];
    for r in 0..side {
        for col in 0..side {
            let (dx, dy) = (col as f64 - mid, r as f64 - mid);
            // inverse map: source = R(-deg) * dest
            let sx = (c * dx + s * dy + mid).round();
            let sy = (-s * dx + c * dy + mid).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < side && (sy as usize) < side {
                out[r * side + col] = x[sy as usize * side + sx as usize];
            }
        }
    }
    out
}

fn image_side(dim: usize) -> Option<usize> {
    let s = (dim as f64).sqrt().round() as usize;
    (s >= 3 && s * s == dim).then_some(s)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn column_stats(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// First principal direction of the centred rows by power iteration.
fn principal_direction(centred: &[Vec<f64>]) -> Vec<f64> {
    let d = centred[0].len();
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.1 * j as f64).collect();
    for _ in 0..200 {
        let mut w = vec![0.0; d];
        for row in centred {
            let p: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wi, ri) in w.iter_mut().zip(row) {
                *wi += p * ri;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let change: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        if change < 1e-13 {
            break;
        }
    }
    v
}

/// Per-example keep probabilities for the tabular bias, mean kept fraction >= 0.3.
pub fn tabular_keep_probabilities(frag: &Fragment, strength: f64) -> Vec<f64> {
    let rows: Vec<&[f64]> = frag.examples.iter().map(|e| e.x.as_slice()).collect();
    let (mean, _) = column_stats(&rows);
    let centred: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let dir = principal_direction(&centred);
    let proj: Vec<f64> = centred.iter().map(|r| r.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect();
    let n = proj.len() as f64;
    let pm = proj.iter().sum::<f64>() / n;
    let ps = (proj.iter().map(|p| (p - pm) * (p - pm)).sum::<f64>() / n).sqrt();
    let z: Vec<f64> = proj.iter().map(|p| if ps > 0.0 { (p - pm) / ps } else { 0.0 }).collect();
    let mut keep: Vec<f64> = z.iter().map(|z| sigmoid(strength * z)).collect();
    for _ in 0..100 {
        let m = keep.iter().sum::<f64>() / n;
        if m >= 0.3 {
            break;
        }
        let scale = 0.3 / m * (1.0 + 1e-9);
        keep.iter_mut().for_each(|p| *p = (*p * scale).min(1.0));
    }
    keep
}

/// Applies the shift to `frag` for the given role.
pub fn induce_shift(frag: &Fragment, spec: &ShiftSpec, role: Role, rng: &mut Rng) -> Result<Fragment> {
    spec.validate()?;
    let dim = frag.feature_dim();
    let examples: Vec<Example> = match &spec.kind {
        ShiftKind::RotationBeta { a, b } => {
            let side = if dim == 2 {
                None
            } else {
                Some(image_side(dim).ok_or_else(|| {
                    FireError::invalid(format!("rotation needs 2-D points or square images, got {dim} features"))
                })?)
            };
            let angles = sample_rotation_degrees(*a, *b, spec.swap_for_test, role, frag.n(), rng)?;
            frag.examples
                .iter()
                .zip(angles)
                .map(|(e, deg)| {
                    let x = match side {
                        None => rotate_point(&e.x, deg),
                        Some(s) => rotate_image(&e.x, s, deg),
                    };
                    Example::new(x, e.y)
                })
                .collect()
        }
        ShiftKind::TabularBias { strength } => {
            let s = if spec.swap_for_test && role == Role::Test { -strength } else { *strength };
            let keep = tabular_keep_probabilities(frag, s);
            frag.examples.iter().zip(keep).filter(|(_, p)| rng.uniform() < *p).map(|(e, _)| e.clone()).collect()
        }
        ShiftKind::GaussianMean { delta } => {
            check_dim(dim, delta.len())?;
            match role {
                Role::Train => frag
                    .examples
                    .iter()
                    .map(|e| Example::new(e.x.iter().zip(delta).map(|(x, d)| x + d).collect(), e.y))
                    .collect(),
                Role::Test => frag.examples.clone(),
            }
        }
    };
    let role_tag = match role {
        Role::Train => "train",
        Role::Test => "test",
    };
    Fragment::new(format!("{}-{role_tag}", frag.id), examples, frag.provenance)
}

// ---------------------------------------------------------------------------
// density ratio and diagnostics

const S_CLAMP: f64 = 1e-6;
const DOMAIN_EPOCHS: usize = 500;
const DOMAIN_LR: f64 = 0.5;
const HOLDOUT: f64 = 0.3;

/// Rank-based AUC (Mann-Whitney), ties count one half.
pub fn auc(scores_pos: &[f64], scores_neg: &[f64]) -> f64 {
    if scores_pos.is_empty() || scores_neg.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> =
        scores_pos.iter().map(|&s| (s, true)).chain(scores_neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|t| t.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (scores_pos.len() as f64, scores_neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Linear-interpolation quantile of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRatio {
    /// One value per example of the training fragment, in order.
    pub r_hat: Vec<f64>,
    pub auc: f64,
}

/// Domain-classifier estimate of `dP_train / dP_val` on `train_frag`.
///
/// A linear two-class softmax model is fit by full-batch gradient descent on
/// a balanced union (the larger side is subsampled). Features are
/// standardized with the union statistics; AUC is measured on a held-out 30%.
pub fn estimate_density_ratio(train_frag: &Fragment, val_frag: &Fragment, rng: &mut Rng) -> Result<DensityRatio> {
    let dim = train_frag.feature_dim();
    check_dim(dim, val_frag.feature_dim())?;
    let m = train_frag.n().min(val_frag.n());
    let pick = |frag: &Fragment, rng: &mut Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..frag.n()).collect();
        if frag.n() > m {
            rng.shuffle(&mut idx);
            idx.truncate(m);
            idx.sort_unstable();
        }
        idx
    };
    // only the larger side consumes randomness, so swapping the roles keeps the draws
    let (tr_idx, va_idx) = if train_frag.n() >= val_frag.n() {
        let t = pick(train_frag, rng);
        (t, pick(val_frag, rng))
    } else {
        let v = pick(val_frag, rng);
        (pick(train_frag, rng), v)
    };
    let mut pairs: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut pairs);
    let n_test = ((m as f64) * HOLDOUT).round() as usize;
    let mut is_test = vec![false; m];
    for &p in &pairs[..n_test.min(m)] {
        is_test[p] = true;
    }

    let union_rows: Vec<&[f64]> = tr_idx
        .iter()
        .map(|&i| train_frag.examples[i].x.as_slice())
        .chain(va_idx.iter().map(|&i| val_frag.examples[i].x.as_slice()))
        .collect();
    let (mean, std) = column_stats(&union_rows);
    let standardize = |x: &[f64]| -> Vec<f64> {
        x.iter().zip(&mean).zip(&std).map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 }).collect()
    };
    if std.iter().all(|s| *s == 0.0) {
        return Ok(DensityRatio { r_hat: vec![1.0; train_frag.n()], auc: 0.5 });
    }

    let mut fit = Vec::new();
    let mut test_pos = Vec::new();
    let mut test_neg = Vec::new();
    for p in 0..m {
        let a = Example::new(standardize(&train_frag.examples[tr_idx[p]].x), 1);
        let b = Example::new(standardize(&val_frag.examples[va_idx[p]].x), 0);
        if is_test[p] {
            test_pos.push(a);
            test_neg.push(b);
        } else {
            fit.push(a);
            fit.push(b);
        }
    }
    let spec = ModelSpec::linear(dim, 2)?;
    let mut theta = ParamVec::zeros(spec.param_count());
    if !fit.is_empty() {
        let fit = Fragment::new("domain", fit, crate::model::Provenance::Validation)?;
        for _ in 0..DOMAIN_EPOCHS {
            let (_, g) = loss_and_grad(&spec, &theta, &fit)?;
            theta = axpy(-DOMAIN_LR, &g, &theta)?;
        }
        if !theta.is_finite() {
            return Err(FireError::Numeric("domain classifier diverged".into()));
        }
    }
    let score = |x: &[f64]| -> Result<f64> { Ok(predict_proba(&spec, &theta, x)?[1].clamp(S_CLAMP, 1.0 - S_CLAMP)) };
    let pos: Vec<f64> = test_pos.iter().map(|e| score(&e.x)).collect::<Result<_>>()?;
    let neg: Vec<f64> = test_neg.iter().map(|e| score(&e.x)).collect::<Result<_>>()?;
    let r_hat = train_frag
        .examples
        .iter()
        .map(|e| score(&standardize(&e.x)).map(|s| s / (1.0 - s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityRatio { r_hat, auc: auc(&pos, &neg) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub fragment_id: String,
    pub gamma_hat_q: f64,
    pub auc: f64,
    pub kl_hat: f64,
    pub fisher_quadratic: f64,
    pub delta_f: f64,
}

pub const DIAGNOSTICS_HEADER: &str = "fragment_id,gamma_hat_q,auc,kl_hat,fisher_quadratic,delta_f";
pub const GAMMA_QUANTILE: f64 = 0.99;

impl DiagnosticsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.fragment_id,
            fmt_real(self.gamma_hat_q),
            fmt_real(self.auc),
            fmt_real(self.kl_hat),
            fmt_real(self.fisher_quadratic),
            fmt_real(self.delta_f)
        )
    }
}

pub fn diagnostics_csv(reports: &[DiagnosticsReport]) -> String {
    let mut out = String::from(DIAGNOSTICS_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// `Q = 1/2 (theta_i - theta_val)^T I_val (theta_i - theta_val)`, never negative.
pub fn fisher_quadratic(i_val: &FisherEstimate, theta_i: &ParamVec, theta_val: &ParamVec) -> Result<f64> {
    let delta = theta_i.sub(theta_val)?;
    Ok((0.5 * quad_form(i_val, &delta)?).max(0.0))
}

pub fn diagnostics(
    train_frag: &Fragment,
    val_frag: &Fragment,
    theta_i: &ParamVec,
    theta_val: &ParamVec,
    i_val: &FisherEstimate,
    rng: &mut Rng,
) -> Result<DiagnosticsReport> {
    check_dim(theta_i.len(), theta_val.len())?;
    let dr = estimate_density_ratio(train_frag, val_frag, rng)?;
    let dev: Vec<f64> = dr.r_hat.iter().map(|r| (r - 1.0).abs()).collect();
    let kl_hat = dr.r_hat.iter().map(|r| r.ln()).sum::<f64>() / dr.r_hat.len() as f64;
    let q = fisher_quadratic(i_val, theta_i, theta_val)?;
    Ok(DiagnosticsReport {
        fragment_id: train_frag.id.clone(),
        gamma_hat_q: quantile(&dev, GAMMA_QUANTILE),
        auc: dr.auc,
        kl_hat,
        fisher_quadratic: q,
        delta_f: (2.0 * q).sqrt(),
    })
}

// ---------------------------------------------------------------------------
// analytic families

/// Families with exact KL and Fisher information.
///
/// Bernoulli and categorical use the mean parameterization: the parameter is
/// the probability vector without its last entry. The Gaussian has unit
/// covariance scaled by `sigma^2` and the mean as parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Bernoulli,
    Categorical(usize),
    GaussianFixedVar { sigma: f64 },
}

impl Family {
    pub fn name(&self) -> String {
        match self {
            Family::Bernoulli => "bernoulli".into(),
            Family::Categorical(k) => format!("categorical_{k}"),
            Family::GaussianFixedVar { .. } => "gaussian_fixed_var".into(),
        }
    }

    pub fn param_dim(&self, gaussian_dim: usize) -> usize {
        match self {
            Family::Bernoulli => 1,
            Family::Categorical(k) => k - 1,
            Family::GaussianFixedVar { .. } => gaussian_dim,
        }
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        match *self {
            Family::Bernoulli => {
                check_dim(1, theta.len())?;
                if !(theta[0] > 0.0 && theta[0] < 1.0) {
                    return Err(FireError::invalid(format!("bernoulli parameter {} outside (0,1)", theta[0])));
                }
            }
            Family::Categorical(k) => {
                if k < 2 {
                    return Err(FireError::invalid("categorical needs at least 2 outcomes"));
                }
                check_dim(k - 1, theta.len())?;
                let last = 1.0 - theta.iter().sum::<f64>();
                if theta.iter().any(|&p| !(p > 0.0)) || !(last > 0.0) {
                    return Err(FireError::invalid("categorical parameters outside the open simplex"));
                }
            }
            Family::GaussianFixedVar { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(FireError::invalid(format!("gaussian sigma must be > 0, got {sigma}")));
                }
                if theta.is_empty() || theta.iter().any(|v| !v.is_finite()) {
                    return Err(FireError::invalid("gaussian mean must be finite and non-empty"));
                }
            }
        }
        Ok(())
    }

    /// Full probability vector for the discrete families.
    fn probs(&self, theta: &[f64]) -> Vec<f64> {
        let mut p = theta.to_vec();
        p.push(1.0 - theta.iter().sum::<f64>());
        p
    }

    /// Exact `KL(p_a || p_b)`.
    pub fn kl(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        check_dim(a.len(), b.len())?;
        Ok(match *self {
            Family::GaussianFixedVar { sigma } => {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (2.0 * sigma * sigma)
            }
            _ => {
                // p ln(p/q) = -p ln(1 + (q-p)/p), accurate for q close to p
                let (pa, pb) = (self.probs(a), self.probs(b));
                // the last entry is recomputed from the differences to avoid cancellation
                let d_last = -a.iter().zip(b).map(|(x, y)| y - x).sum::<f64>();
                let n = pa.len();
                pa.iter()
                    .zip(&pb)
                    .enumerate()
                    .map(|(c, (p, q))| {
                        let diff = if c + 1 == n { d_last } else { q - p };
                        -p * (diff / p).ln_1p()
                    })
                    .sum()
            }
        })
    }

    /// Exact Fisher information at `theta`, dense row-major.
    pub fn fisher(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        let d = theta.len();
        let mut f = vec![0.0; d * d];
        match *self {
            Family::GaussianFixedVar { sigma } => {
                for i in 0..d {
                    f[i * d + i] = 1.0 / (sigma * sigma);
                }
            }
            _ => {
                let last = 1.0 - theta.iter().sum::<f64>();
                for i in 0..d {
                    for j in 0..d {
                        f[i * d + j] = 1.0 / last + if i == j { 1.0 / theta[i] } else { 0.0 };
                    }
                }
            }
        }
        Ok(f)
    }

    /// `(beta, G, M)` on the segment `[a, b]`.
    ///
    /// `beta` bounds the change rate of the log-likelihood Hessian along the
    /// segment (operator norm, max over outcomes), `G` the score norm, and `M`
    /// the Fisher operator norm via `G^2`. Discrete families are scanned at
    /// `SEGMENT_SAMPLES` points and inflated by 1%. The Gaussian has no
    /// third derivative and an unbounded score, so `beta = 0`, `G = inf` and
    /// `M = 1/sigma^2` exactly.
    pub fn segment_constants(&self, a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
        self.check(a)?;
        self.check(b)?;
        if let Family::GaussianFixedVar { sigma } = *self {
            return Ok((0.0, f64::INFINITY, 1.0 / (sigma * sigma)));
        }
        let delta: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = if dn > 0.0 { delta.iter().map(|v| v / dn).collect() } else { vec![0.0; a.len()] };
        let k1 = a.len() as f64;
        let u_sum: f64 = u.iter().sum();
        let mut beta: f64 = 0.0;
        let mut g: f64 = 0.0;
        for s in 0..=SEGMENT_SAMPLES {
            let t = s as f64 / SEGMENT_SAMPLES as f64;
            let p: Vec<f64> = a.iter().zip(&delta).map(|(x, d)| x + t * d).collect();
            let last = 1.0 - p.iter().sum::<f64>();
            for (c, &pc) in p.iter().enumerate() {
                // outcome c: log p_c with a = e_c
                beta = beta.max(2.0 * u[c].abs() / pc.powi(3));
                g = g.max(1.0 / pc);
            }
            // last outcome: a = -1, |a|^2 = K-1
            beta = beta.max(2.0 * k1 * u_sum.abs() / last.powi(3));
            g = g.max(k1.sqrt() / last);
        }
        let (beta, g) = (beta * INFLATE, g * INFLATE);
        Ok((beta, g, g * g))
    }
}

pub const SEGMENT_SAMPLES: usize = 10_000;
const INFLATE: f64 = 1.01;

/// Constant of the `gamma^2` marginal term.
pub fn c1(gamma: f64) -> f64 {
    1.0 / (2.0 * (1.0 - gamma))
}

/// Constant of the `gamma^3` marginal term.
pub fn c1_prime(gamma: f64) -> f64 {
    1.0 / (3.0 * (1.0 - gamma) * (1.0 - gamma))
}

pub const C3: f64 = 1.0 / 6.0;

fn sym_quad(f: &[f64], v: &[f64]) -> f64 {
    let d = v.len();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += v[i] * f[i * d + j] * v[j];
        }
    }
    acc
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRecord {
    pub family: String,
    pub gamma: f64,
    pub delta: f64,
    pub kl_true: f64,
    pub quad: f64,
    /// Same quadratic with the Fisher taken at `theta_val`.
    pub quad_val_anchor: f64,
    pub beta: f64,
    pub g: f64,
    pub bound_rhs: f64,
    pub holds: bool,
}

/// Two-point marginal with `r in {1-gamma, 1+gamma}` at equal validation mass.
pub fn two_point_marginal_kl(gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    0.5 * ((1.0 - gamma) * (-gamma).ln_1p() + (1.0 + gamma) * gamma.ln_1p())
}

/// Checks `KL <= Q + C1 g^2 + C1' g^3 + C2 g d^2 + C3 beta G d^3` for the
/// joint law: a covariate marginal at proximity `gamma` times the family's
/// conditional, moved from `theta_val` to `theta_i`.
///
/// Both the KL and the Fisher quadratic are expanded at `theta_i`,
/// i.e. `KL(p_theta_i || p_theta_val)` against `F(theta_i)`.
pub fn verify_kl_bound_analytic(family: Family, theta_i: &[f64], theta_val: &[f64], gamma: f64) -> Result<BoundRecord> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(FireError::invalid(format!("gamma must lie in [0,1), got {gamma}")));
    }
    let kl_cond = family.kl(theta_i, theta_val)?;
    let diff: Vec<f64> = theta_i.iter().zip(theta_val).map(|(a, b)| a - b).collect();
    let delta = norm(&diff);
    let quad = 0.5 * sym_quad(&family.fisher(theta_i)?, &diff);
    let quad_val_anchor = 0.5 * sym_quad(&family.fisher(theta_val)?, &diff);
    let (beta, g, m) = family.segment_constants(theta_i, theta_val)?;
    let cubic = if beta == 0.0 { 0.0 } else { C3 * beta * g * delta.powi(3) };
    let bound_rhs =
        quad + c1(gamma) * gamma * gamma + c1_prime(gamma) * gamma.powi(3) + 0.5 * m * gamma * delta * delta + cubic;
    let kl_true = kl_cond + two_point_marginal_kl(gamma);
    Ok(BoundRecord {
        family: family.name(),
        gamma,
        delta,
        kl_true,
        quad,
        quad_val_anchor,
        beta,
        g,
        bound_rhs,
        holds: kl_true <= bound_rhs + 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionRecord {
    pub delta: f64,
    pub remainder: f64,
    pub cubic_bound: f64,
    pub holds: bool,
}

/// `|KL - Q|` against `(beta G / 6) delta^3`.
pub fn verify_local_expansion(family: Family, theta_i: &[f64], theta_val: &[f64]) -> Result<ExpansionRecord> {
    let r = verify_kl_bound_analytic(family, theta_i, theta_val, 0.0)?;
    let remainder = (r.kl_true - r.quad).abs();
    let cubic_bound = if r.beta == 0.0 { 0.0 } else { C3 * r.beta * r.g * r.delta.powi(3) };
    Ok(ExpansionRecord { delta: r.delta, remainder, cubic_bound, holds: remainder <= cubic_bound + 1e-12 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalRecord {
    pub gamma: f64,
    pub kl: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `E_val[r log r] <= C1 g^2 + C1' g^3` for ratio samples drawn under the validation law.
pub fn verify_marginal_kl(gamma: f64, ratios: &[f64]) -> Result<MarginalRecord> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(FireError::invalid(format!("gamma must lie in [0,1), got {gamma}")));
    }
    if ratios.is_empty() {
        return Err(FireError::invalid("no ratio samples"));
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    if (mean - 1.0).abs() > 1e-9 {
        return Err(FireError::ContractViolation(format!("ratio samples have mean {mean}, expected 1")));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r >= 1.0 - gamma - 1e-15 && **r <= 1.0 + gamma + 1e-15)) {
        return Err(FireError::ContractViolation(format!("ratio {r} outside [1-{gamma}, 1+{gamma}]")));
    }
    let kl = ratios.iter().map(|&r| if r == 0.0 { 0.0 } else { r * (r - 1.0).ln_1p() }).sum::<f64>() / n;
    let bound = c1(gamma) * gamma * gamma + c1_prime(gamma) * gamma.powi(3);
    Ok(MarginalRecord { gamma, kl, bound, holds: kl <= bound + 1e-12 })
}

// ---------------------------------------------------------------------------
// randomized suites

pub const MAX_TRIAL_GAMMA: f64 = 0.5;
pub const MAX_TRIAL_DELTA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub record: BoundRecord,
}

pub const THEORY_HEADER: &str = "trial,family,gamma,delta,kl_true,quad,bound_rhs,holds";

/// Interior starting point with every probability at least `floor`.
fn random_simplex_point(k: usize, floor: f64, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.uniform().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    let free = 1.0 - floor * k as f64;
    let p: Vec<f64> = raw.iter().map(|r| floor + free * r / total).collect();
    p[..k - 1].to_vec()
}

fn random_unit(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// One randomized bound instance: family, gamma <= 0.5, delta <= 0.1.
pub fn random_bound_trial(rng: &mut Rng) -> Result<BoundRecord> {
    let family = match rng.below(5) {
        0 => Family::Bernoulli,
        1 => Family::Categorical(3),
        2 => Family::Categorical(4),
        3 => Family::Categorical(5),
        _ => Family::GaussianFixedVar { sigma: rng.uniform_range(0.5, 2.0) },
    };
    let gamma = MAX_TRIAL_GAMMA * rng.uniform();
    let delta = MAX_TRIAL_DELTA * (1.0 - rng.uniform());
    let (theta_i, dim) = match family {
        Family::Bernoulli => (random_simplex_point(2, 0.15, rng), 1),
        Family::Categorical(k) => (random_simplex_point(k, 0.15, rng), k - 1),
        Family::GaussianFixedVar { .. } => {
            let d = 1 + rng.below(3);
            ((0..d).map(|_| rng.normal()).collect(), d)
        }
    };
    // redraw the direction until the far end stays well inside the simplex
    let theta_val = loop {
        let u = random_unit(dim, rng);
        let v: Vec<f64> = theta_i.iter().zip(&u).map(|(t, u)| t + delta * u).collect();
        let inside = match family {
            Family::GaussianFixedVar { .. } => true,
            _ => v.iter().all(|&p| p >= 0.02) && 1.0 - v.iter().sum::<f64>() >= 0.02,
        };
        if inside {
            break v;
        }
    };
    verify_kl_bound_analytic(family, &theta_i, &theta_val, gamma)
}

/// `trials` independent bound checks, each on its own substream of `seed`.
pub fn kl_bound_suite(trials: usize, seed: u64) -> Result<Vec<TrialRecord>> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = Rng::substream(seed, "kl_bound_trial", t as u64);
            random_bound_trial(&mut rng).map(|record| TrialRecord { trial: t, record })
        })
        .collect()
}

pub fn theory_csv(trials: &[TrialRecord]) -> String {
    let mut out = String::from(THEORY_HEADER);
    out.push('\n');
    for t in trials {
        let r = &t.record;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t.trial,
            r.family,
            fmt_real(r.gamma),
            fmt_real(r.delta),
            fmt_real(r.kl_true),
            fmt_real(r.quad),
            fmt_real(r.bound_rhs),
            r.holds
        );
    }
    out
}

/// Two-point mixture with mean exactly representable as 1: `m1` copies of
/// `1 - a` and `m2` copies of `1 + b`, `m1 a = m2 b`, both within `gamma`.
pub fn random_two_point_ratios(rng: &mut Rng) -> (f64, Vec<f64>) {
    let gamma = MAX_TRIAL_GAMMA * (1.0 - rng.uniform());
    let m1 = 1 + rng.below(20);
    let m2 = 1 + rng.below(20);
    let mut a = gamma * (1.0 - rng.uniform());
    let mut b = a * m1 as f64 / m2 as f64;
    if b > gamma {
        let s = gamma / b;
        a *= s;
        b = gamma;
    }
    let mut r = vec![1.0 - a; m1];
    r.extend(std::iter::repeat_n(1.0 + b, m2));
    (gamma, r)
}

pub fn marginal_suite(trials: usize, seed: u64) -> Result<Vec<MarginalRecord>> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = Rng::substream(seed, "marginal_trial", t as u64);
            let (gamma, r) = random_two_point_ratios(&mut rng);
            verify_marginal_kl(gamma, &r)
        })
        .collect()
}

/// Log-log slope of the expansion remainder against delta along a fixed direction.
pub fn expansion_slope(family: Family, theta_i: &[f64], direction: &[f64], deltas: &[f64]) -> Result<(f64, Vec<ExpansionRecord>)> {
    let u_norm = norm(direction);
    if u_norm == 0.0 {
        return Err(FireError::invalid("zero direction"));
    }
    let recs = deltas
        .iter()
        .map(|&d| {
            let val: Vec<f64> = theta_i.iter().zip(direction).map(|(t, u)| t + d * u / u_norm).collect();
            verify_local_expansion(family, theta_i, &val)
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = recs.iter().map(|r| r.delta).collect();
    let ys: Vec<f64> = recs.iter().map(|r| r.remainder).collect();
    Ok((crate::batchfire::loglog_slope(&xs, &ys), recs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_spot_values() {
        let r = verify_kl_bound_analytic(Family::Bernoulli, &[0.5], &[0.6], 0.0).unwrap();
        assert!((r.kl_true - 0.020411).abs() < 1e-6, "{}", r.kl_true);
        assert!((r.quad - 0.02).abs() < 1e-12);
        assert!(r.holds);
        let e = verify_local_expansion(Family::Bernoulli, &[0.5], &[0.6]).unwrap();
        assert!((e.remainder - 0.000411).abs() < 1e-6);
        assert!(e.holds);
    }

    #[test]
    fn zero_displacement() {
        let r = verify_kl_bound_analytic(Family::Categorical(3), &[0.2, 0.3], &[0.2, 0.3], 0.0).unwrap();
        assert_eq!(r.kl_true, 0.0);
        assert_eq!(r.quad, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn marginal_two_point() {
        let r = verify_marginal_kl(0.1, &[0.9, 1.1]).unwrap();
        let hand = 0.5 * (0.9 * 0.9f64.ln() + 1.1 * 1.1f64.ln());
        assert!((r.kl - hand).abs() < 1e-15);
        assert!((r.kl - 0.0050084).abs() < 1e-7, "{}", r.kl);
        assert!((r.bound - (0.01 / 1.8 + 0.001 / (3.0 * 0.81))).abs() < 1e-15, "{}", r.bound);
        assert!((r.bound - 0.0059672).abs() < 2e-7);
        assert!(r.holds);
        assert_eq!(verify_marginal_kl(0.1, &[1.0, 1.0]).unwrap().kl, 0.0);
        assert!(verify_marginal_kl(0.1, &[0.9, 0.95]).is_err());
    }

    #[test]
    fn auc_extremes_and_ties() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc(&[0.0], &[1.0]), 0.0);
        assert_eq!(auc(&[1.0, 1.0], &[1.0]), 0.5);
    }

    #[test]
    fn rotation_means() {
        let mut rng = Rng::new(5);
        let tr = sample_rotation_degrees(2.0, 4.0, true, Role::Train, 20_000, &mut rng).unwrap();
        let te = sample_rotation_degrees(2.0, 4.0, true, Role::Test, 20_000, &mut rng).unwrap();
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((m(&tr) - 60.0).abs() < 1.0);
        assert!((m(&te) - 120.0).abs() < 1.0);
    }

    #[test]
    fn image_rotation_by_180_reverses() {
        let img: Vec<f64> = (0..9).map(f64::from).collect();
        let out = rotate_image(&img, 3, 180.0);
        assert_eq!(out, (0..9).rev().map(f64::from).collect::<Vec<_>>());
    }
}
