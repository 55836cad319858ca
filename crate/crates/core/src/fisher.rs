//! Empirical Fisher information: estimation, algebra and wire payloads.
//!
//! An estimate is always the mean outer product of realised scores,
//! `(1/n) sum_i s_i s_i^T`, held in one of three representations:
//!
//! - `Full`: the packed upper triangle, `d(d+1)/2` values.
//! - `Diagonal`: `d` values, the exact diagonal of the full matrix.
//! - `LowRank`: `k` orthonormal rows and `k` descending eigenvalues, the best
//!   rank-`k` eigentruncation of the full matrix.
//!
//! Every combination (mixing with the validation estimate, EMA accumulation,
//! client-weighted aggregation) is a non-negative weighted sum. For the
//! low-rank variant the sum is formed exactly in the joint span of the
//! operands' rows and then re-truncated, so memory stays `O(kd)`.

use log::warn;

use crate::error::{check_dim, FireError, Result};
use crate::model::{fragment_scores, Fragment, ModelSpec};
use crate::numkernel::{clamp_psd, dot, eigen_dense, ParamVec, SymMatrix, SymOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    Full,
    Diagonal,
    LowRank,
}

impl FisherKind {
    pub fn name(self) -> &'static str {
        match self {
            FisherKind::Full => "full",
            FisherKind::Diagonal => "diagonal",
            FisherKind::LowRank => "lowrank",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(FisherKind::Full),
            "diagonal" | "diag" => Some(FisherKind::Diagonal),
            "lowrank" | "low_rank" => Some(FisherKind::LowRank),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherConfig {
    pub variant_kind: FisherKind,
    /// Rank of the low-rank variant; ignored otherwise.
    pub rank_k: usize,
    /// EMA weight on the previous global estimate.
    pub momentum_alpha: f64,
    /// Weight on the batch estimate when mixing with the validation estimate.
    pub mix_mu: f64,
    /// Recompute the validation estimate every this many optimizer steps; 0 = never.
    pub refresh_every_batches: usize,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig {
            variant_kind: FisherKind::LowRank,
            rank_k: 50,
            momentum_alpha: 0.9,
            mix_mu: 0.5,
            refresh_every_batches: 0,
        }
    }
}

impl FisherConfig {
    pub fn full() -> Self {
        FisherConfig { variant_kind: FisherKind::Full, ..Default::default() }
    }

    pub fn diagonal() -> Self {
        FisherConfig { variant_kind: FisherKind::Diagonal, ..Default::default() }
    }

    pub fn lowrank(rank_k: usize) -> Self {
        FisherConfig { variant_kind: FisherKind::LowRank, rank_k, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank_k == 0 {
            return Err(FireError::invalid("rank_k must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum_alpha) {
            return Err(FireError::invalid(format!("momentum_alpha {} not in [0,1)", self.momentum_alpha)));
        }
        if !(0.0..=1.0).contains(&self.mix_mu) {
            return Err(FireError::invalid(format!("mix_mu {} not in [0,1]", self.mix_mu)));
        }
        Ok(())
    }

    /// Low-rank target for a model of dimension `d`.
    pub fn effective_rank(&self, d: usize) -> usize {
        self.rank_k.min(d)
    }
}

/// Rank-`k` PSD matrix `F^T diag(eigenvalues) F` with orthonormal rows `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPsd {
    dim: usize,
    /// `rank x dim`, row-major.
    factor: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl LowRankPsd {
    pub fn from_parts(dim: usize, factor: Vec<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        check_dim(eigenvalues.len() * dim, factor.len())?;
        if eigenvalues.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(FireError::ContractViolation("low-rank eigenvalues must be finite and >= 0".into()));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(FireError::ContractViolation("low-rank eigenvalues must be descending".into()));
        }
        Ok(LowRankPsd { dim, factor, eigenvalues })
    }

    /// The zero matrix with `rank` standard-basis rows.
    pub fn zeros(dim: usize, rank: usize) -> Self {
        let rank = rank.min(dim);
        let mut factor = vec![0.0; rank * dim];
        for j in 0..rank {
            factor[j * dim + j] = 1.0;
        }
        LowRankPsd { dim, factor, eigenvalues: vec![0.0; rank] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.factor[j * self.dim..(j + 1) * self.dim]
    }

    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn to_sym(&self) -> SymMatrix {
        let mut m = SymMatrix::zeros(self.dim);
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            if l != 0.0 {
                m.add_outer(l, self.row(j));
            }
        }
        m
    }

    /// Largest `|<f_a, f_b> - delta_ab|` over the stored rows.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.rank() {
            for b in a..self.rank() {
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.row(a), self.row(b)) - target).abs());
            }
        }
        worst
    }
}

impl SymOperator for LowRankPsd {
    fn op_dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        let mut out = vec![0.0; self.dim];
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            let row = self.row(j);
            let c = l * dot(row, v);
            for (o, f) in out.iter_mut().zip(row) {
                *o += c * f;
            }
        }
        Ok(out)
    }

    fn quad_form(&self, v: &[f64]) -> Result<f64> {
        check_dim(self.dim, v.len())?;
        Ok(self
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(j, &l)| {
                let p = dot(self.row(j), v);
                l * p * p
            })
            .sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FisherMatrix {
    Full(SymMatrix),
    Diagonal(Vec<f64>),
    LowRank(LowRankPsd),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherEstimate {
    pub matrix: FisherMatrix,
    pub dim: usize,
    pub sample_count: usize,
}

impl FisherEstimate {
    pub fn kind(&self) -> FisherKind {
        match self.matrix {
            FisherMatrix::Full(_) => FisherKind::Full,
            FisherMatrix::Diagonal(_) => FisherKind::Diagonal,
            FisherMatrix::LowRank(_) => FisherKind::LowRank,
        }
    }

    /// The zero estimate; low-rank zeros keep `rank` (clamped to `dim`) rows.
    pub fn zeros(kind: FisherKind, dim: usize, rank: usize) -> Self {
        let matrix = match kind {
            FisherKind::Full => FisherMatrix::Full(SymMatrix::zeros(dim)),
            FisherKind::Diagonal => FisherMatrix::Diagonal(vec![0.0; dim]),
            FisherKind::LowRank => FisherMatrix::LowRank(LowRankPsd::zeros(dim, rank)),
        };
        FisherEstimate { matrix, dim, sample_count: 0 }
    }

    pub fn identity_full(dim: usize) -> Self {
        FisherEstimate { matrix: FisherMatrix::Full(SymMatrix::identity(dim)), dim, sample_count: 0 }
    }

    pub fn from_diagonal(diag: Vec<f64>) -> Result<Self> {
        if diag.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(FireError::ContractViolation("diagonal Fisher entries must be finite and >= 0".into()));
        }
        let dim = diag.len();
        Ok(FisherEstimate { matrix: FisherMatrix::Diagonal(diag), dim, sample_count: 0 })
    }

    pub fn from_full(m: SymMatrix) -> Self {
        let dim = m.dim();
        FisherEstimate { matrix: FisherMatrix::Full(m), dim, sample_count: 0 }
    }

    pub fn from_lowrank(lr: LowRankPsd) -> Self {
        let dim = lr.dim();
        FisherEstimate { matrix: FisherMatrix::LowRank(lr), dim, sample_count: 0 }
    }

    /// Low-rank rank, or `dim` for the other variants.
    pub fn rank(&self) -> usize {
        match &self.matrix {
            FisherMatrix::LowRank(lr) => lr.rank(),
            _ => self.dim,
        }
    }

    pub fn to_sym(&self) -> SymMatrix {
        match &self.matrix {
            FisherMatrix::Full(m) => m.clone(),
            FisherMatrix::Diagonal(d) => SymMatrix::from_diag(d),
            FisherMatrix::LowRank(lr) => lr.to_sym(),
        }
    }

    pub fn trace(&self) -> f64 {
        trace_penalty(self)
    }

    pub fn is_finite(&self) -> bool {
        match &self.matrix {
            FisherMatrix::Full(m) => m.packed().iter().all(|v| v.is_finite()),
            FisherMatrix::Diagonal(d) => d.iter().all(|v| v.is_finite()),
            FisherMatrix::LowRank(lr) => {
                lr.factor.iter().all(|v| v.is_finite()) && lr.eigenvalues.iter().all(|v| v.is_finite())
            }
        }
    }

    /// Little-endian `f64` payload.
    ///
    /// Full: packed upper triangle. Diagonal: `d` values. LowRank: `k` (as
    /// `f64`), then `k` eigenvalues, then `k*d` factor entries row by row.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        match &self.matrix {
            FisherMatrix::Full(m) => m.packed().iter().for_each(|&v| put(v)),
            FisherMatrix::Diagonal(d) => d.iter().for_each(|&v| put(v)),
            FisherMatrix::LowRank(lr) => {
                put(lr.rank() as f64);
                lr.eigenvalues.iter().for_each(|&v| put(v));
                lr.factor.iter().for_each(|&v| put(v));
            }
        }
        out
    }

    pub fn payload_bytes(&self) -> usize {
        payload_bytes(self.kind(), self.dim, self.rank())
    }

    pub fn from_payload(kind: FisherKind, dim: usize, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(FireError::invalid("payload length is not a multiple of 8"));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let matrix = match kind {
            FisherKind::Full => FisherMatrix::Full(SymMatrix::from_packed(dim, vals)?),
            FisherKind::Diagonal => {
                check_dim(dim, vals.len())?;
                FisherMatrix::Diagonal(vals)
            }
            FisherKind::LowRank => {
                let k = *vals.first().ok_or_else(|| FireError::invalid("empty low-rank payload"))?;
                if k < 0.0 || k.fract() != 0.0 {
                    return Err(FireError::invalid(format!("bad low-rank header {k}")));
                }
                let k = k as usize;
                check_dim(1 + k + k * dim, vals.len())?;
                let eig = vals[1..1 + k].to_vec();
                let factor = vals[1 + k..].to_vec();
                FisherMatrix::LowRank(LowRankPsd::from_parts(dim, factor, eig)?)
            }
        };
        Ok(FisherEstimate { matrix, dim, sample_count: 0 })
    }
}

/// Payload size in bytes for a `kind` estimate of dimension `dim` (and rank `k`).
pub fn payload_bytes(kind: FisherKind, dim: usize, k: usize) -> usize {
    8 * payload_values(kind, dim, k)
}

/// Payload size in `f64` values.
pub fn payload_values(kind: FisherKind, dim: usize, k: usize) -> usize {
    match kind {
        FisherKind::Full => dim * (dim + 1) / 2,
        FisherKind::Diagonal => dim,
        FisherKind::LowRank => k * dim + k + 1,
    }
}

impl SymOperator for FisherEstimate {
    fn op_dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.matrix {
            FisherMatrix::Full(m) => m.matvec(v),
            FisherMatrix::Diagonal(d) => {
                check_dim(d.len(), v.len())?;
                Ok(d.iter().zip(v).map(|(a, b)| a * b).collect())
            }
            FisherMatrix::LowRank(lr) => lr.apply(v),
        }
    }

    fn quad_form(&self, v: &[f64]) -> Result<f64> {
        match &self.matrix {
            FisherMatrix::Full(m) => m.quad_form(v),
            FisherMatrix::Diagonal(d) => {
                check_dim(d.len(), v.len())?;
                Ok(d.iter().zip(v).map(|(a, b)| a * b * b).sum())
            }
            FisherMatrix::LowRank(lr) => lr.quad_form(v),
        }
    }
}

/// Relative threshold below which a Gram eigenvalue is treated as zero.
const RANK_TOL: f64 = 1e-12;

/// Best rank-`target` truncation of `sum_i w_i g_i g_i^T` (all `w_i >= 0`).
///
/// Works in whichever of the generator space or the parameter space is
/// smaller. Missing directions are completed with orthonormal rows carrying
/// eigenvalue zero, so the result always has exactly `min(target, dim)` rows.
pub(crate) fn truncate_weighted_sum(dim: usize, generators: &[(f64, &[f64])], target: usize) -> Result<LowRankPsd> {
    let target = target.min(dim);
    // scaled generators h_i = sqrt(w_i) g_i
    let h: Vec<Vec<f64>> = generators
        .iter()
        .filter(|(w, g)| *w > 0.0 && g.iter().any(|&x| x != 0.0))
        .map(|(w, g)| {
            let s = w.sqrt();
            g.iter().map(|x| s * x).collect()
        })
        .collect();
    for (w, g) in generators {
        check_dim(dim, g.len())?;
        if *w < 0.0 || !w.is_finite() {
            return Err(FireError::invalid(format!("negative or non-finite weight {w}")));
        }
    }
    let m = h.len();
    let (mut rows, mut values) = if m == 0 || target == 0 {
        (Vec::new(), Vec::new())
    } else if m <= dim {
        gram_truncation(dim, &h, target)?
    } else {
        dense_truncation(dim, &h, target)?
    };
    complete_basis(dim, &mut rows, &mut values, target);
    let factor = rows.concat();
    LowRankPsd::from_parts(dim, factor, values)
}

/// Top eigenpairs via the `m x m` Gram matrix, refined by a Rayleigh-Ritz pass.
fn gram_truncation(dim: usize, h: &[Vec<f64>], target: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let m = h.len();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = dot(&h[i], &h[j]);
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }
    let scale: f64 = gram.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut eig = eigen_dense(m, &gram)?;
    clamp_psd(&mut eig, scale)?;
    let lmax = eig.values.first().copied().unwrap_or(0.0);
    let keep = eig.values.iter().take(target).take_while(|&&l| l > RANK_TOL * lmax && l > 0.0).count();

    let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(keep);
    for j in 0..keep {
        let u = eig.vector(j);
        let mut v = vec![0.0; dim];
        for (ui, hi) in u.iter().zip(h) {
            for (vk, hk) in v.iter_mut().zip(hi) {
                *vk += ui * hk;
            }
        }
        candidates.push(v);
    }
    let basis = orthonormalize(candidates);
    if basis.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    // Rayleigh-Ritz: B = Q M Q^T with M = sum_i h_i h_i^T
    let r = basis.len();
    let proj: Vec<Vec<f64>> = h.iter().map(|hi| basis.iter().map(|q| dot(q, hi)).collect()).collect();
    let mut b = vec![0.0; r * r];
    for p in &proj {
        for a in 0..r {
            for c in a..r {
                b[a * r + c] += p[a] * p[c];
            }
        }
    }
    for a in 0..r {
        for c in 0..a {
            b[a * r + c] = b[c * r + a];
        }
    }
    let mut small = eigen_dense(r, &b)?;
    clamp_psd(&mut small, scale)?;
    let mut rows = Vec::with_capacity(r);
    for j in 0..r {
        let w = small.vector(j);
        let mut v = vec![0.0; dim];
        for (wa, q) in w.iter().zip(&basis) {
            for (vk, qk) in v.iter_mut().zip(q) {
                *vk += wa * qk;
            }
        }
        rows.push(v);
    }
    Ok((rows, small.values))
}

/// Top eigenpairs of the explicit `dim x dim` sum; used when `dim` is the smaller side.
fn dense_truncation(dim: usize, h: &[Vec<f64>], target: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut dense = vec![0.0; dim * dim];
    for hi in h {
        for a in 0..dim {
            let ha = hi[a];
            if ha == 0.0 {
                continue;
            }
            for b in a..dim {
                dense[a * dim + b] += ha * hi[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            dense[a * dim + b] = dense[b * dim + a];
        }
    }
    let scale: f64 = dense.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut eig = eigen_dense(dim, &dense)?;
    clamp_psd(&mut eig, scale)?;
    let rows = (0..target).map(|j| eig.vector(j).to_vec()).collect();
    Ok((rows, eig.values[..target].to_vec()))
}

/// Modified Gram-Schmidt with one re-orthogonalisation pass; drops dependent vectors.
fn orthonormalize(vectors: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for mut v in vectors {
        let n0 = dot(&v, &v).sqrt();
        if n0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &v);
                for (vk, qk) in v.iter_mut().zip(q) {
                    *vk -= c * qk;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 * n0 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Pads `rows` with standard-basis directions orthogonal to them (eigenvalue 0).
fn complete_basis(dim: usize, rows: &mut Vec<Vec<f64>>, values: &mut Vec<f64>, target: usize) {
    let mut e = 0;
    while rows.len() < target && e < dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for q in rows.iter() {
                let c = dot(q, &v);
                for (vk, qk) in v.iter_mut().zip(q) {
                    *vk -= c * qk;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 0.5 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
            values.push(0.0);
        }
    }
}

/// Empirical Fisher `(1/n) sum s s^T` of the fragment at `theta`.
///
/// The low-rank variant never forms the `d x d` matrix when `n <= d`; its
/// rank is clamped to `min(rank_k, n, d)` with a logged warning.
pub fn empirical_fim(spec: &ModelSpec, theta: &ParamVec, frag: &Fragment, cfg: &FisherConfig) -> Result<FisherEstimate> {
    let scores = fragment_scores(spec, theta, frag)?;
    fim_from_scores(theta.len(), &scores, cfg)
}

pub fn fim_from_scores(dim: usize, scores: &[ParamVec], cfg: &FisherConfig) -> Result<FisherEstimate> {
    let n = scores.len();
    if n == 0 {
        return Err(FireError::EmptyFragment("scores".into()));
    }
    for s in scores {
        check_dim(dim, s.len())?;
    }
    let inv_n = 1.0 / n as f64;
    let matrix = match cfg.variant_kind {
        FisherKind::Full => {
            let mut m = SymMatrix::zeros(dim);
            for s in scores {
                m.add_outer(inv_n, s);
            }
            FisherMatrix::Full(m)
        }
        FisherKind::Diagonal => {
            // same accumulation order as the Full diagonal, so the two agree bit for bit
            let mut d = vec![0.0; dim];
            for s in scores {
                for (a, v) in d.iter_mut().zip(s.iter()) {
                    *a += (inv_n * v) * v;
                }
            }
            FisherMatrix::Diagonal(d)
        }
        FisherKind::LowRank => {
            let cap = n.min(dim);
            if cfg.rank_k > cap {
                warn!("rank_k = {} exceeds min(n, d) = {cap}; clamping", cfg.rank_k);
            }
            let k = cfg.rank_k.min(cap);
            let gens: Vec<(f64, &[f64])> = scores.iter().map(|s| (inv_n, s.as_slice())).collect();
            FisherMatrix::LowRank(truncate_weighted_sum(dim, &gens, k)?)
        }
    };
    Ok(FisherEstimate { matrix, dim, sample_count: n })
}

/// `sum_j w_j I_j` over estimates of one variant; low-rank results keep the largest operand rank.
pub fn weighted_sum(terms: &[(&FisherEstimate, f64)]) -> Result<FisherEstimate> {
    let (first, _) = terms.first().ok_or_else(|| FireError::invalid("weighted sum of no estimates"))?;
    let dim = first.dim;
    let kind = first.kind();
    for (est, w) in terms {
        check_dim(dim, est.dim)?;
        if est.kind() != kind {
            return Err(FireError::VariantMismatch(kind.name(), est.kind().name()));
        }
        if *w < 0.0 || !w.is_finite() {
            return Err(FireError::invalid(format!("weight {w} must be finite and >= 0")));
        }
    }
    let sample_count = terms.iter().map(|(e, _)| e.sample_count).sum();
    let live: Vec<&(&FisherEstimate, f64)> = terms.iter().filter(|(_, w)| *w != 0.0).collect();
    if live.len() == 1 && live[0].1 == 1.0 && terms.iter().all(|(e, _)| e.rank() <= live[0].0.rank()) {
        let mut out = live[0].0.clone();
        out.sample_count = sample_count;
        return Ok(out);
    }
    let matrix = match kind {
        FisherKind::Full => {
            let mut acc = vec![0.0; dim * (dim + 1) / 2];
            for (est, w) in terms {
                if let FisherMatrix::Full(m) = &est.matrix {
                    for (a, v) in acc.iter_mut().zip(m.packed()) {
                        *a += w * v;
                    }
                }
            }
            FisherMatrix::Full(SymMatrix::from_packed(dim, acc)?)
        }
        FisherKind::Diagonal => {
            let mut acc = vec![0.0; dim];
            for (est, w) in terms {
                if let FisherMatrix::Diagonal(d) = &est.matrix {
                    for (a, v) in acc.iter_mut().zip(d) {
                        *a += w * v;
                    }
                }
            }
            FisherMatrix::Diagonal(acc)
        }
        FisherKind::LowRank => {
            let target = terms.iter().map(|(e, _)| e.rank()).max().unwrap_or(0);
            let mut gens: Vec<(f64, &[f64])> = Vec::new();
            for (est, w) in terms {
                if let FisherMatrix::LowRank(lr) = &est.matrix {
                    for (j, &l) in lr.eigenvalues.iter().enumerate() {
                        gens.push((w * l, lr.row(j)));
                    }
                }
            }
            FisherMatrix::LowRank(truncate_weighted_sum(dim, &gens, target)?)
        }
    };
    Ok(FisherEstimate { matrix, dim, sample_count })
}

/// `mu * I_batch + (1 - mu) * I_val`.
pub fn mix_fim(i_batch: &FisherEstimate, i_val: &FisherEstimate, mu: f64) -> Result<FisherEstimate> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(FireError::invalid(format!("mixing weight {mu} not in [0,1]")));
    }
    weighted_sum(&[(i_batch, mu), (i_val, 1.0 - mu)])
}

/// `alpha * I_global + (1 - alpha) * I_new`.
pub fn ema_update(i_global: &FisherEstimate, i_new: &FisherEstimate, alpha: f64) -> Result<FisherEstimate> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(FireError::invalid(format!("momentum {alpha} not in [0,1)")));
    }
    weighted_sum(&[(i_global, alpha), (i_new, 1.0 - alpha)])
}

/// Sample-weighted average `sum_k (n_k / N) I_k`.
pub fn aggregate_fims(locals: &[(FisherEstimate, usize)]) -> Result<FisherEstimate> {
    if locals.is_empty() {
        return Err(FireError::invalid("no local estimates to aggregate"));
    }
    let total: usize = locals.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FireError::invalid("aggregation weights sum to zero"));
    }
    let terms: Vec<(&FisherEstimate, f64)> =
        locals.iter().map(|(e, n)| (e, *n as f64 / total as f64)).collect();
    weighted_sum(&terms)
}

/// `(I + lambda * I_G) g`.
pub fn apply_preconditioner(i_g: &FisherEstimate, grad: &ParamVec, lambda: f64) -> Result<ParamVec> {
    check_dim(i_g.dim, grad.len())?;
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(FireError::invalid(format!("penalty {lambda} must be finite and >= 0")));
    }
    if lambda == 0.0 {
        return Ok(grad.clone());
    }
    let ig = i_g.apply(grad)?;
    Ok(ParamVec::new(grad.iter().zip(ig).map(|(g, h)| g + lambda * h).collect()))
}

/// Trace of the estimate; the scalar logged as the penalty term.
pub fn trace_penalty(i: &FisherEstimate) -> f64 {
    match &i.matrix {
        FisherMatrix::Full(m) => m.trace(),
        FisherMatrix::Diagonal(d) => d.iter().sum(),
        FisherMatrix::LowRank(lr) => lr.eigenvalues.iter().sum(),
    }
}
