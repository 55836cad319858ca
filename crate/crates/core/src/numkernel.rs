//! Deterministic numeric primitives shared by every other module.
//!
//! Everything here is plain `f64` arithmetic on flat buffers. Parameter
//! vectors are [`ParamVec`], dense symmetric matrices are stored as a packed
//! upper triangle in [`SymMatrix`], and small Gram matrices are diagonalised
//! with a symmetric QR solver ([`sym_eig_small`]). [`Rng`] is a ChaCha8
//! stream whose sub-streams are keyed by `(seed, tag, index)`.

use std::ops::{Deref, Index};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, FireError, Result};

/// Flat, ordered vector of model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVec(values)
    }

    pub fn zeros(d: usize) -> Self {
        ParamVec(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVec) -> Result<f64> {
        check_dim(self.len(), other.len())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn scaled(&self, alpha: f64) -> ParamVec {
        ParamVec(self.0.iter().map(|v| alpha * v).collect())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVec) -> Result<ParamVec> {
        axpy(-1.0, other, self)
    }
}

impl Deref for ParamVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVec {
    fn from(v: Vec<f64>) -> Self {
        ParamVec(v)
    }
}

/// Returns `alpha * x + y`.
pub fn axpy(alpha: f64, x: &ParamVec, y: &ParamVec) -> Result<ParamVec> {
    check_dim(y.len(), x.len())?;
    let out: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| alpha * a + b).collect();
    debug_assert!(
        !(x.is_finite() && y.is_finite() && alpha.is_finite()) || out.iter().all(|v| v.is_finite())
    );
    Ok(ParamVec(out))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric matrix stored as its packed upper triangle, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    upper: Vec<f64>,
}

#[inline]
pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymMatrix { dim, upper: vec![0.0; packed_len(dim)] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            *m.get_mut(i, i) = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            *m.get_mut(i, i) = v;
        }
        m
    }

    pub fn from_packed(dim: usize, upper: Vec<f64>) -> Result<Self> {
        check_dim(packed_len(dim), upper.len())?;
        Ok(SymMatrix { dim, upper })
    }

    /// Builds from a dense row-major square matrix, reading only the upper triangle.
    pub fn from_dense_upper(dim: usize, dense: &[f64]) -> Result<Self> {
        check_dim(dim * dim, dense.len())?;
        let mut upper = Vec::with_capacity(packed_len(dim));
        for i in 0..dim {
            upper.extend_from_slice(&dense[i * dim + i..(i + 1) * dim]);
        }
        Ok(SymMatrix { dim, upper })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.upper
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        // rows 0..r hold dim + (dim-1) + ... + (dim-r+1) entries
        r * self.dim - r * (r.saturating_sub(1)) / 2 + (c - r)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[self.offset(i, j)]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let o = self.offset(i, j);
        &mut self.upper[o]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = self.get(i, j);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.get(i, j);
                s += if i == j { v * v } else { 2.0 * v * v };
            }
        }
        s.sqrt()
    }

    /// Adds `w * v v^T`.
    pub fn add_outer(&mut self, w: f64, v: &[f64]) {
        let n = self.dim;
        let mut o = 0;
        for i in 0..n {
            let wi = w * v[i];
            for &vj in &v[i..n] {
                self.upper[o] += wi * vj;
                o += 1;
            }
        }
    }

    /// Element-wise `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &SymMatrix, b: f64) -> Result<SymMatrix> {
        check_dim(self.dim, other.dim)?;
        let upper = self.upper.iter().zip(&other.upper).map(|(x, y)| a * x + b * y).collect();
        Ok(SymMatrix { dim: self.dim, upper })
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        let n = self.dim;
        let mut out = vec![0.0; n];
        let mut o = 0;
        for i in 0..n {
            out[i] += self.upper[o] * v[i];
            o += 1;
            for j in i + 1..n {
                let a = self.upper[o];
                out[i] += a * v[j];
                out[j] += a * v[i];
                o += 1;
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.upper[self.offset(i, j)]
    }
}

/// Quadratic form `v^T M v` and its companions for the symmetric operators in this crate.
pub trait SymOperator {
    fn op_dim(&self) -> usize;

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;

    fn quad_form(&self, v: &[f64]) -> Result<f64> {
        let mv = self.apply(v)?;
        Ok(dot(&mv, v))
    }
}

impl SymOperator for SymMatrix {
    fn op_dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.matvec(v)
    }

    fn quad_form(&self, v: &[f64]) -> Result<f64> {
        check_dim(self.dim, v.len())?;
        let n = self.dim;
        let mut s = 0.0;
        let mut o = 0;
        for i in 0..n {
            let mut row = 0.5 * self.upper[o] * v[i];
            o += 1;
            for j in i + 1..n {
                row += self.upper[o] * v[j];
                o += 1;
            }
            s += 2.0 * row * v[i];
        }
        Ok(s)
    }
}

/// `v^T M v` for any of the crate's symmetric operators.
pub fn quad_form<M: SymOperator + ?Sized>(m: &M, v: &ParamVec) -> Result<f64> {
    m.quad_form(v)
}

/// Eigen-decomposition of a small symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    dim: usize,
    /// Eigenvector `j` occupies `vectors[j*dim .. (j+1)*dim]`.
    vectors: Vec<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.dim..(j + 1) * self.dim]
    }

    /// `V diag(values) V^T` as a dense row-major matrix.
    pub fn reconstruct_dense(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for (j, &l) in self.values.iter().enumerate() {
            let v = self.vector(j);
            for a in 0..n {
                let la = l * v[a];
                for b in 0..n {
                    out[a * n + b] += la * v[b];
                }
            }
        }
        out
    }
}

pub const MAX_EIG_DIM: usize = 4096;

/// Symmetric eigendecomposition of a dense row-major matrix. No sign checks.
///
/// Only the upper triangle is read. Eigenvalues come back sorted descending;
/// ties keep the solver's order.
pub fn eigen_dense(dim: usize, dense: &[f64]) -> Result<SymEigen> {
    check_dim(dim * dim, dense.len())?;
    if dim > MAX_EIG_DIM {
        return Err(FireError::invalid(format!(
            "eigendecomposition limited to dim <= {MAX_EIG_DIM}, got {dim}"
        )));
    }
    if dim == 0 {
        return Ok(SymEigen { values: Vec::new(), dim, vectors: Vec::new() });
    }
    if dense.iter().any(|x| !x.is_finite()) {
        return Err(FireError::Numeric("non-finite entry in eigendecomposition input".into()));
    }
    let m = nalgebra::DMatrix::from_fn(dim, dim, |r, c| if r <= c { dense[r * dim + c] } else { dense[c * dim + r] });
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Vec::with_capacity(dim * dim);
    for &j in &order {
        vectors.extend(eig.eigenvectors.column(j).iter().copied());
    }
    Ok(SymEigen { values, dim, vectors })
}

/// Eigen-decomposition of a small matrix that is documented PSD.
///
/// Eigenvalues below `-1e-10 * ||A||_F` are a contract violation; smaller
/// negative values are clamped to zero.
pub fn sym_eig_small(g: &SymMatrix) -> Result<SymEigen> {
    let mut eig = eigen_dense(g.dim(), &g.to_dense())?;
    clamp_psd(&mut eig, g.frobenius())?;
    Ok(eig)
}

pub(crate) fn clamp_psd(eig: &mut SymEigen, scale: f64) -> Result<()> {
    let floor = 1e-10 * scale;
    for l in eig.values.iter_mut() {
        if *l < -floor {
            return Err(FireError::ContractViolation(format!(
                "eigenvalue {l:e} of a PSD matrix is below -{floor:e}"
            )));
        }
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    Ok(())
}

/// Seeded ChaCha8 stream.
///
/// Sub-streams are derived from `(seed, tag, index)` so the draws an entity
/// sees never depend on the order in which other entities were processed.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, "root", 0)
    }

    pub fn substream(seed: u64, tag: &str, index: u64) -> Self {
        let words = [
            splitmix64(seed),
            splitmix64(fnv1a(tag) ^ 0x5151_5151),
            splitmix64(index.wrapping_add(0xA5A5_A5A5_A5A5_A5A5)),
            splitmix64(seed ^ fnv1a(tag).rotate_left(17) ^ index.rotate_left(41)),
        ];
        let mut key = [0u8; 32];
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        Rng { inner: ChaCha8Rng::from_seed(key) }
    }

    /// Independent child stream; does not advance `self`.
    pub fn split(&self, tag: &str, index: u64) -> Rng {
        let mut probe = self.inner.clone();
        let parent = probe.next_u64();
        Self::substream(parent, tag, index)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // rejection sampling keeps the result platform independent and unbiased
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX % n64);
        loop {
            let r = self.inner.next_u64();
            if r < zone {
                return (r % n64) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller on two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVec {
        ParamVec::new(v.to_vec())
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(axpy(0.0, &pv(&[7.0, -3.0]), &pv(&[1.0, 2.0])).unwrap(), pv(&[1.0, 2.0]));
        assert_eq!(axpy(1.0, &pv(&[1.0, 1.0]), &pv(&[0.0, 0.0])).unwrap(), pv(&[1.0, 1.0]));
        assert_eq!(axpy(-2.0, &pv(&[1.0, 2.0]), &pv(&[5.0, 5.0])).unwrap(), pv(&[3.0, 1.0]));
        assert!(matches!(
            axpy(1.0, &pv(&[1.0]), &pv(&[1.0, 2.0])),
            Err(FireError::Dimension { .. })
        ));
    }

    #[test]
    fn packed_indexing_is_symmetric() {
        let mut m = SymMatrix::zeros(4);
        let mut k = 0.0;
        for i in 0..4 {
            for j in i..4 {
                *m.get_mut(i, j) = k;
                k += 1.0;
            }
        }
        assert_eq!(m.packed().len(), 10);
        assert_eq!(m.get(0, 3), 3.0);
        assert_eq!(m.get(3, 0), 3.0);
        assert_eq!(m.get(1, 1), 4.0);
        assert_eq!(m.get(3, 3), 9.0);
        let dense = m.to_dense();
        assert_eq!(SymMatrix::from_dense_upper(4, &dense).unwrap(), m);
    }

    #[test]
    fn eig_examples() {
        let e = sym_eig_small(&SymMatrix::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);

        let e = sym_eig_small(&SymMatrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vector(0).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(e.vector(1).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![0.0, 1.0]);

        let m = SymMatrix::from_packed(2, vec![2.0, 1.0, 2.0]).unwrap();
        let e = sym_eig_small(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig_rejects_indefinite() {
        let m = SymMatrix::from_packed(2, vec![1.0, 0.0, -1.0]).unwrap();
        assert!(matches!(sym_eig_small(&m), Err(FireError::ContractViolation(_))));
        // general routine accepts it
        let e = eigen_dense(2, &m.to_dense()).unwrap();
        assert_eq!(e.values, vec![1.0, -1.0]);
    }

    #[test]
    fn quad_form_examples() {
        let v = pv(&[3.0, 4.0]);
        assert_eq!(quad_form(&SymMatrix::identity(2), &v).unwrap(), 25.0);
        assert_eq!(quad_form(&SymMatrix::zeros(2), &v).unwrap(), 0.0);
        let v = pv(&[1.0, 2.0]);
        assert_eq!(quad_form(&SymMatrix::from_diag(&[2.0, 1.0]), &v).unwrap(), 6.0);
        assert!(quad_form(&SymMatrix::identity(3), &v).is_err());
    }

    #[test]
    fn rng_is_reproducible_and_keyed() {
        let mut a = Rng::substream(7, "batch", 3);
        let mut b = Rng::substream(7, "batch", 3);
        let mut c = Rng::substream(7, "batch", 4);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        let u = Rng::new(1).uniform();
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn rng_below_in_range() {
        let mut r = Rng::new(11);
        for n in 1..50 {
            assert!(r.below(n) < n);
        }
    }
}
