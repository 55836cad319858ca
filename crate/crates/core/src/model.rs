//! Feed-forward softmax classifiers with exact gradients and per-sample scores.
//!
//! Parameters are laid out layer by layer: the weight matrix of a layer in
//! row-major `out x in` order, followed by its `out` biases. An empty
//! `hidden_sizes` gives plain multinomial logistic regression.

use crate::error::{check_dim, FireError, Result};
use crate::numkernel::{ParamVec, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec { input_dim, hidden_sizes, num_classes, activation: Activation::Relu };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, Vec::new(), num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FireError::invalid("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(FireError::invalid("num_classes must be at least 2"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(FireError::invalid("hidden layer sizes must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_sizes.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Example {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Example { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Batch(usize),
    Fold(usize),
    Client(usize),
    Validation,
}

/// A labelled slice of data: a batch, a fold, a client shard or the validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub id: String,
    pub examples: Vec<Example>,
    pub provenance: Provenance,
}

impl Fragment {
    pub fn new(id: impl Into<String>, examples: Vec<Example>, provenance: Provenance) -> Result<Self> {
        let id = id.into();
        if examples.is_empty() {
            return Err(FireError::EmptyFragment(id));
        }
        Ok(Fragment { id, examples, provenance })
    }

    pub fn n(&self) -> usize {
        self.examples.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }

    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.examples.is_empty() {
            return Err(FireError::EmptyFragment(self.id.clone()));
        }
        for ex in &self.examples {
            check_dim(spec.input_dim, ex.x.len())?;
            if ex.y >= spec.num_classes {
                return Err(FireError::invalid(format!(
                    "label {} out of range for {} classes in fragment `{}`",
                    ex.y, spec.num_classes, self.id
                )));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, rng: &mut Rng) -> ParamVec {
    let mut theta = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            theta.push(rng.uniform_range(-limit, limit));
        }
        theta.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVec::new(theta)
}

/// Activations kept from a forward pass; `pre[l]` are the pre-activations of layer `l`.
struct Forward {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Forward {
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut inputs = Vec::with_capacity(dims.len());
    let mut pre = Vec::with_capacity(dims.len());
    let mut a = x.to_vec();
    let mut off = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &theta[off..off + fan_in * fan_out];
        let b = &theta[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        off += (fan_in + 1) * fan_out;
        let z: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[o]
            })
            .collect();
        let next = if l == last { Vec::new() } else { z.iter().map(|&v| v.max(0.0)).collect() };
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    Forward { inputs, pre }
}

/// Log-softmax with the row max subtracted.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn logits(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
    forward(spec, theta, x).pre.pop().expect("at least one layer")
}

fn check_theta(spec: &ModelSpec, theta: &ParamVec) -> Result<()> {
    check_dim(spec.param_count(), theta.len())
}

/// Class probabilities `p(.|x; theta)`.
pub fn predict_proba(spec: &ModelSpec, theta: &ParamVec, x: &[f64]) -> Result<Vec<f64>> {
    check_theta(spec, theta)?;
    check_dim(spec.input_dim, x.len())?;
    Ok(log_softmax(&logits(spec, theta, x)).into_iter().map(f64::exp).collect())
}

/// `log p(y|x; theta)`.
pub fn log_likelihood(spec: &ModelSpec, theta: &ParamVec, ex: &Example) -> Result<f64> {
    check_theta(spec, theta)?;
    check_dim(spec.input_dim, ex.x.len())?;
    Ok(log_softmax(&logits(spec, theta, &ex.x))[ex.y])
}

/// Adds `scale * d log p(y|x)/d theta` into `out`; returns `log p(y|x)`.
fn accumulate_score(spec: &ModelSpec, theta: &[f64], ex: &Example, scale: f64, out: &mut [f64]) -> f64 {
    let fw = forward(spec, theta, &ex.x);
    let dims = spec.layer_dims();
    let logp = log_softmax(fw.pre.last().expect("output layer"));
    // d log p_y / d z_c = 1[c = y] - p_c
    let mut delta: Vec<f64> = logp.iter().map(|lp| -lp.exp()).collect();
    delta[ex.y] += 1.0;

    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(i, o) in &dims {
        offsets.push(off);
        off += (i + 1) * o;
    }
    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let off = offsets[l];
        let a = &fw.inputs[l];
        for o in 0..fan_out {
            let d = scale * delta[o];
            if d != 0.0 {
                let row = &mut out[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, ai) in row.iter_mut().zip(a) {
                    *g += d * ai;
                }
            }
            out[off + fan_in * fan_out + o] += d;
        }
        if l > 0 {
            let w = &theta[off..off + fan_in * fan_out];
            let z_prev = &fw.pre[l - 1];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * wi;
                    }
                }
            }
            // relu'(0) = 0
            for (p, z) in prev.iter_mut().zip(z_prev) {
                if *z <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    logp[ex.y]
}

/// Score vector `d log p(y|x; theta) / d theta` for one example.
pub fn per_sample_score(spec: &ModelSpec, theta: &ParamVec, ex: &Example) -> Result<ParamVec> {
    check_theta(spec, theta)?;
    check_dim(spec.input_dim, ex.x.len())?;
    if ex.y >= spec.num_classes {
        return Err(FireError::invalid(format!("label {} out of range", ex.y)));
    }
    let mut s = vec![0.0; theta.len()];
    accumulate_score(spec, theta, ex, 1.0, &mut s);
    Ok(ParamVec::new(s))
}

/// Scores of every example in the fragment, in fragment order.
pub fn fragment_scores(spec: &ModelSpec, theta: &ParamVec, frag: &Fragment) -> Result<Vec<ParamVec>> {
    check_theta(spec, theta)?;
    frag.check_against(spec)?;
    Ok(frag
        .examples
        .iter()
        .map(|ex| {
            let mut s = vec![0.0; theta.len()];
            accumulate_score(spec, theta, ex, 1.0, &mut s);
            ParamVec::new(s)
        })
        .collect())
}

/// Mean cross-entropy over the fragment and its exact gradient.
pub fn loss_and_grad(spec: &ModelSpec, theta: &ParamVec, frag: &Fragment) -> Result<(f64, ParamVec)> {
    check_theta(spec, theta)?;
    frag.check_against(spec)?;
    let mut sum_scores = vec![0.0; theta.len()];
    let mut sum_logp = 0.0;
    for ex in &frag.examples {
        sum_logp += accumulate_score(spec, theta, ex, 1.0, &mut sum_scores);
    }
    let n = frag.n() as f64;
    let grad = sum_scores.into_iter().map(|s| -s / n).collect();
    Ok((-sum_logp / n, ParamVec::new(grad)))
}

/// Mean cross-entropy only.
pub fn loss(spec: &ModelSpec, theta: &ParamVec, frag: &Fragment) -> Result<f64> {
    check_theta(spec, theta)?;
    frag.check_against(spec)?;
    let total: f64 = frag
        .examples
        .iter()
        .map(|ex| -log_softmax(&logits(spec, theta, &ex.x))[ex.y])
        .sum();
    Ok(total / frag.n() as f64)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(spec: &ModelSpec, theta: &ParamVec, x: &[f64]) -> Result<usize> {
    check_theta(spec, theta)?;
    check_dim(spec.input_dim, x.len())?;
    Ok(argmax(&logits(spec, theta, x)))
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(spec: &ModelSpec, theta: &ParamVec, frag: &Fragment) -> Result<f64> {
    check_theta(spec, theta)?;
    frag.check_against(spec)?;
    let correct = frag
        .examples
        .iter()
        .filter(|ex| argmax(&logits(spec, theta, &ex.x)) == ex.y)
        .count();
    Ok(correct as f64 / frag.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frag(examples: Vec<Example>) -> Fragment {
        Fragment::new("t", examples, Provenance::Batch(0)).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::linear(2, 2).unwrap().param_count(), 6);
        let mlp = ModelSpec::new(784, vec![512, 256], 10).unwrap();
        assert_eq!(mlp.param_count(), 785 * 512 + 513 * 256 + 257 * 10);
        assert_eq!(mlp.param_count(), 535_818);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let a = init_params(&spec, &mut Rng::new(5));
        let b = init_params(&spec, &mut Rng::new(5));
        assert_eq!(a, b);
        let limit = (6.0f64 / 7.0).sqrt();
        assert!(a[..12].iter().all(|w| w.abs() <= limit));
        assert!(a[12..16].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn uniform_softmax_loss_is_ln2() {
        let spec = ModelSpec::linear(2, 2).unwrap();
        let f = frag(vec![Example::new(vec![3.0, -1.0], 0), Example::new(vec![0.2, 9.0], 1)]);
        let (l, _) = loss_and_grad(&spec, &ParamVec::zeros(6), &f).unwrap();
        assert_eq!(l, std::f64::consts::LN_2);
    }

    #[test]
    fn score_at_uniform_by_hand() {
        let spec = ModelSpec::linear(2, 2).unwrap();
        let s = per_sample_score(&spec, &ParamVec::zeros(6), &Example::new(vec![1.0, 0.0], 0)).unwrap();
        // [W00 W01 W10 W11 b0 b1]
        assert_eq!(s.as_slice(), &[0.5, 0.0, -0.5, 0.0, 0.5, -0.5]);
    }

    #[test]
    fn empty_fragment_rejected() {
        assert!(matches!(Fragment::new("e", vec![], Provenance::Validation), Err(FireError::EmptyFragment(_))));
    }

    #[test]
    fn accuracy_tie_break_and_single() {
        let spec = ModelSpec::linear(1, 3).unwrap();
        let f = frag(vec![
            Example::new(vec![1.0], 0),
            Example::new(vec![2.0], 1),
            Example::new(vec![3.0], 0),
            Example::new(vec![4.0], 2),
        ]);
        assert_eq!(accuracy(&spec, &ParamVec::zeros(6), &f).unwrap(), 0.5);
        let one = frag(vec![Example::new(vec![1.0], 2)]);
        let theta = ParamVec::new(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(accuracy(&spec, &theta, &one).unwrap(), 1.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // hidden unit pre-activation exactly 0: input weights 0, bias 0
        let spec = ModelSpec::new(1, vec![1], 2).unwrap();
        let theta = ParamVec::new(vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0]);
        let s = per_sample_score(&spec, &theta, &Example::new(vec![2.0], 0)).unwrap();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.0);
    }
}
