//! Synthetic datasets.

use crate::model::Example;
use crate::numkernel::Rng;

/// Gaussian blobs whose class is encoded by distance from the origin.
///
/// Class `c` is centred at `(radius0 + c * spacing, 0)`. Labels depend only
/// on the radius, so rotating the points about the origin changes the
/// covariate distribution but not `p(y|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub n: usize,
    pub classes: usize,
    pub std: f64,
    pub radius0: f64,
    pub spacing: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams { n: 600, classes: 3, std: 0.35, radius0: 1.0, spacing: 1.25 }
    }
}

pub fn radial_blobs(p: &BlobParams, rng: &mut Rng) -> Vec<Example> {
    (0..p.n)
        .map(|i| {
            let c = i % p.classes;
            let cx = p.radius0 + c as f64 * p.spacing;
            Example::new(vec![cx + p.std * rng.normal(), p.std * rng.normal()], c)
        })
        .collect()
}

/// Blobs around arbitrary centres, labels assigned round-robin.
pub fn blobs(n: usize, centers: &[Vec<f64>], std: f64, rng: &mut Rng) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let c = i % centers.len();
            let x = centers[c].iter().map(|m| m + std * rng.normal()).collect();
            Example::new(x, c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoonParams {
    pub n: usize,
    pub noise: f64,
}

impl Default for MoonParams {
    fn default() -> Self {
        MoonParams { n: 600, noise: 0.15 }
    }
}

/// The classic interleaved half-circles, centred near the origin.
pub fn two_moons(p: &MoonParams, rng: &mut Rng) -> Vec<Example> {
    (0..p.n)
        .map(|i| {
            let t = std::f64::consts::PI * rng.uniform();
            let (x, y, c) = if i % 2 == 0 {
                (t.cos(), t.sin(), 0)
            } else {
                (1.0 - t.cos(), 0.5 - t.sin(), 1)
            };
            Example::new(vec![x - 0.5 + p.noise * rng.normal(), y - 0.25 + p.noise * rng.normal()], c)
        })
        .collect()
}

/// Unlabelled (class 0) draws from `N(mean, std^2)` in one dimension.
pub fn gaussian_1d(n: usize, mean: f64, std: f64, rng: &mut Rng) -> Vec<Example> {
    (0..n).map(|_| Example::new(vec![mean + std * rng.normal()], 0)).collect()
}
