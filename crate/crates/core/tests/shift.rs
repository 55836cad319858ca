use fire_core::fisher::FisherEstimate;
use fire_core::model::{Example, Fragment, Provenance};
use fire_core::numkernel::{ParamVec, Rng};
use fire_core::shiftlab::*;
use fire_core::synth::{gaussian_1d, radial_blobs, BlobParams};

fn frag(ex: Vec<Example>, id: &str) -> Fragment {
    Fragment::new(id, ex, Provenance::Validation).unwrap()
}

/// Exact two-outcome KL written out term by term.
fn bernoulli_kl(p: f64, q: f64) -> f64 {
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

#[test]
fn bernoulli_against_hand_oracle() {
    let r = verify_kl_bound_analytic(Family::Bernoulli, &[0.5], &[0.6], 0.0).unwrap();
    assert!((r.kl_true - bernoulli_kl(0.5, 0.6)).abs() < 1e-15);
    assert!((r.kl_true - 0.020411).abs() < 1e-6);
    assert!((r.quad - 0.5 * 4.0 * 0.01).abs() < 1e-15);
    let gap = r.kl_true - r.quad;
    assert!(gap > 0.0 && gap < C3 * r.beta * r.g * r.delta.powi(3));
}

#[test]
fn categorical_kl_matches_enumeration() {
    let mut rng = Rng::new(1);
    for _ in 0..200 {
        let p = [0.2 + 0.1 * rng.uniform(), 0.3 + 0.1 * rng.uniform()];
        let q = [p[0] + 0.03 * (rng.uniform() - 0.5), p[1] + 0.03 * (rng.uniform() - 0.5)];
        let pp = [p[0], p[1], 1.0 - p[0] - p[1]];
        let qq = [q[0], q[1], 1.0 - q[0] - q[1]];
        let oracle: f64 = pp.iter().zip(&qq).map(|(a, b)| a * (a / b).ln()).sum();
        let got = Family::Categorical(3).kl(&p, &q).unwrap();
        assert!((got - oracle).abs() <= 1e-14, "{got} vs {oracle}");
    }
}

#[test]
fn categorical_small_displacements_always_hold() {
    let mut rng = Rng::new(2);
    for _ in 0..1000 {
        let p = [0.2 + 0.2 * rng.uniform(), 0.2 + 0.2 * rng.uniform()];
        let d = 0.05 * rng.uniform();
        let a = rng.uniform() * std::f64::consts::TAU;
        let q = [p[0] + d * a.cos(), p[1] + d * a.sin()];
        assert!(verify_kl_bound_analytic(Family::Categorical(3), &p, &q, 0.0).unwrap().holds);
    }
}

#[test]
fn randomized_bound_suite_has_no_violations() {
    let trials = kl_bound_suite(10_000, 0).unwrap();
    assert_eq!(trials.len(), 10_000);
    for t in &trials {
        assert!(t.record.gamma <= 0.5 && t.record.delta <= 0.1);
        assert!(t.record.holds, "trial {} violated: {:?}", t.trial, t.record);
    }
    assert_eq!(theory_csv(&trials).lines().count(), 10_001);
}

#[test]
fn marginal_suite_has_no_violations() {
    let recs = marginal_suite(10_000, 0).unwrap();
    assert!(recs.iter().all(|r| r.holds && r.kl >= -1e-15));
}

#[test]
fn expansion_remainder_scales_cubically() {
    let deltas = [1e-3, 2e-3, 3e-3, 5e-3, 1e-2];
    let (slope, recs) = expansion_slope(Family::Bernoulli, &[0.3], &[1.0], &deltas).unwrap();
    assert!((slope - 3.0).abs() <= 0.3, "slope {slope}");
    assert!(recs.iter().all(|r| r.holds));
    let tripled = recs[2].remainder / recs[0].remainder;
    assert!((tripled / 27.0 - 1.0).abs() <= 0.3, "ratio {tripled}");
    let zero = verify_local_expansion(Family::Bernoulli, &[0.3], &[0.3]).unwrap();
    assert_eq!(zero.remainder, 0.0);
}

#[test]
fn gaussian_quadratic_is_exact() {
    let fam = Family::GaussianFixedVar { sigma: 1.5 };
    let r = verify_kl_bound_analytic(fam, &[0.1, -0.2], &[0.15, -0.1], 0.2).unwrap();
    assert!((r.kl_true - r.quad - two_point_marginal_kl(0.2)).abs() < 1e-15);
    assert!(r.holds);
}

#[test]
fn out_of_simplex_parameters_are_rejected() {
    assert!(verify_kl_bound_analytic(Family::Bernoulli, &[0.5], &[1.2], 0.0).is_err());
    assert!(verify_kl_bound_analytic(Family::Categorical(3), &[0.6, 0.5], &[0.3, 0.3], 0.0).is_err());
    assert!(verify_kl_bound_analytic(Family::GaussianFixedVar { sigma: 0.0 }, &[0.0], &[0.1], 0.0).is_err());
}

#[test]
fn identical_fragments_look_indistinguishable() {
    let a = frag(radial_blobs(&BlobParams { n: 800, ..Default::default() }, &mut Rng::new(3)), "a");
    let dr = estimate_density_ratio(&a, &a, &mut Rng::new(4)).unwrap();
    assert!((0.4..=0.6).contains(&dr.auc), "auc {}", dr.auc);
    let med = quantile(&dr.r_hat, 0.5);
    assert!((0.8..=1.25).contains(&med));
    assert!(dr.r_hat.iter().all(|&r| r > 0.0));
    let kl = dr.r_hat.iter().map(|r| r.ln()).sum::<f64>() / dr.r_hat.len() as f64;
    assert!(kl.abs() <= 0.05);
}

#[test]
fn three_sigma_mean_shift_is_detected() {
    let a = frag(gaussian_1d(2000, 3.0, 1.0, &mut Rng::new(5)), "shifted");
    let b = frag(gaussian_1d(2000, 0.0, 1.0, &mut Rng::new(6)), "val");
    let dr = estimate_density_ratio(&a, &b, &mut Rng::new(7)).unwrap();
    assert!(dr.auc >= 0.9, "auc {}", dr.auc);
}

#[test]
fn half_sigma_shift_recovers_analytic_kl() {
    let a = frag(gaussian_1d(5000, 0.5, 1.0, &mut Rng::new(8)), "shifted");
    let b = frag(gaussian_1d(5000, 0.0, 1.0, &mut Rng::new(9)), "val");
    let theta = ParamVec::zeros(3);
    let iv = FisherEstimate::identity_full(3);
    let rep = diagnostics(&a, &b, &theta, &theta, &iv, &mut Rng::new(10)).unwrap();
    assert!((rep.kl_hat / 0.125 - 1.0).abs() <= 0.3, "kl_hat {}", rep.kl_hat);
    assert_eq!(rep.fisher_quadratic, 0.0);
    assert_eq!(rep.delta_f, 0.0);
}

#[test]
fn fisher_displacement_matches_quadratic() {
    let a = frag(gaussian_1d(200, 0.0, 1.0, &mut Rng::new(11)), "a");
    let iv = FisherEstimate::from_diagonal(vec![2.0, 0.5]).unwrap();
    let rep = diagnostics(&a, &a, &ParamVec::new(vec![1.0, 2.0]), &ParamVec::new(vec![0.5, 1.0]), &iv, &mut Rng::new(1)).unwrap();
    assert!((rep.fisher_quadratic - 0.5 * (2.0 * 0.25 + 0.5 * 1.0)).abs() < 1e-15);
    assert!((rep.delta_f * rep.delta_f - 2.0 * rep.fisher_quadratic).abs() <= 1e-12);
    let csv = diagnostics_csv(&[rep]);
    assert_eq!(csv.lines().next().unwrap(), DIAGNOSTICS_HEADER);
}

#[test]
fn degenerate_features_give_chance_auc() {
    let ex: Vec<Example> = (0..50).map(|_| Example::new(vec![1.0, 1.0], 0)).collect();
    let dr = estimate_density_ratio(&frag(ex.clone(), "a"), &frag(ex, "b"), &mut Rng::new(0)).unwrap();
    assert_eq!(dr.auc, 0.5);
}

#[test]
fn swapping_roles_preserves_auc() {
    let shift = ShiftSpec::rotation(2.0, 4.0);
    let base = |seed| frag(radial_blobs(&BlobParams { n: 1000, ..Default::default() }, &mut Rng::new(seed)), "x");
    let tr = induce_shift(&base(1), &shift, Role::Train, &mut Rng::new(2)).unwrap();
    let te = induce_shift(&base(3), &shift, Role::Test, &mut Rng::new(4)).unwrap();
    let ab = estimate_density_ratio(&tr, &te, &mut Rng::new(5)).unwrap().auc;
    let ba = estimate_density_ratio(&te, &tr, &mut Rng::new(5)).unwrap().auc;
    assert!((ab - ba).abs() <= 0.02, "{ab} vs {ba}");
    assert!(ab > 0.6, "rotation shift should be detectable, auc {ab}");

    let sym = ShiftSpec::rotation(3.0, 3.0);
    let tr = induce_shift(&base(6), &sym, Role::Train, &mut Rng::new(7)).unwrap();
    let te = induce_shift(&base(8), &sym, Role::Test, &mut Rng::new(9)).unwrap();
    let auc = estimate_density_ratio(&tr, &te, &mut Rng::new(10)).unwrap().auc;
    assert!((auc - 0.5).abs() <= 0.05, "auc {auc}");
}

#[test]
fn tabular_bias_keeps_enough_and_is_uniform_at_zero_strength() {
    let a = frag(radial_blobs(&BlobParams { n: 500, ..Default::default() }, &mut Rng::new(12)), "t");
    let p0 = tabular_keep_probabilities(&a, 0.0);
    assert!(p0.iter().all(|&p| p == 0.5));
    for s in [1.0, 4.0, -8.0] {
        let p = tabular_keep_probabilities(&a, s);
        assert!(p.iter().sum::<f64>() / p.len() as f64 >= 0.3 - 1e-12);
    }
    let spec = ShiftSpec { kind: ShiftKind::TabularBias { strength: 2.0 }, swap_for_test: true };
    let kept = induce_shift(&a, &spec, Role::Train, &mut Rng::new(1)).unwrap();
    assert!(kept.n() < a.n() && kept.n() > 0);
}

#[test]
fn rotation_rejects_non_square_features() {
    let ex: Vec<Example> = (0..5).map(|_| Example::new(vec![0.0; 5], 0)).collect();
    assert!(induce_shift(&frag(ex, "bad"), &ShiftSpec::rotation(2.0, 4.0), Role::Train, &mut Rng::new(0)).is_err());
}

#[test]
fn gaussian_mean_shift_moves_train_only() {
    let a = frag(gaussian_1d(10, 0.0, 1.0, &mut Rng::new(13)), "g");
    let spec = ShiftSpec { kind: ShiftKind::GaussianMean { delta: vec![2.0] }, swap_for_test: true };
    let tr = induce_shift(&a, &spec, Role::Train, &mut Rng::new(0)).unwrap();
    let te = induce_shift(&a, &spec, Role::Test, &mut Rng::new(0)).unwrap();
    for ((x, t), v) in a.examples.iter().zip(&tr.examples).zip(&te.examples) {
        assert_eq!(t.x[0], x.x[0] + 2.0);
        assert_eq!(v.x, x.x);
    }
}
