use fire_core::fisher::{empirical_fim, FisherConfig, FisherEstimate};
use fire_core::model::{init_params, log_likelihood, loss, loss_and_grad, per_sample_score, Example, Fragment, ModelSpec, Provenance};
use fire_core::numkernel::{ParamVec, Rng, SymMatrix, SymOperator};

/// Small random MLP instance with d <= 64.
fn random_instance(rng: &mut Rng) -> (ModelSpec, ParamVec, Fragment) {
    loop {
        let input = 1 + rng.below(4);
        let classes = 2 + rng.below(2);
        let hidden = if rng.below(2) == 0 { vec![] } else { vec![1 + rng.below(5)] };
        let spec = ModelSpec::new(input, hidden, classes).unwrap();
        if spec.param_count() > 64 {
            continue;
        }
        let mut theta = init_params(&spec, rng);
        // non-zero biases so the reference has to handle them
        for v in theta.as_mut_slice().iter_mut() {
            *v += 0.1 * rng.normal();
        }
        let n = 2 + rng.below(30);
        let ex = (0..n).map(|_| Example::new((0..input).map(|_| rng.normal()).collect(), rng.below(classes))).collect();
        return (spec, theta, Fragment::new("inst", ex, Provenance::Batch(0)).unwrap());
    }
}

/// Straightforward reference score: explicit layers, explicit backprop.
fn reference_score(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize) -> Vec<f64> {
    let dims = spec.layer_dims();
    let mut acts: Vec<Vec<f64>> = vec![x.to_vec()];
    let mut offsets = Vec::new();
    let mut off = 0;
    for (li, &(inp, out)) in dims.iter().enumerate() {
        offsets.push(off);
        let a = acts.last().unwrap().clone();
        let mut z = vec![0.0; out];
        for o in 0..out {
            let mut s = theta[off + inp * out + o];
            for i in 0..inp {
                s += theta[off + o * inp + i] * a[i];
            }
            z[o] = if li + 1 < dims.len() { s.max(0.0) } else { s };
        }
        off += inp * out + out;
        acts.push(z);
    }
    let logits = acts.last().unwrap();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ez: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let tot: f64 = ez.iter().sum();
    let mut delta: Vec<f64> = ez.iter().enumerate().map(|(c, e)| if c == y { 1.0 } else { 0.0 } - e / tot).collect();
    let mut score = vec![0.0; theta.len()];
    for li in (0..dims.len()).rev() {
        let (inp, out) = dims[li];
        let a = &acts[li];
        let off = offsets[li];
        for o in 0..out {
            for i in 0..inp {
                score[off + o * inp + i] = delta[o] * a[i];
            }
            score[off + inp * out + o] = delta[o];
        }
        if li > 0 {
            let mut prev = vec![0.0; inp];
            for i in 0..inp {
                if a[i] > 0.0 {
                    prev[i] = (0..out).map(|o| theta[off + o * inp + i] * delta[o]).sum();
                }
            }
            delta = prev;
        }
    }
    score
}

fn rel_frobenius(a: &SymMatrix, b: &SymMatrix) -> f64 {
    let diff = a.lin_comb(1.0, b, -1.0).unwrap();
    diff.frobenius() / b.frobenius().max(f64::MIN_POSITIVE)
}

#[test]
fn full_fim_matches_straight_loop_reference() {
    let mut rng = Rng::substream(11, "fim_oracle", 0);
    for _ in 0..50 {
        let (spec, theta, frag) = random_instance(&mut rng);
        let d = spec.param_count();
        let mut oracle = vec![vec![0.0; d]; d];
        for e in &frag.examples {
            let s = reference_score(&spec, &theta, &e.x, e.y);
            for a in 0..d {
                for b in 0..d {
                    oracle[a][b] += s[a] * s[b];
                }
            }
        }
        let n = frag.n() as f64;
        let dense: Vec<f64> = oracle.iter().flatten().map(|v| v / n).collect();
        let oracle = SymMatrix::from_dense_upper(d, &dense).unwrap();
        let full = empirical_fim(&spec, &theta, &frag, &FisherConfig::full()).unwrap();
        assert!(rel_frobenius(&full.to_sym(), &oracle) <= 1e-12);

        let diag = empirical_fim(&spec, &theta, &frag, &FisherConfig::diagonal()).unwrap();
        assert_eq!(diag.to_sym().diagonal(), full.to_sym().diagonal());

        let lr = empirical_fim(&spec, &theta, &frag, &FisherConfig::lowrank(d)).unwrap();
        assert!(rel_frobenius(&lr.to_sym(), &full.to_sym()) <= 1e-10);
    }
}

#[test]
fn gradients_and_scores_match_central_differences() {
    let h = 1e-5;
    let mut rng = Rng::substream(12, "fd_oracle", 0);
    for _ in 0..100 {
        let (spec, theta, frag) = random_instance(&mut rng);
        let (_, g) = loss_and_grad(&spec, &theta, &frag).unwrap();
        let ex = &frag.examples[0];
        let s = per_sample_score(&spec, &theta, ex).unwrap();
        for i in 0..theta.len() {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p.as_mut_slice()[i] += h;
            m.as_mut_slice()[i] -= h;
            let fd = (loss(&spec, &p, &frag).unwrap() - loss(&spec, &m, &frag).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6, "grad {i}: fd {fd} vs {}", g[i]);
            let fd = (log_likelihood(&spec, &p, ex).unwrap() - log_likelihood(&spec, &m, ex).unwrap()) / (2.0 * h);
            assert!((fd - s[i]).abs() <= 1e-6, "score {i}: fd {fd} vs {}", s[i]);
        }
    }
}

#[test]
fn lowrank_tail_matches_eckart_young() {
    let mut rng = Rng::substream(13, "eckart_young", 0);
    for _ in 0..20 {
        let (spec, theta, frag) = random_instance(&mut rng);
        let d = spec.param_count();
        let full = empirical_fim(&spec, &theta, &frag, &FisherConfig::full()).unwrap().to_sym();
        let dense = nalgebra::DMatrix::from_row_slice(d, d, &full.to_dense());
        let mut ev: Vec<f64> = dense.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let k = 1 + rng.below(d);
        let lr = empirical_fim(&spec, &theta, &frag, &FisherConfig::lowrank(k)).unwrap();
        let kk = k.min(frag.n()).min(d);
        let tail: f64 = ev[kk..].iter().map(|l| l * l).sum();
        let err = lr.to_sym().lin_comb(1.0, &full, -1.0).unwrap().frobenius();
        let scale = full.frobenius();
        assert!((err * err - tail).abs() <= 1e-9 * scale * scale, "err^2 {} tail {tail}", err * err);
    }
}

#[test]
fn lowrank_estimate_is_psd_with_orthonormal_rows() {
    let mut rng = Rng::substream(14, "psd", 0);
    for _ in 0..30 {
        let (spec, theta, frag) = random_instance(&mut rng);
        let k = 1 + rng.below(spec.param_count());
        let est = empirical_fim(&spec, &theta, &frag, &FisherConfig::lowrank(k)).unwrap();
        if let fire_core::fisher::FisherMatrix::LowRank(lr) = &est.matrix {
            assert!(lr.orthonormality_error() <= 1e-10);
            assert!(lr.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
            assert!(lr.eigenvalues().iter().all(|&l| l >= 0.0));
        } else {
            panic!("expected a low-rank estimate");
        }
        let payload = est.to_payload();
        let back = FisherEstimate::from_payload(est.kind(), est.dim, &payload).unwrap();
        assert_eq!(back.to_payload(), payload);
        let v = ParamVec::new((0..est.dim).map(|_| rng.normal()).collect());
        assert!(est.quad_form(&v).unwrap() >= -1e-12);
    }
}
