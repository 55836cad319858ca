use fire_core::fisher::{apply_preconditioner, fim_from_scores, weighted_sum, FisherConfig, FisherEstimate};
use fire_core::numkernel::{ParamVec, SymOperator};
use proptest::prelude::*;

fn scores(dim: usize) -> impl Strategy<Value = Vec<ParamVec>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim).prop_map(ParamVec::new), 1..12)
}

fn configs() -> impl Strategy<Value = FisherConfig> {
    prop_oneof![Just(FisherConfig::full()), Just(FisherConfig::diagonal()), (1usize..8).prop_map(FisherConfig::lowrank)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimates_are_psd_and_survive_the_wire(s in scores(6), cfg in configs(), v in prop::collection::vec(-2.0f64..2.0, 6)) {
        let est = fim_from_scores(6, &s, &cfg).unwrap();
        let v = ParamVec::new(v);
        prop_assert!(est.quad_form(&v).unwrap() >= -1e-12);
        let bytes = est.to_payload();
        prop_assert_eq!(bytes.len(), est.payload_bytes());
        let back = FisherEstimate::from_payload(est.kind(), est.dim, &bytes).unwrap();
        prop_assert_eq!(back.to_payload(), bytes);
    }

    #[test]
    fn convex_combinations_stay_psd(a in scores(5), b in scores(5), w in 0.0f64..1.0, cfg in configs()) {
        let ea = fim_from_scores(5, &a, &cfg).unwrap();
        let eb = fim_from_scores(5, &b, &cfg).unwrap();
        let mixed = weighted_sum(&[(&ea, w), (&eb, 1.0 - w)]).unwrap();
        prop_assert_eq!(mixed.kind(), ea.kind());
        let trace = mixed.to_sym().trace();
        let expected = w * ea.to_sym().trace() + (1.0 - w) * eb.to_sym().trace();
        if cfg.variant_kind != fire_core::fisher::FisherKind::LowRank {
            prop_assert!((trace - expected).abs() <= 1e-10 * expected.max(1.0));
        } else {
            // truncation can only drop mass
            prop_assert!(trace <= expected * (1.0 + 1e-10) + 1e-12);
        }
        prop_assert!(mixed.to_sym().diagonal().iter().all(|&x| x >= -1e-12));
    }

    #[test]
    fn preconditioning_never_shrinks_along_the_gradient(s in scores(4), g in prop::collection::vec(-5.0f64..5.0, 4), lambda in 0.0f64..3.0) {
        let est = fim_from_scores(4, &s, &FisherConfig::full()).unwrap();
        let g = ParamVec::new(g);
        let p = apply_preconditioner(&est, &g, lambda).unwrap();
        prop_assert!(p.dot(&g).unwrap() >= g.norm_sq() * (1.0 - 1e-12) - 1e-12);
    }
}
