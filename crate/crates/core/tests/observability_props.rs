use filterstab::numlin::{
    is_hurwitz, numerical_rank_scaled, DEFAULT_HURWITZ_MARGIN, DEFAULT_RANK_TOL,
};
use filterstab::observability::{
    brute_force_o, linear_rank_test, observable_space, one_to_one_shortcut,
};
use filterstab::verdict::{analyze, restrict_generator_to_n, Verdict};
use filterstab::FiniteHmm;
use nalgebra::DVector;
use proptest::prelude::*;

const RESID: f64 = 1e-8;

/// Random model on `d` states: `h` takes values from `levels` distinct
/// integers, each off-diagonal rate is present with probability `density`.
fn model_strategy(max_d: usize) -> impl Strategy<Value = FiniteHmm> {
    (1..=max_d)
        .prop_flat_map(|d| {
            (
                Just(d),
                1..=d,
                prop::sample::select(vec![0.15, 0.4, 0.8]),
                prop::collection::vec(0usize..8, d),
                prop::collection::vec(0.1f64..2.0, d * d),
                prop::collection::vec(0.0f64..1.0, d * d),
            )
        })
        .prop_map(|(d, levels, density, level_idx, rates, coins)| {
            let h: Vec<f64> = level_idx.iter().map(|&k| (k % levels) as f64).collect();
            let mut g = vec![vec![0.0; d]; d];
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    if i != j && coins[i * d + j] < density {
                        g[i][j] = rates[i * d + j];
                        s += g[i][j];
                    }
                }
                g[i][i] = -s;
            }
            FiniteHmm::white_noise(g, h, 1.0).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, max_global_rejects: 100_000, ..ProptestConfig::default() })]

    #[test]
    fn iteration_matches_word_oracle(m in model_strategy(5)) {
        let d = m.d();
        let res = observable_space(&m);
        let oracle = brute_force_o(&m, d - 1, &[0.3, 0.7, 1.1]).unwrap();
        prop_assert_eq!(res.observable.dim(), oracle.dim());
        for v in oracle.basis().column_iter() {
            prop_assert!(res.observable.residual(&v.into_owned()) < RESID);
        }
        for v in res.observable.basis().column_iter() {
            prop_assert!(oracle.residual(&v.into_owned()) < RESID);
        }
    }

    #[test]
    fn observable_and_nonobservable_spaces_are_invariant(m in model_strategy(8)) {
        let d = m.d();
        let res = observable_space(&m);
        let (o, n) = (&res.observable, &res.nonobservable);
        prop_assert_eq!(o.dim() + n.dim(), d);
        prop_assert!(o.residual(&DVector::from_element(d, 1.0)) < RESID);
        prop_assert!(res.iterations_used < d.max(2));
        let g = m.generator();
        let gt = g.transpose();
        let tol = RESID * g.amax().max(1.0);
        let ls = m.level_sets();
        for v in o.basis().column_iter() {
            let v = v.into_owned();
            prop_assert!(o.residual(&(g * &v)) < tol);
            for k in 0..ls.len() {
                prop_assert!(o.residual(&ls.apply(k, &v)) < RESID);
            }
        }
        for v in n.basis().column_iter() {
            let v = v.into_owned();
            prop_assert!(n.residual(&(&gt * &v)) < tol);
            for k in 0..ls.len() {
                prop_assert!(n.residual(&ls.apply(k, &v)) < RESID);
            }
            prop_assert!((o.basis().transpose() * &v).amax() < RESID);
        }
    }

    #[test]
    fn hurwitz_and_full_rank_agree(m in model_strategy(8)) {
        let res = observable_space(&m);
        prop_assume!(res.nonobservable.dim() > 0);
        let r = restrict_generator_to_n(&m, &res.nonobservable).unwrap();
        let hurwitz = is_hurwitz(&r, DEFAULT_HURWITZ_MARGIN).unwrap().hurwitz;
        let full = numerical_rank_scaled(&r, DEFAULT_RANK_TOL, m.generator().amax()) == r.nrows();
        prop_assert_eq!(hurwitz, full);
    }

    #[test]
    fn sufficient_tests_imply_observability(m in model_strategy(8)) {
        let observable = observable_space(&m).is_observable;
        if linear_rank_test(&m) || one_to_one_shortcut(&m) {
            prop_assert!(observable);
        }
    }

    #[test]
    fn detectable_models_observe_harmonic_functions(m in model_strategy(8)) {
        // Λᵀ maps N onto itself when the restriction has full rank, so any F
        // with ΛF = 0 is orthogonal to N.
        let a = analyze(&m).unwrap();
        prop_assume!(a.report.detectable);
        let svd = m.generator().clone().svd(false, true);
        let v_t = svd.v_t.unwrap();
        let smax = svd.singular_values.max().max(1.0);
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s <= 1e-12 * smax {
                let f: DVector<f64> = v_t.row(i).transpose();
                prop_assert!(a.observability.observable.residual(&f) < 1e-7);
            }
        }
    }

    #[test]
    fn stability_verdicts_follow_detectability(m in model_strategy(6)) {
        let r = analyze(&m).unwrap().report;
        prop_assert_eq!(r.stable.value, Verdict::from_bool(r.detectable));
        prop_assert_eq!(r.strong_stable.value, Verdict::from_bool(r.num_ergodic_classes == 1));
        if r.observable {
            prop_assert!(r.detectable);
        }
        let na = analyze(&m.with_kappa(0.0).unwrap()).unwrap().report;
        prop_assert_eq!(na.stable.value, Verdict::NotApplicable);
        prop_assert_eq!(na.detectable, r.detectable);
    }
}
