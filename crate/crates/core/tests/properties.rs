use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rieszbal::data_io::format_sig6;
use rieszbal::estimators::{
    assign_folds, crossfit_estimate, fit_and_estimate, CrossFitConfig, EstimationSpec,
};
use rieszbal::features::{eval_balancing_basis, make_feature_map, BalancingScheme, FeatureMap};
use rieszbal::model::{balancing_gap, m_of_function, Counterfactuals, Dataset, Functional, Oracle};
use rieszbal::outcome::{EffectModel, OutcomeConfig};
use rieszbal::riesz::{fit_riesz, ImbalanceGaps, Loss, RieszConfig, Solver};

/// Two covariates, roughly 40% treated, both arms at least `min_arm` strong.
fn random_dataset(seed: u64, n: usize, min_arm: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    let d: Vec<u8> = (0..n)
        .map(|i| {
            if i < min_arm {
                1
            } else if i < 2 * min_arm {
                0
            } else {
                u8::from(rng.random::<f64>() < 0.4)
            }
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| z[(i, 0)].sin() + f64::from(d[i]) * (1.0 + z[(i, 1)]) + 0.2 * rng.random::<f64>())
        .collect();
    let mu0: Vec<f64> = (0..n).map(|i| z[(i, 0)].sin()).collect();
    let mu1: Vec<f64> = (0..n).map(|i| mu0[i] + 1.0 + z[(i, 1)]).collect();
    Dataset::new(d, z, y)
        .unwrap()
        .with_oracle(Oracle::SemiSynthetic { mu0, mu1 })
        .unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0))
        .collect()
}

fn column(psi: &DMatrix<f64>, j: usize) -> Vec<f64> {
    psi.column(j).iter().copied().collect()
}

fn sq_spec(
    map: &FeatureMap,
    functional: Functional,
    scheme: BalancingScheme,
    lambda: f64,
) -> EstimationSpec {
    EstimationSpec {
        functional,
        riesz: RieszConfig::new(Loss::Sq, lambda, scheme),
        riesz_map: map.clone(),
        outcome: OutcomeConfig::new(
            EffectModel::ConstantEffect,
            map.clone().with_intercept(false),
        ),
        diagnostic_map: map.clone().with_intercept(false),
    }
}

fn functional_strategy() -> impl Strategy<Value = Functional> {
    prop_oneof![Just(Functional::Ate), Just(Functional::AttMean)]
}

fn scheme_strategy() -> impl Strategy<Value = BalancingScheme> {
    prop_oneof![
        Just(BalancingScheme::Covariate),
        Just(BalancingScheme::Regressor)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn balancing_gap_is_linear(seed in any::<u64>(), n in 2usize..80, a in -5.0f64..5.0, b in -5.0f64..5.0, functional in functional_strategy()) {
        let ds = random_dataset(seed, n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let alpha = uniform(&mut rng, n, 3.0);
        let f = Counterfactuals::new(uniform(&mut rng, n, 2.0), uniform(&mut rng, n, 2.0));
        let g = Counterfactuals::new(uniform(&mut rng, n, 2.0), uniform(&mut rng, n, 2.0));
        let combo = f.combine(a, &g, b);
        let lhs = balancing_gap(functional, &ds, &alpha, &combo).unwrap();
        let rhs = a * balancing_gap(functional, &ds, &alpha, &f).unwrap()
            + b * balancing_gap(functional, &ds, &alpha, &g).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
    }

    #[test]
    fn ate_gap_of_covariate_function_has_no_functional_term(seed in any::<u64>(), n in 2usize..80) {
        let ds = random_dataset(seed, n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let alpha = uniform(&mut rng, n, 3.0);
        let h = uniform(&mut rng, n, 2.0);
        let m = m_of_function(Functional::Ate, &ds, &Counterfactuals::covariate_only(h.clone())).unwrap();
        prop_assert!(m.iter().all(|&v| v == 0.0));
        let gap = balancing_gap(Functional::Ate, &ds, &alpha, &Counterfactuals::covariate_only(h.clone())).unwrap();
        let direct = alpha.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>() / n as f64;
        prop_assert!((gap - direct).abs() <= 1e-13);
    }

    #[test]
    fn att_mean_gap_of_constant(seed in any::<u64>(), n in 2usize..80) {
        let ds = random_dataset(seed, n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let alpha = uniform(&mut rng, n, 3.0);
        let one = Counterfactuals::covariate_only(vec![1.0; n]);
        let gap = balancing_gap(Functional::AttMean, &ds, &alpha, &one).unwrap();
        let expected = alpha.iter().sum::<f64>() / n as f64 - 1.0;
        prop_assert!((gap - expected).abs() <= 1e-12);
    }

    #[test]
    fn balancing_basis_blocks_and_images(seed in any::<u64>(), n in 4usize..60, m in 1usize..6, scheme in scheme_strategy(), functional in functional_strategy()) {
        let ds = random_dataset(seed, n, 2);
        let map = make_feature_map(2, m, 1.0, seed).unwrap();
        let basis = eval_balancing_basis(&map, scheme, ds.treatment(), ds.covariates(), functional).unwrap();
        let psi = map.eval_covariate_basis(ds.covariates()).unwrap();
        let q = psi.ncols();
        let d = ds.treatment();
        for j in 0..basis.width() {
            let base = column(&psi, j % q);
            let f = match (scheme, functional, j < q) {
                (BalancingScheme::Regressor, Functional::Ate, true) => Counterfactuals::new(vec![0.0; n], base),
                (BalancingScheme::Regressor, Functional::Ate, false) => Counterfactuals::new(base, vec![0.0; n]),
                (BalancingScheme::Covariate, Functional::Ate, _) => Counterfactuals::covariate_only(base),
                (_, Functional::AttMean, _) => Counterfactuals::new(base, vec![0.0; n]),
            };
            let m_vals = m_of_function(functional, &ds, &f).unwrap();
            for i in 0..n {
                prop_assert!((basis.counterfactual_m[(i, j)] - m_vals[i]).abs() <= 1e-12);
                prop_assert_eq!(basis.columns[(i, j)], f.at(d[i], i));
            }
        }
        if scheme == BalancingScheme::Regressor && functional == Functional::Ate {
            for i in 0..n {
                for j in 0..q {
                    prop_assert_eq!(basis.columns[(i, j)] * basis.columns[(i, q + j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn sq_ridge_imbalance_identity(seed in any::<u64>(), n in 20usize..120, m in 1usize..12, lambda in 1e-4f64..1.0, scheme in scheme_strategy(), functional in functional_strategy()) {
        let ds = random_dataset(seed, n, 3);
        let map = make_feature_map(2, m, 1.0, seed).unwrap();
        let fit = fit_riesz(&ds, functional, &map, &RieszConfig::new(Loss::Sq, lambda, scheme)).unwrap();
        let alpha = fit.alpha_values(&ds).unwrap();
        let beta = fit.coefficients();
        let psi = map.eval_covariate_basis(ds.covariates()).unwrap();
        let gaps = ImbalanceGaps::compute(ds.treatment(), &alpha, &functional.weights(&ds).unwrap(), &psi);
        let q = psi.ncols();
        let relevant: Vec<f64> = match (scheme, functional) {
            (BalancingScheme::Regressor, Functional::Ate) => gaps.regressor.clone(),
            (BalancingScheme::Covariate, Functional::Ate) => gaps.covariate.clone(),
            (_, Functional::AttMean) => gaps.regressor[q..].to_vec(),
        };
        prop_assert_eq!(relevant.len(), beta.len());
        for (g, b) in relevant.iter().zip(beta.iter()) {
            prop_assert!((g + lambda * b).abs() <= 1e-8, "gap {} beta {}", g, b);
        }
    }

    #[test]
    fn joint_fit_equals_per_arm_solves(seed in any::<u64>(), n in 30usize..120, m in 1usize..8, lambda in 1e-3f64..1.0) {
        let ds = random_dataset(seed, n, 3);
        let map = make_feature_map(2, m, 1.0, seed).unwrap();
        let fit = fit_riesz(&ds, Functional::Ate, &map, &RieszConfig::new(Loss::Sq, lambda, BalancingScheme::Regressor)).unwrap();
        let beta = fit.coefficients();
        let psi = map.eval_covariate_basis(ds.covariates()).unwrap();
        let q = psi.ncols();
        let nf = n as f64;
        let target = psi.row_mean().transpose();
        for (arm, sign, offset) in [(1u8, 1.0, 0), (0u8, -1.0, q)] {
            let rows: Vec<usize> = (0..n).filter(|&i| ds.treatment()[i] == arm).collect();
            let x = psi.select_rows(&rows);
            let gram = x.tr_mul(&x) / nf + DMatrix::identity(q, q) * lambda;
            let own = gram.cholesky().unwrap().solve(&(&target * sign));
            for k in 0..q {
                prop_assert!((own[k] - beta[offset + k]).abs() <= 1e-10 * (1.0 + own[k].abs()));
            }
        }
    }

    #[test]
    fn coefficient_norm_shrinks_with_lambda(seed in any::<u64>(), n in 20usize..100, m in 1usize..10, l1 in 1e-4f64..0.5, step in 1e-4f64..2.0, scheme in scheme_strategy()) {
        let ds = random_dataset(seed, n, 3);
        let map = make_feature_map(2, m, 1.0, seed).unwrap();
        let norm = |lambda: f64| {
            fit_riesz(&ds, Functional::Ate, &map, &RieszConfig::new(Loss::Sq, lambda, scheme)).unwrap().coefficients().norm()
        };
        let (a, b) = (norm(l1), norm(l1 + step));
        prop_assert!(b <= a * (1.0 + 1e-12));
    }

    #[test]
    fn sq_iterative_matches_closed_form(seed in any::<u64>(), n in 20usize..100, m in 1usize..8, lambda in 1e-3f64..1.0, scheme in scheme_strategy()) {
        let ds = random_dataset(seed, n, 3);
        let map = make_feature_map(2, m, 1.0, seed).unwrap();
        let closed = fit_riesz(&ds, Functional::Ate, &map, &RieszConfig::new(Loss::Sq, lambda, scheme)).unwrap();
        let mut config = RieszConfig::new(Loss::Sq, lambda, scheme);
        config.solver = Solver::ConvexIterative;
        let iterative = fit_riesz(&ds, Functional::Ate, &map, &config).unwrap();
        let a = closed.alpha_values(&ds).unwrap();
        let b = iterative.alpha_values(&ds).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generalized_losses_balance_each_arm(seed in any::<u64>(), n in 200usize..400, m in 1usize..5, loss in prop_oneof![Just(Loss::Ukl), Just(Loss::Bp)]) {
        let ds = random_dataset(seed, n, 20);
        let map = make_feature_map(2, m, 1.5, seed).unwrap();
        let config = RieszConfig::new(loss, 0.0, BalancingScheme::Regressor);
        let fit = fit_riesz(&ds, Functional::Ate, &map, &config).unwrap();
        let alpha = fit.alpha_values(&ds).unwrap();
        let psi = map.eval_covariate_basis(ds.covariates()).unwrap();
        let gaps = ImbalanceGaps::compute(ds.treatment(), &alpha, &Functional::Ate.weights(&ds).unwrap(), &psi);
        for g in &gaps.regressor {
            prop_assert!(g.abs() <= 10.0 * config.tol, "gap {}", g);
        }
    }

    #[test]
    fn ukl_att_mean_matches_treated_moments(seed in any::<u64>(), n in 200usize..400, m in 1usize..5) {
        let ds = random_dataset(seed, n, 20);
        let map = make_feature_map(2, m, 1.5, seed).unwrap();
        let fit = fit_riesz(&ds, Functional::AttMean, &map, &RieszConfig::new(Loss::Ukl, 0.0, BalancingScheme::Regressor)).unwrap();
        let alpha = fit.alpha_values(&ds).unwrap();
        let psi = map.eval_covariate_basis(ds.covariates()).unwrap();
        let d = ds.treatment();
        let pbar = ds.treated_share();
        let nf = n as f64;
        for j in 0..psi.ncols() {
            let weighted: f64 = (0..n).filter(|&i| d[i] == 0).map(|i| alpha[i] * psi[(i, j)]).sum::<f64>() / nf;
            let treated: f64 = (0..n).filter(|&i| d[i] == 1).map(|i| psi[(i, j)] / pbar).sum::<f64>() / nf;
            prop_assert!((weighted - treated).abs() <= 1e-8);
        }
        prop_assert!((0..n).filter(|&i| d[i] == 0).all(|i| alpha[i] > 0.0));
    }

    #[test]
    fn estimates_carry_the_neyman_decomposition(seed in any::<u64>(), n in 60usize..150, functional in functional_strategy(), folds in prop_oneof![Just(None), Just(Some(2usize)), Just(Some(3usize))]) {
        let ds = random_dataset(seed, n, 12);
        let map = make_feature_map(2, 4, 1.0, seed).unwrap();
        let spec = sq_spec(&map, functional, BalancingScheme::Regressor, 0.05);
        let r = match folds {
            None => fit_and_estimate(&ds, &spec),
            Some(k) => crossfit_estimate(&ds, &spec, &CrossFitConfig::new(k, seed)),
        };
        if let Ok(r) = r {
            let t = r.neyman.unwrap();
            let scale = t.ne.abs().max(t.noise.abs()).max(t.drift.abs()).max(1.0);
            prop_assert!((t.ne - (t.noise - t.drift)).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn ra_shift_and_rw_linearity(seed in any::<u64>(), n in 40usize..120, c in -10.0f64..10.0, s in -3.0f64..3.0, functional in functional_strategy()) {
        let ds = random_dataset(seed, n, 8);
        let map = make_feature_map(2, 4, 1.0, seed).unwrap();
        let spec = sq_spec(&map, functional, BalancingScheme::Regressor, 0.05);
        let base = fit_and_estimate(&ds, &spec).unwrap();
        let rebuild = |y: Vec<f64>| Dataset::new(ds.treatment().to_vec(), ds.covariates().clone(), y).unwrap();
        let shifted = fit_and_estimate(&rebuild(ds.outcome().iter().map(|v| v + c).collect()), &spec).unwrap();
        let response = if functional == Functional::Ate { 0.0 } else { c };
        prop_assert!((shifted.theta_ra - base.theta_ra - response).abs() <= 1e-8 * (1.0 + c.abs()));
        let scaled = fit_and_estimate(&rebuild(ds.outcome().iter().map(|v| v * s).collect()), &spec).unwrap();
        prop_assert!((scaled.theta_rw - s * base.theta_rw).abs() <= 1e-10 * (1.0 + base.theta_rw.abs()));
    }

    #[test]
    fn folds_partition_the_sample(n in 2usize..500, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = assign_folds(n, k, seed);
        prop_assert_eq!(folds.len(), k);
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = folds.concat();
        prop_assert!(folds.iter().all(|f| f.windows(2).all(|w| w[0] < w[1])));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(assign_folds(n, k, seed), folds);
    }

    #[test]
    fn six_significant_digits_round_trip(x in prop_oneof![-1e12f64..1e12, -1e-3f64..1e-3]) {
        let back: f64 = format_sig6(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-6 * x.abs());
        prop_assert_eq!(format_sig6(back), format_sig6(x));
    }

    #[test]
    fn outcome_ridge_path_is_continuous(seed in any::<u64>(), lambda in 1e-3f64..1.0) {
        let ds = random_dataset(seed, 80, 8);
        let map = make_feature_map(2, 6, 1.0, seed).unwrap().with_intercept(false);
        let fit = |l: f64| {
            rieszbal::outcome::fit_outcome(&ds, &OutcomeConfig::new(EffectModel::InteractedEffect, map.clone()).with_ridge(l))
                .unwrap()
                .coefficients
        };
        let gap: DVector<f64> = fit(lambda) - fit(lambda * (1.0 + 1e-7));
        prop_assert!(gap.amax() <= 1e-4 * (1.0 + fit(lambda).amax()));
    }
}
