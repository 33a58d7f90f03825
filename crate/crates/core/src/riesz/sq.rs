use nalgebra::{Cholesky, DMatrix, DVector};

use super::{Loss, RieszConfig, RieszFit, RieszModel, Solver};
use crate::error::{Error, Result};
use crate::features::BalancingBasis;
use crate::model::{Dataset, Functional};

/// Closed-form squared-loss Riesz regression.
///
/// Solves `(G + λI)β = b - c` with `G = (1/n) Σ Φ_i Φ_iᵀ`,
/// `b = (1/n) Σ m(W_i; Φ)` and `c = (1/n) Σ offset_i Φ_i`. The fit satisfies
/// `Δ_n(α̂, Φ_j) = -λ β̂_j` for every column.
pub fn fit_riesz_sq(
    dataset: &Dataset,
    functional: Functional,
    basis: &BalancingBasis,
    lambda: f64,
) -> Result<RieszFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput("lambda must be nonnegative".into()));
    }
    if basis.n() != dataset.n() {
        return Err(Error::InvalidInput(format!(
            "basis has {} rows, dataset has {}",
            basis.n(),
            dataset.n()
        )));
    }
    if basis.functional != functional {
        return Err(Error::IncompatibleScheme(format!(
            "basis built for {}, fitting {}",
            basis.functional.name(),
            functional.name()
        )));
    }
    let n = basis.n() as f64;
    let phi = &basis.columns;
    let width = phi.ncols();

    let mut system = phi.tr_mul(phi) / n;
    for k in 0..width {
        system[(k, k)] += lambda;
    }
    let offsets = DVector::from_column_slice(&basis.offset_vals);
    let b = DVector::from_fn(width, |j, _| basis.counterfactual_m.column(j).sum() / n);
    let c = phi.tr_mul(&offsets) / n;
    let rhs = b - c;

    let beta = solve_spd(&system, &rhs).ok_or(Error::RankDeficient)?;
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient);
    }

    let mut config = RieszConfig::new(Loss::Sq, lambda, basis.scheme);
    config.solver = Solver::ClosedForm;
    Ok(RieszFit {
        config,
        functional,
        map: basis.map.clone(),
        model: RieszModel::Linear {
            layout: basis.layout,
            coefficients: beta,
        },
        traces: Vec::new(),
    })
}

/// Cholesky solve followed by one step of iterative refinement. Pivots at
/// rounding level relative to the largest diagonal entry count as singular.
pub(crate) fn solve_spd(system: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = Cholesky::new(system.clone())?;
    let dim = system.nrows();
    let floor = dim.max(1) as f64 * f64::EPSILON * system.diagonal().amax();
    if chol.l_dirty().diagonal().iter().any(|&l| l * l <= floor) {
        return None;
    }
    let mut x = chol.solve(rhs);
    let residual = rhs - system * &x;
    x += chol.solve(&residual);
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{eval_balancing_basis, BalancingScheme, FeatureMap};
    use crate::model::{balancing_gap, Counterfactuals};

    fn two_point() -> (Dataset, BalancingBasis) {
        let ds = Dataset::new(vec![1, 0], DMatrix::zeros(2, 1), vec![0.0, 0.0]).unwrap();
        let map = FeatureMap::from_parts(DMatrix::zeros(0, 1), vec![], true).unwrap();
        let basis = eval_balancing_basis(
            &map,
            BalancingScheme::Regressor,
            ds.treatment(),
            ds.covariates(),
            Functional::Ate,
        )
        .unwrap();
        (ds, basis)
    }

    #[test]
    fn two_point_exact_solution() {
        let (ds, basis) = two_point();
        let fit = fit_riesz_sq(&ds, Functional::Ate, &basis, 0.0).unwrap();
        let beta = fit.coefficients();
        assert!((beta[0] - 2.0).abs() < 1e-14);
        assert!((beta[1] + 2.0).abs() < 1e-14);
        assert_eq!(fit.alpha_values(&ds).unwrap(), vec![2.0, -2.0]);
    }

    #[test]
    fn two_point_ridge_solution_and_gaps() {
        let (ds, basis) = two_point();
        let fit = fit_riesz_sq(&ds, Functional::Ate, &basis, 0.5).unwrap();
        let beta = fit.coefficients();
        assert!((beta[0] - 1.0).abs() < 1e-14);
        assert!((beta[1] + 1.0).abs() < 1e-14);
        let alpha = fit.alpha_values(&ds).unwrap();
        let treated_col = Counterfactuals::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let control_col = Counterfactuals::new(vec![1.0, 1.0], vec![0.0, 0.0]);
        let g1 = balancing_gap(Functional::Ate, &ds, &alpha, &treated_col).unwrap();
        let g0 = balancing_gap(Functional::Ate, &ds, &alpha, &control_col).unwrap();
        assert!((g1 + 0.5).abs() < 1e-14);
        assert!((g0 - 0.5).abs() < 1e-14);
    }

    #[test]
    fn zero_right_hand_side_gives_zero_coefficients() {
        let (ds, mut basis) = two_point();
        basis.counterfactual_m.fill(0.0);
        let fit = fit_riesz_sq(&ds, Functional::Ate, &basis, 0.0).unwrap();
        assert!(fit.coefficients().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let ds = Dataset::new(vec![1, 0, 1], DMatrix::zeros(3, 1), vec![0.0; 3]).unwrap();
        // two zero-frequency features are identical constants, plus the intercept
        let map = FeatureMap::from_parts(DMatrix::zeros(2, 1), vec![0.0, 0.0], true).unwrap();
        let basis = eval_balancing_basis(
            &map,
            BalancingScheme::Regressor,
            ds.treatment(),
            ds.covariates(),
            Functional::Ate,
        )
        .unwrap();
        let err = fit_riesz_sq(&ds, Functional::Ate, &basis, 0.0).unwrap_err();
        assert_eq!(
            err.to_string(),
            "rank-deficient basis; increase λ or reduce features"
        );
        assert!(fit_riesz_sq(&ds, Functional::Ate, &basis, 0.1).is_ok());
    }
}
