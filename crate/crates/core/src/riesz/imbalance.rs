use nalgebra::DMatrix;

use super::RieszFit;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::model::{Dataset, Functional, FunctionalWeights};
use crate::sum::mean_over;

/// Balancing gaps of a representer over a diagnostic feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceGaps {
    /// `Δ_n(α, ψ_j)` for the `z`-only functions.
    pub covariate: Vec<f64>,
    /// `Δ_n(α, d·ψ_j)` for every `j`, then `Δ_n(α, (1-d)·ψ_j)`.
    pub regressor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceReport {
    pub covariate_rms: f64,
    pub covariate_max: f64,
    pub regressor_rms: f64,
    pub regressor_max: f64,
}

fn rms(gaps: &[f64]) -> f64 {
    if gaps.is_empty() {
        return 0.0;
    }
    mean_over(gaps.iter().map(|g| g * g), gaps.len()).sqrt()
}

fn max_abs(gaps: &[f64]) -> f64 {
    gaps.iter().fold(0.0, |acc: f64, g| acc.max(g.abs()))
}

impl ImbalanceGaps {
    /// Gaps on a sample given `α` at the observed treatments, the functional's
    /// row coefficients and the diagnostic features `ψ(Z)`.
    pub fn compute(
        d: &[u8],
        alpha: &[f64],
        weights: &FunctionalWeights,
        psi: &DMatrix<f64>,
    ) -> Self {
        let n = d.len();
        let q = psi.ncols();
        let mut covariate = Vec::with_capacity(q);
        let mut treated = Vec::with_capacity(q);
        let mut control = Vec::with_capacity(q);
        for j in 0..q {
            let col = psi.column(j);
            covariate.push(mean_over(
                (0..n).map(|i| (alpha[i] - weights.on1[i] - weights.on0[i]) * col[i]),
                n,
            ));
            treated.push(mean_over(
                (0..n).map(|i| (alpha[i] * f64::from(d[i]) - weights.on1[i]) * col[i]),
                n,
            ));
            control.push(mean_over(
                (0..n).map(|i| (alpha[i] * f64::from(1 - d[i]) - weights.on0[i]) * col[i]),
                n,
            ));
        }
        treated.extend(control);
        Self {
            covariate,
            regressor: treated,
        }
    }

    pub fn report(&self) -> ImbalanceReport {
        ImbalanceReport {
            covariate_rms: rms(&self.covariate),
            covariate_max: max_abs(&self.covariate),
            regressor_rms: rms(&self.regressor),
            regressor_max: max_abs(&self.regressor),
        }
    }
}

/// Covariate and regressor imbalance of `fit` on `dataset`, measured over the
/// features of `diagnostic_map`.
pub fn imbalance_report(
    fit: &RieszFit,
    dataset: &Dataset,
    functional: Functional,
    diagnostic_map: &FeatureMap,
) -> Result<ImbalanceReport> {
    if functional != fit.functional {
        return Err(Error::InvalidInput(format!(
            "representer was fitted for {}, not {}",
            fit.functional.name(),
            functional.name()
        )));
    }
    let alpha = fit.alpha_values(dataset)?;
    let weights = functional.weights(dataset)?;
    let psi = diagnostic_map.eval_covariate_basis(dataset.covariates())?;
    Ok(ImbalanceGaps::compute(dataset.treatment(), &alpha, &weights, &psi).report())
}
