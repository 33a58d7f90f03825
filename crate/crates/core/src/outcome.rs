//! Ridge outcome regression on random Fourier features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::model::{Counterfactuals, Dataset};
use crate::riesz::solve_spd;

pub const DEFAULT_OUTCOME_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectModel {
    /// Design `[1, ψ(z), d]`.
    ConstantEffect,
    /// Design `[1, ψ(z), d, d·ψ(z)]`.
    InteractedEffect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeConfig {
    pub effect_model: EffectModel,
    pub ridge: f64,
    pub map: FeatureMap,
}

impl OutcomeConfig {
    pub fn new(effect_model: EffectModel, map: FeatureMap) -> Self {
        Self {
            effect_model,
            ridge: DEFAULT_OUTCOME_RIDGE,
            map,
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    fn width(&self) -> usize {
        let m = self.map.m();
        match self.effect_model {
            EffectModel::ConstantEffect => m + 2,
            EffectModel::InteractedEffect => 2 * m + 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeFit {
    pub config: OutcomeConfig,
    /// `[intercept | ψ | d | d·ψ]`, the last block only when interacted.
    pub coefficients: DVector<f64>,
}

fn design_row(
    effect_model: EffectModel,
    d: u8,
    psi: impl Iterator<Item = f64> + Clone,
    m: usize,
    out: &mut [f64],
) {
    out[0] = 1.0;
    let dv = f64::from(d);
    for (k, v) in psi.enumerate() {
        out[1 + k] = v;
        if effect_model == EffectModel::InteractedEffect {
            out[m + 2 + k] = dv * v;
        }
    }
    out[m + 1] = dv;
}

fn design(config: &OutcomeConfig, d: &[u8], rff: &DMatrix<f64>) -> DMatrix<f64> {
    let m = rff.ncols();
    let mut x = DMatrix::zeros(d.len(), config.width());
    let mut row = vec![0.0; config.width()];
    for (i, &di) in d.iter().enumerate() {
        design_row(
            config.effect_model,
            di,
            rff.row(i).iter().copied(),
            m,
            &mut row,
        );
        for (c, v) in row.iter().enumerate() {
            x[(i, c)] = *v;
        }
    }
    x
}

/// Minimizes `(1/n) Σ (Y_i - X_i·θ)² + λ_γ Σ_{j ≥ 1} θ_j²`.
pub fn fit_outcome(dataset: &Dataset, config: &OutcomeConfig) -> Result<OutcomeFit> {
    let rff = config.map.eval_rff(dataset.covariates())?;
    fit_outcome_with_features(dataset, config, &rff)
}

/// As [`fit_outcome`], reusing `ψ(Z)` (no intercept) computed for `dataset`.
pub fn fit_outcome_with_features(
    dataset: &Dataset,
    config: &OutcomeConfig,
    rff: &DMatrix<f64>,
) -> Result<OutcomeFit> {
    if !(config.ridge >= 0.0 && config.ridge.is_finite()) {
        return Err(Error::InvalidInput(
            "outcome ridge must be nonnegative".into(),
        ));
    }
    if rff.nrows() != dataset.n() || rff.ncols() != config.map.m() {
        return Err(Error::InvalidInput(format!(
            "outcome features are {}×{}, expected {}×{}",
            rff.nrows(),
            rff.ncols(),
            dataset.n(),
            config.map.m()
        )));
    }
    let n = dataset.n() as f64;
    let x = design(config, dataset.treatment(), rff);
    let y = DVector::from_column_slice(dataset.outcome());
    let mut system = x.tr_mul(&x) / n;
    for k in 1..system.nrows() {
        system[(k, k)] += config.ridge;
    }
    let rhs = x.tr_mul(&y) / n;
    let coefficients = solve_spd(&system, &rhs).ok_or(Error::SingularOutcomeSystem)?;
    if coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularOutcomeSystem);
    }
    Ok(OutcomeFit {
        config: config.clone(),
        coefficients,
    })
}

impl OutcomeFit {
    fn eval_rff_row(&self, d: u8, psi: &[f64]) -> f64 {
        let m = psi.len();
        let mut row = vec![0.0; self.coefficients.len()];
        design_row(
            self.config.effect_model,
            d,
            psi.iter().copied(),
            m,
            &mut row,
        );
        row.iter()
            .zip(self.coefficients.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// `γ̂(d, z)`.
    pub fn predict(&self, d: u8, z: &[f64]) -> Result<f64> {
        if z.len() != self.config.map.p() {
            return Err(Error::InvalidInput(format!(
                "covariate vector has length {}, expected {}",
                z.len(),
                self.config.map.p()
            )));
        }
        let zm = DMatrix::from_row_slice(1, z.len(), z);
        let psi = self.config.map.eval_rff(&zm)?;
        Ok(self.eval_rff_row(d, psi.as_slice()))
    }

    /// `γ̂(0, z_i)` and `γ̂(1, z_i)` over a sample.
    pub fn counterfactuals(&self, dataset: &Dataset) -> Result<Counterfactuals> {
        let rff = self.config.map.eval_rff(dataset.covariates())?;
        Ok(self.counterfactuals_from_features(&rff))
    }

    /// As [`OutcomeFit::counterfactuals`], from precomputed `ψ(Z)`.
    pub fn counterfactuals_from_features(&self, rff: &DMatrix<f64>) -> Counterfactuals {
        let n = rff.nrows();
        let mut row = vec![0.0; rff.ncols()];
        let mut at0 = Vec::with_capacity(n);
        let mut at1 = Vec::with_capacity(n);
        for i in 0..n {
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = rff[(i, k)];
            }
            at0.push(self.eval_rff_row(0, &row));
            at1.push(self.eval_rff_row(1, &row));
        }
        Counterfactuals::new(at0, at1)
    }
}
