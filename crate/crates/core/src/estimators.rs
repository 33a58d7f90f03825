//! Regression-adjustment, Riesz-weighting and augmented point estimators.
//!
//! Cross-fitted estimates pool per-observation score ingredients (fitted
//! representer, outcome predictions and functional coefficients from each
//! evaluation fold) and then sum once in index order, so the result does not
//! depend on how fold fits are scheduled.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::model::{Counterfactuals, Dataset, Functional, FunctionalWeights};
use crate::outcome::{fit_outcome_with_features, OutcomeConfig, OutcomeFit};
use crate::riesz::{
    fit_riesz_with_features, ImbalanceGaps, ImbalanceReport, RieszConfig, RieszFit,
};
use crate::sum::mean_over;

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeymanTerms {
    pub ne: f64,
    pub noise: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateResult {
    pub theta_ra: f64,
    pub theta_rw: f64,
    pub theta_arw: f64,
    pub imbalance: ImbalanceReport,
    /// Present when the dataset carries an oracle regression.
    pub neyman: Option<NeymanTerms>,
    /// 1 without cross-fitting.
    pub fold_count: usize,
}

/// Per-observation ingredients of the score on an evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInputs {
    pub alpha_vals: Vec<f64>,
    pub gamma_hat: Counterfactuals,
    pub gamma_true: Option<Counterfactuals>,
}

/// Everything needed to fit both nuisances on a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationSpec {
    pub functional: Functional,
    pub riesz: RieszConfig,
    /// Covariate basis of the representer.
    pub riesz_map: FeatureMap,
    pub outcome: OutcomeConfig,
    /// Features over which imbalance is reported.
    pub diagnostic_map: FeatureMap,
}

/// Which rows train the nuisances of each fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainingSet {
    /// All rows outside the fold.
    #[default]
    Complement,
    /// Every row, the fold included.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossFitConfig {
    pub folds: usize,
    pub seed: u64,
    pub training: TrainingSet,
}

impl CrossFitConfig {
    pub fn new(folds: usize, seed: u64) -> Self {
        Self {
            folds,
            seed,
            training: TrainingSet::Complement,
        }
    }
}

/// Combines score ingredients into the three estimates and the diagnostics.
///
/// `weights` holds the functional's row coefficients (per evaluation fold
/// when cross-fitting) and `diag_psi` the diagnostic features of each row.
pub fn estimate_from_scores(
    dataset: &Dataset,
    weights: &FunctionalWeights,
    scores: &ScoreInputs,
    diag_psi: &DMatrix<f64>,
    fold_count: usize,
) -> Result<EstimateResult> {
    let n = dataset.n();
    let d = dataset.treatment();
    let y = dataset.outcome();
    let alpha = &scores.alpha_vals;
    let gamma = &scores.gamma_hat;
    if alpha.len() != n || gamma.len() != n || weights.len() != n || diag_psi.nrows() != n {
        return Err(Error::InvalidInput(
            "score inputs do not match the dataset".into(),
        ));
    }
    if let Some(i) = alpha.iter().position(|a| !a.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "representer is not finite at row {i}"
        )));
    }

    let theta_ra = mean_over((0..n).map(|i| weights.m_at(i, gamma)), n);
    let theta_rw = mean_over((0..n).map(|i| alpha[i] * y[i]), n);
    let theta_arw = mean_over(
        (0..n).map(|i| weights.m_at(i, gamma) + alpha[i] * (y[i] - gamma.at(d[i], i))),
        n,
    );
    let imbalance = ImbalanceGaps::compute(d, alpha, weights, diag_psi).report();
    let neyman = scores.gamma_true.as_ref().map(|truth| {
        let parts = weights.neyman_decomposition(d, y, alpha, gamma, truth);
        NeymanTerms {
            ne: weights.neyman_error(d, y, alpha, gamma, truth),
            noise: parts.noise_term,
            drift: parts.drift_term,
        }
    });
    let result = EstimateResult {
        theta_ra,
        theta_rw,
        theta_arw,
        imbalance,
        neyman,
        fold_count,
    };
    if ![theta_ra, theta_rw, theta_arw]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::InvalidInput(format!(
            "non-finite estimate: {result:?}"
        )));
    }
    Ok(result)
}

/// RA, RW and ARW from fitted nuisances, with imbalance over the representer's
/// own features without the intercept.
pub fn estimate(
    dataset: &Dataset,
    functional: Functional,
    riesz_fit: &RieszFit,
    outcome_fit: &OutcomeFit,
) -> Result<EstimateResult> {
    let diagnostic_map = riesz_fit.map.clone().with_intercept(false);
    estimate_with_diagnostics(dataset, functional, riesz_fit, outcome_fit, &diagnostic_map)
}

pub fn estimate_with_diagnostics(
    dataset: &Dataset,
    functional: Functional,
    riesz_fit: &RieszFit,
    outcome_fit: &OutcomeFit,
    diagnostic_map: &FeatureMap,
) -> Result<EstimateResult> {
    let scores = ScoreInputs {
        alpha_vals: riesz_fit.alpha_values(dataset)?,
        gamma_hat: outcome_fit.counterfactuals(dataset)?,
        gamma_true: dataset.gamma_true().ok(),
    };
    let weights = functional.weights(dataset)?;
    let diag_psi = diagnostic_map.eval_covariate_basis(dataset.covariates())?;
    estimate_from_scores(dataset, &weights, &scores, &diag_psi, 1)
}

/// Fits both nuisances on the full sample and estimates on it.
pub fn fit_and_estimate(dataset: &Dataset, spec: &EstimationSpec) -> Result<EstimateResult> {
    let psi = spec.riesz_map.eval_covariate_basis(dataset.covariates())?;
    let riesz =
        fit_riesz_with_features(dataset, spec.functional, &spec.riesz_map, &psi, &spec.riesz)?;
    let rff = spec.outcome.map.eval_rff(dataset.covariates())?;
    let outcome = fit_outcome_with_features(dataset, &spec.outcome, &rff)?;
    estimate_with_diagnostics(
        dataset,
        spec.functional,
        &riesz,
        &outcome,
        &spec.diagnostic_map,
    )
}

/// Seeded partition of `0..n` into `k` folds, each sorted ascending.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k.max(1) + 1); k];
    for (pos, &i) in order.iter().enumerate() {
        folds[pos % k].push(i);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    folds
}

struct FoldScores {
    alpha: Vec<f64>,
    gamma: Counterfactuals,
    weights: FunctionalWeights,
}

fn fit_fold(
    dataset: &Dataset,
    spec: &EstimationSpec,
    fold: usize,
    eval_idx: &[usize],
    train_idx: &[usize],
) -> Result<FoldScores> {
    let train = dataset.select(train_idx);
    if train.treated_count() == 0 || train.control_count() == 0 {
        return Err(Error::DegenerateFold {
            fold,
            reason: format!(
                "training rows have {} treated and {} control",
                train.treated_count(),
                train.control_count()
            ),
        });
    }
    let eval = dataset.select(eval_idx);
    let weights = spec
        .functional
        .weights(&eval)
        .map_err(|e| Error::DegenerateFold {
            fold,
            reason: e.to_string(),
        })?;

    let train_psi = spec.riesz_map.eval_covariate_basis(train.covariates())?;
    let riesz = fit_riesz_with_features(
        &train,
        spec.functional,
        &spec.riesz_map,
        &train_psi,
        &spec.riesz,
    )?;
    let train_rff = spec.outcome.map.eval_rff(train.covariates())?;
    let outcome = fit_outcome_with_features(&train, &spec.outcome, &train_rff)?;

    Ok(FoldScores {
        alpha: riesz.alpha_values(&eval)?,
        gamma: outcome.counterfactuals(&eval)?,
        weights,
    })
}

/// K-fold cross-fitted estimate. Nuisances for each fold are fitted on its
/// training rows and evaluated on the fold; the ATT share is that of the
/// evaluation fold.
pub fn crossfit_estimate(
    dataset: &Dataset,
    spec: &EstimationSpec,
    crossfit: &CrossFitConfig,
) -> Result<EstimateResult> {
    let n = dataset.n();
    let k = crossfit.folds;
    if k < 2 || k > n {
        return Err(Error::InvalidInput(format!(
            "cross-fitting needs 2 <= K <= n, got K={k} with n={n}"
        )));
    }
    let folds = assign_folds(n, k, crossfit.seed);
    let parts: Vec<FoldScores> = folds
        .par_iter()
        .enumerate()
        .map(|(f, eval_idx)| {
            let train_idx: Vec<usize> = match crossfit.training {
                TrainingSet::Complement => {
                    let mut in_fold = vec![false; n];
                    for &i in eval_idx {
                        in_fold[i] = true;
                    }
                    (0..n).filter(|&i| !in_fold[i]).collect()
                }
                TrainingSet::Full => (0..n).collect(),
            };
            fit_fold(dataset, spec, f, eval_idx, &train_idx)
        })
        .collect::<Result<_>>()?;

    let mut alpha = vec![0.0; n];
    let mut at0 = vec![0.0; n];
    let mut at1 = vec![0.0; n];
    for (idx, part) in folds.iter().zip(&parts) {
        for (r, &i) in idx.iter().enumerate() {
            alpha[i] = part.alpha[r];
            at0[i] = part.gamma.at0[r];
            at1[i] = part.gamma.at1[r];
        }
    }
    let weight_parts: Vec<(&[usize], &FunctionalWeights)> = folds
        .iter()
        .zip(&parts)
        .map(|(idx, part)| (idx.as_slice(), &part.weights))
        .collect();
    let weights = FunctionalWeights::scatter(&weight_parts, n);
    let scores = ScoreInputs {
        alpha_vals: alpha,
        gamma_hat: Counterfactuals::new(at0, at1),
        gamma_true: dataset.gamma_true().ok(),
    };
    let diag_psi = spec
        .diagnostic_map
        .eval_covariate_basis(dataset.covariates())?;
    estimate_from_scores(dataset, &weights, &scores, &diag_psi, k)
}
