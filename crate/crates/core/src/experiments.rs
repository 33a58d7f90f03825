//! Synthetic design with a heterogeneous effect and the Monte Carlo harness.
//!
//! Replications run in parallel on the current rayon pool; every random draw
//! of replication `r` comes from a seed derived from `(master_seed, r)`, and
//! results are reduced in replication order, so a report depends only on its
//! configuration.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::data_io::SemiSyntheticReplication;
use crate::error::{Error, Result};
use crate::estimators::{
    crossfit_estimate, estimate_from_scores, CrossFitConfig, EstimateResult, EstimationSpec,
    ScoreInputs,
};
use crate::features::{make_feature_map, BalancingScheme, FeatureMap};
use crate::model::{Dataset, Functional, Oracle};
use crate::outcome::{
    fit_outcome_with_features, EffectModel, OutcomeConfig, DEFAULT_OUTCOME_RIDGE,
};
use crate::riesz::{fit_riesz_with_features, Loss, RieszConfig};
use crate::sum::mean_over;

#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub n: usize,
    pub p: usize,
    pub m_features: usize,
    pub noise_sd: f64,
    /// Logit of `e0` is `c0·z1 + c1·z2 + c2·sin(z3)`.
    pub propensity: [f64; 3],
    pub bandwidth: f64,
    pub feature_seed: u64,
    pub coefficient_seed: u64,
    /// Standard deviation of the entries of `β0` and `β_τ`.
    pub coefficient_sd: f64,
    /// Multiplies `β_τ`; zero gives a null effect.
    pub effect_scale: f64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n: 1200,
            p: 3,
            m_features: 80,
            noise_sd: 0.05,
            propensity: [0.5, -0.4, 0.2],
            bandwidth: 1.0,
            feature_seed: 8_675_309,
            coefficient_seed: 1_234_567,
            coefficient_sd: 1.0,
            effect_scale: 1.0,
        }
    }
}

impl DgpSpec {
    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidInput(format!(
                "n must be at least 2, got {}",
                self.n
            )));
        }
        if self.p != 3 {
            return Err(Error::InvalidInput(format!(
                "the synthetic design has 3 covariates, got p={}",
                self.p
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidInput("noise_sd must be nonnegative".into()));
        }
        if !(self.coefficient_sd >= 0.0 && self.coefficient_sd.is_finite()) {
            return Err(Error::InvalidInput(
                "coefficient_sd must be nonnegative".into(),
            ));
        }
        if !self.effect_scale.is_finite() || self.propensity.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(
                "design coefficients must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The design with its feature map and frozen coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Dgp {
    pub spec: DgpSpec,
    /// Shared by `μ0`, `τ` and the fitted bases; no intercept.
    pub map: FeatureMap,
    pub beta0: DVector<f64>,
    pub beta_tau: DVector<f64>,
}

/// One draw from the design.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub dataset: Dataset,
    /// `(1/n) Σ τ(Z_i)`.
    pub sample_ate: f64,
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        spec.validate()?;
        let map = make_feature_map(spec.p, spec.m_features, spec.bandwidth, spec.feature_seed)?
            .with_intercept(false);
        let m = spec.m_features;
        let scale = spec.coefficient_sd;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.coefficient_seed);
        let mut draw = || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        };
        let beta0 = DVector::from_fn(m, |_, _| draw());
        let beta_tau = DVector::from_fn(m, |_, _| draw()) * spec.effect_scale;
        Ok(Self {
            spec,
            map,
            beta0,
            beta_tau,
        })
    }

    pub fn propensity(&self, z: &[f64]) -> f64 {
        let c = self.spec.propensity;
        expit(c[0] * z[0] + c[1] * z[1] + c[2] * z[2].sin())
    }

    /// Draws `Z`, then `D`, then the noise, all from `rep_seed`.
    pub fn simulate(&self, rep_seed: u64) -> Result<SimulatedSample> {
        let n = self.spec.n;
        let p = self.spec.p;
        let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
        let zs: Vec<f64> = (0..n * p)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let z = DMatrix::from_row_slice(n, p, &zs);
        let e0: Vec<f64> = (0..n)
            .map(|i| self.propensity(&zs[i * p..(i + 1) * p]))
            .collect();
        let d: Vec<u8> = e0
            .iter()
            .map(|&e| u8::from(rng.random::<f64>() < e))
            .collect();
        let noise = Normal::new(0.0, self.spec.noise_sd).expect("nonnegative sd");
        let eps: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();

        let psi = self.map.eval_rff(&z)?;
        let mu0: Vec<f64> = (&psi * &self.beta0).iter().copied().collect();
        let tau: Vec<f64> = (&psi * &self.beta_tau).iter().copied().collect();
        let y = (0..n)
            .map(|i| mu0[i] + f64::from(d[i]) * tau[i] + eps[i])
            .collect();
        let sample_ate = mean_over(tau.iter().copied(), n);
        let dataset = Dataset::new(d, z, y)?.with_oracle(Oracle::Synthetic { mu0, tau, e0 })?;
        Ok(SimulatedSample {
            dataset,
            sample_ate,
        })
    }
}

pub fn simulate_dataset(spec: &DgpSpec, rep_seed: u64) -> Result<SimulatedSample> {
    Dgp::new(spec.clone())?.simulate(rep_seed)
}

/// True ATE representer `D/e0 - (1-D)/(1-e0)` of a synthetic sample.
pub fn true_ate_representer(dataset: &Dataset) -> Result<Vec<f64>> {
    match dataset.oracle() {
        Some(Oracle::Synthetic { e0, .. }) => Ok(dataset
            .treatment()
            .iter()
            .zip(e0)
            .map(|(&d, &e)| if d == 1 { 1.0 / e } else { -1.0 / (1.0 - e) })
            .collect()),
        _ => Err(Error::MissingOracle),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of replication `rep`; independent of how many replications run.
pub fn replication_seed(master_seed: u64, rep: usize) -> u64 {
    splitmix64(splitmix64(master_seed) ^ rep as u64)
}

fn fold_seed(rep_seed: u64) -> u64 {
    splitmix64(rep_seed ^ 0x5EED_F01D)
}

/// One cell of a results table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub scheme: BalancingScheme,
    pub loss: Loss,
    pub lambda: f64,
    /// Number of folds; `None` without cross-fitting.
    pub crossfit: Option<usize>,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scheme={} loss={} lambda={} crossfit={}",
            self.scheme.name(),
            self.loss,
            self.lambda,
            self.crossfit.map_or("none".to_string(), |k| k.to_string())
        )
    }
}

/// Fitting settings shared by every cell of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub functional: Functional,
    pub loss: Loss,
    pub schemes: Vec<BalancingScheme>,
    pub lambdas: Vec<f64>,
    /// One entry per fitting mode; `None` is no cross-fitting.
    pub crossfit: Vec<Option<usize>>,
    pub effect_model: EffectModel,
    pub outcome_ridge: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            functional: Functional::Ate,
            loss: Loss::Sq,
            schemes: vec![BalancingScheme::Covariate, BalancingScheme::Regressor],
            lambdas: vec![0.0, 0.01, 0.1],
            crossfit: vec![None],
            effect_model: EffectModel::ConstantEffect,
            outcome_ridge: DEFAULT_OUTCOME_RIDGE,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.lambdas.is_empty() || self.crossfit.is_empty() {
            return Err(Error::InvalidInput(
                "at least one scheme, lambda and fitting mode required".into(),
            ));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidInput("lambda must be nonnegative".into()));
        }
        if self.crossfit.iter().flatten().any(|&k| k < 2) {
            return Err(Error::InvalidInput(
                "cross-fitting needs at least 2 folds".into(),
            ));
        }
        if !(self.outcome_ridge >= 0.0 && self.outcome_ridge.is_finite()) {
            return Err(Error::InvalidInput(
                "outcome ridge must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Cells in table order: fitting mode, then scheme, then `λ`.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &crossfit in &self.crossfit {
            for &scheme in &self.schemes {
                for &lambda in &self.lambdas {
                    cells.push(CellKey {
                        scheme,
                        loss: self.loss,
                        lambda,
                        crossfit,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub reps: usize,
    pub master_seed: u64,
    pub dgp: DgpSpec,
    pub fit: FitSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            reps: 100,
            master_seed: 0,
            dgp: DgpSpec::default(),
            fit: FitSettings::default(),
        }
    }
}

/// Estimates of one replication in one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicationRow {
    pub rep: usize,
    pub cell: usize,
    pub theta0: f64,
    pub result: EstimateResult,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub key: CellKey,
    pub reps: usize,
    pub rmse_ra: f64,
    pub rmse_rw: f64,
    pub rmse_arw: f64,
    pub bias_ra: f64,
    pub bias_rw: f64,
    pub bias_arw: f64,
    /// Mean over replications of the covariate RMS imbalance.
    pub cov_imbalance: f64,
    /// Mean over replications of the regressor RMS imbalance.
    pub reg_imbalance: f64,
    /// Mean `|NE_n|` when the oracle is known.
    pub mean_abs_ne: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregateReport {
    pub cells: Vec<CellSummary>,
    /// Ordered by replication, then cell.
    pub replications: Vec<ReplicationRow>,
}

impl AggregateReport {
    pub fn cell(&self, key: &CellKey) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.key == *key)
    }

    pub fn rows_for(&self, cell: usize) -> impl Iterator<Item = &ReplicationRow> {
        self.replications.iter().filter(move |r| r.cell == cell)
    }
}

/// Estimates every cell on one replication's sample.
///
/// `map` is the covariate feature map without intercept; the representer is
/// fitted on it with an intercept and imbalance is measured on it as is. The
/// outcome regression and features are shared by all cells without
/// cross-fitting.
pub fn evaluate_replication(
    rep: usize,
    rep_seed: u64,
    dataset: &Dataset,
    theta0: f64,
    map: &FeatureMap,
    settings: &FitSettings,
) -> Result<Vec<ReplicationRow>> {
    let cells = settings.cells();
    let riesz_map = map.clone().with_intercept(true);
    let diagnostic_map = map.clone().with_intercept(false);
    let outcome_config = OutcomeConfig::new(settings.effect_model, diagnostic_map.clone())
        .with_ridge(settings.outcome_ridge);
    let functional = settings.functional;
    let wrap = |cell: usize, e: Error| Error::Cell {
        rep,
        cell: cells[cell].to_string(),
        source: Box::new(e),
    };

    let plain_needed = cells.iter().any(|c| c.crossfit.is_none());
    let shared = if plain_needed {
        let psi = riesz_map.eval_covariate_basis(dataset.covariates())?;
        let rff = diagnostic_map.eval_rff(dataset.covariates())?;
        let first_plain = cells.iter().position(|c| c.crossfit.is_none()).unwrap_or(0);
        let outcome = fit_outcome_with_features(dataset, &outcome_config, &rff)
            .map_err(|e| wrap(first_plain, e))?;
        let gamma = outcome.counterfactuals_from_features(&rff);
        let weights = functional.weights(dataset)?;
        Some((psi, rff, gamma, weights))
    } else {
        None
    };

    let mut rows = Vec::with_capacity(cells.len());
    for (c, key) in cells.iter().enumerate() {
        let riesz = RieszConfig::new(key.loss, key.lambda, key.scheme);
        let result = match (key.crossfit, &shared) {
            (None, Some((psi, rff, gamma, weights))) => {
                let fit = fit_riesz_with_features(dataset, functional, &riesz_map, psi, &riesz)
                    .map_err(|e| wrap(c, e))?;
                let scores = ScoreInputs {
                    alpha_vals: fit
                        .alpha_from_features(dataset.treatment(), psi)
                        .map_err(|e| wrap(c, e))?,
                    gamma_hat: gamma.clone(),
                    gamma_true: dataset.gamma_true().ok(),
                };
                estimate_from_scores(dataset, weights, &scores, rff, 1).map_err(|e| wrap(c, e))?
            }
            (Some(k), _) => {
                let spec = EstimationSpec {
                    functional,
                    riesz,
                    riesz_map: riesz_map.clone(),
                    outcome: outcome_config.clone(),
                    diagnostic_map: diagnostic_map.clone(),
                };
                crossfit_estimate(dataset, &spec, &CrossFitConfig::new(k, fold_seed(rep_seed)))
                    .map_err(|e| wrap(c, e))?
            }
            (None, None) => unreachable!("shared fits exist whenever a plain cell does"),
        };
        rows.push(ReplicationRow {
            rep,
            cell: c,
            theta0,
            result,
        });
    }
    Ok(rows)
}

/// Runs `job` for every replication on the current rayon pool and returns
/// the rows in replication order, or the error of the first failing
/// replication.
pub fn run_replications<F>(reps: usize, job: F) -> Result<Vec<ReplicationRow>>
where
    F: Fn(usize) -> Result<Vec<ReplicationRow>> + Sync + Send,
{
    let outcomes: Vec<Result<Vec<ReplicationRow>>> = (0..reps).into_par_iter().map(&job).collect();
    let mut rows = Vec::new();
    for outcome in outcomes {
        rows.extend(outcome?);
    }
    Ok(rows)
}

fn rmse(rows: &[&ReplicationRow], pick: impl Fn(&EstimateResult) -> f64) -> f64 {
    mean_over(
        rows.iter().map(|r| {
            let e = pick(&r.result) - r.theta0;
            e * e
        }),
        rows.len(),
    )
    .sqrt()
}

fn bias(rows: &[&ReplicationRow], pick: impl Fn(&EstimateResult) -> f64) -> f64 {
    mean_over(rows.iter().map(|r| pick(&r.result) - r.theta0), rows.len())
}

/// Summarizes per-replication rows into one line per cell.
pub fn aggregate(cells: &[CellKey], replications: Vec<ReplicationRow>) -> AggregateReport {
    let summaries = cells
        .iter()
        .enumerate()
        .map(|(c, key)| {
            let rows: Vec<&ReplicationRow> = replications.iter().filter(|r| r.cell == c).collect();
            let k = rows.len();
            let mean_abs_ne = if k > 0 && rows.iter().all(|r| r.result.neyman.is_some()) {
                Some(mean_over(
                    rows.iter()
                        .map(|r| r.result.neyman.map_or(0.0, |t| t.ne.abs())),
                    k,
                ))
            } else {
                None
            };
            CellSummary {
                key: *key,
                reps: k,
                rmse_ra: rmse(&rows, |r| r.theta_ra),
                rmse_rw: rmse(&rows, |r| r.theta_rw),
                rmse_arw: rmse(&rows, |r| r.theta_arw),
                bias_ra: bias(&rows, |r| r.theta_ra),
                bias_rw: bias(&rows, |r| r.theta_rw),
                bias_arw: bias(&rows, |r| r.theta_arw),
                cov_imbalance: mean_over(rows.iter().map(|r| r.result.imbalance.covariate_rms), k),
                reg_imbalance: mean_over(rows.iter().map(|r| r.result.imbalance.regressor_rms), k),
                mean_abs_ne,
            }
        })
        .collect();
    AggregateReport {
        cells: summaries,
        replications,
    }
}

/// Simulates `reps` replications of the synthetic design and estimates every
/// cell on each. The target of replication `r` is its sample ATE.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<AggregateReport> {
    if config.reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    config.fit.validate()?;
    if config.fit.functional != Functional::Ate {
        return Err(Error::InvalidInput(
            "the synthetic study targets the ATE".into(),
        ));
    }
    let dgp = Dgp::new(config.dgp.clone())?;
    let rows = run_replications(config.reps, |rep| {
        let seed = replication_seed(config.master_seed, rep);
        let sample = dgp.simulate(seed)?;
        evaluate_replication(
            rep,
            seed,
            &sample.dataset,
            sample.sample_ate,
            &dgp.map,
            &config.fit,
        )
    })?;
    Ok(aggregate(&config.fit.cells(), rows))
}

/// Settings of a study on loaded replications with known truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SemisynthConfig {
    pub master_seed: u64,
    pub m_features: usize,
    pub bandwidth: f64,
    pub fit: FitSettings,
}

impl Default for SemisynthConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            m_features: 80,
            bandwidth: 2.0,
            fit: FitSettings {
                lambdas: vec![0.01],
                ..FitSettings::default()
            },
        }
    }
}

/// Estimates every cell on each replication against its true ATE. One
/// feature map, drawn from the master seed, serves all replications.
pub fn run_semisynthetic(
    replications: &[SemiSyntheticReplication],
    config: &SemisynthConfig,
) -> Result<AggregateReport> {
    config.fit.validate()?;
    let Some(first) = replications.first() else {
        return Err(Error::InvalidInput("no replications to evaluate".into()));
    };
    let p = first.dataset.p();
    if replications.iter().any(|r| r.dataset.p() != p) {
        return Err(Error::InvalidInput(
            "replications differ in covariate count".into(),
        ));
    }
    let map = make_feature_map(
        p,
        config.m_features,
        config.bandwidth,
        splitmix64(config.master_seed),
    )?
    .with_intercept(false);
    let rows = run_replications(replications.len(), |r| {
        let seed = replication_seed(config.master_seed, r);
        let rep = &replications[r];
        evaluate_replication(r, seed, &rep.dataset, rep.true_ate, &map, &config.fit)
    })?;
    Ok(aggregate(&config.fit.cells(), rows))
}
