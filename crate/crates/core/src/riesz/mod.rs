//! Riesz regression: empirical risk minimization for the Riesz representer.
//!
//! Every loss here uses a canonical link, so the first-order condition of the
//! fit is a balancing equation for each basis column:
//! `Δ_n(α̂, Φ_j) = -λ·β̂_j`. At `λ = 0` the fitted representer balances its
//! basis exactly.

mod generalized;
mod imbalance;
mod solver;
mod sq;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::{randomized_ate_representer, BalancingScheme, BasisLayout, FeatureMap};
use crate::model::{Dataset, Functional};

pub use generalized::{fit_riesz_generalized, ArmLink, SignedLink};
pub use imbalance::{imbalance_report, ImbalanceGaps, ImbalanceReport};
pub use solver::{minimize, ConvexObjective, SolverOptions, SolverTrace};
pub use sq::fit_riesz_sq;
pub(crate) use sq::solve_spd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Loss {
    /// Squared loss, identity link.
    Sq,
    /// Unnormalized KL, exponential link.
    Ukl,
    /// Logistic-odds link, `w = e^f / (1 - e^f)`.
    Bp,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::Sq => "sq",
            Loss::Ukl => "ukl",
            Loss::Bp => "bp",
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Loss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sq" => Ok(Loss::Sq),
            "ukl" => Ok(Loss::Ukl),
            "bp" => Ok(Loss::Bp),
            other => Err(format!("unknown loss `{other}` (expected sq, ukl or bp)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    /// Cholesky solve of the normal equations; squared loss only.
    ClosedForm,
    /// Damped Newton with Armijo backtracking.
    ConvexIterative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RieszConfig {
    pub loss: Loss,
    /// Ridge weight on `‖β‖²`.
    pub lambda: f64,
    pub scheme: BalancingScheme,
    pub solver: Solver,
    /// Gradient ∞-norm tolerance for the iterative solver.
    pub tol: f64,
    pub max_iter: usize,
}

impl RieszConfig {
    /// Squared loss with the closed-form solver for SQ and the iterative
    /// solver otherwise.
    pub fn new(loss: Loss, lambda: f64, scheme: BalancingScheme) -> Self {
        Self {
            loss,
            lambda,
            scheme,
            solver: if loss == Loss::Sq {
                Solver::ClosedForm
            } else {
                Solver::ConvexIterative
            },
            tol: 1e-9,
            max_iter: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput("lambda must be nonnegative".into()));
        }
        if self.loss != Loss::Sq && self.solver == Solver::ClosedForm {
            return Err(Error::InvalidInput(format!(
                "{} loss has no closed form; use the iterative solver",
                self.loss
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_iter == 0 {
            return Err(Error::InvalidInput(
                "solver tolerance and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

/// Parametric form of a fitted representer.
#[derive(Debug, Clone, PartialEq)]
pub enum RieszModel {
    /// `α(d, z) = offset(d) + Φ(d, z)·β` (squared loss).
    Linear {
        layout: BasisLayout,
        coefficients: DVector<f64>,
    },
    /// Positive weights fitted separately per arm and signed on combination:
    /// ATE `α = d·w₁(z) - (1-d)·w₀(z)`, ATT mean `α = (1-d)·w₀(z)`.
    PerArm {
        link: ArmLink,
        treated: Option<DVector<f64>>,
        control: DVector<f64>,
        /// Largest linear predictor seen on each arm's training rows, indexed
        /// by `d`; predictors are capped there before the link is applied.
        /// Unbounded for the exponential link.
        ceiling: [f64; 2],
    },
    /// One coefficient vector over a `z`-only basis with a treatment-signed
    /// positive link; its first-order condition is signed covariate balance.
    SignedShared {
        link: SignedLink,
        coefficients: DVector<f64>,
    },
}

/// Convergence record of one iterative fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitTrace {
    pub iterations: usize,
    pub grad_norm: f64,
}

/// A fitted Riesz representer, evaluable at any `(d, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RieszFit {
    pub config: RieszConfig,
    pub functional: Functional,
    pub map: FeatureMap,
    pub model: RieszModel,
    pub traces: Vec<FitTrace>,
}

impl RieszFit {
    /// All coefficients, treated block first where there are two.
    pub fn coefficients(&self) -> DVector<f64> {
        match &self.model {
            RieszModel::Linear { coefficients, .. }
            | RieszModel::SignedShared { coefficients, .. } => coefficients.clone(),
            RieszModel::PerArm {
                treated, control, ..
            } => match treated {
                Some(t) => {
                    let mut all = DVector::zeros(t.len() + control.len());
                    all.rows_mut(0, t.len()).copy_from(t);
                    all.rows_mut(t.len(), control.len()).copy_from(control);
                    all
                }
                None => control.clone(),
            },
        }
    }

    /// `α̂(d, z)` given the covariate features `ψ(z)` of that row.
    pub fn evaluate_features(&self, d: u8, psi: &[f64]) -> Result<f64> {
        let dot = |beta: &DVector<f64>, off: usize| -> f64 {
            psi.iter()
                .zip(beta.rows(off, psi.len()).iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let value = match &self.model {
            RieszModel::Linear {
                layout,
                coefficients,
            } => match layout {
                BasisLayout::Interacted => {
                    if d == 1 {
                        dot(coefficients, 0)
                    } else {
                        dot(coefficients, psi.len())
                    }
                }
                BasisLayout::CenteredCovariate => {
                    randomized_ate_representer(d) + dot(coefficients, 0)
                }
                BasisLayout::ControlArm => {
                    if d == 1 {
                        0.0
                    } else {
                        dot(coefficients, 0)
                    }
                }
            },
            RieszModel::PerArm {
                link,
                treated,
                control,
                ceiling,
            } => match (d, treated) {
                (1, Some(beta)) => link.weight(dot(beta, 0).min(ceiling[1]))?,
                (1, None) => 0.0,
                _ => {
                    let w = link.weight(dot(control, 0).min(ceiling[0]))?;
                    if treated.is_some() {
                        -w
                    } else {
                        w
                    }
                }
            },
            RieszModel::SignedShared { link, coefficients } => {
                link.representer(d, dot(coefficients, 0))
            }
        };
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "fitted representer is not finite at d={d}"
            )));
        }
        Ok(value)
    }

    /// `α̂(X_i)` at the observed treatments, given `ψ(Z)` for the sample.
    pub fn alpha_from_features(&self, d: &[u8], psi: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut row = vec![0.0; psi.ncols()];
        d.iter()
            .enumerate()
            .map(|(i, &di)| {
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot = psi[(i, c)];
                }
                self.evaluate_features(di, &row)
            })
            .collect()
    }

    /// `α̂(X_i)` at every observation of `dataset`.
    pub fn alpha_values(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let psi = self.map.eval_covariate_basis(dataset.covariates())?;
        self.alpha_from_features(dataset.treatment(), &psi)
    }
}

/// Fits the representer with the solver the configuration names.
pub fn fit_riesz(
    dataset: &Dataset,
    functional: Functional,
    map: &FeatureMap,
    config: &RieszConfig,
) -> Result<RieszFit> {
    let psi = map.eval_covariate_basis(dataset.covariates())?;
    fit_riesz_with_features(dataset, functional, map, &psi, config)
}

/// As [`fit_riesz`], reusing covariate features already computed for `dataset`.
pub fn fit_riesz_with_features(
    dataset: &Dataset,
    functional: Functional,
    map: &FeatureMap,
    psi: &DMatrix<f64>,
    config: &RieszConfig,
) -> Result<RieszFit> {
    config.validate()?;
    dataset.require_both_arms()?;
    match (config.loss, config.solver) {
        (Loss::Sq, Solver::ClosedForm) => {
            let basis = crate::features::BalancingBasis::from_features(
                map,
                psi,
                config.scheme,
                dataset.treatment(),
                functional,
            )?;
            let mut fit = fit_riesz_sq(dataset, functional, &basis, config.lambda)?;
            fit.config = *config;
            Ok(fit)
        }
        _ => generalized::fit_with_features(dataset, functional, map, psi, config),
    }
}
