//! UKL and BP Riesz regression, and the iterative squared-loss path.
//!
//! Each loss is a canonical-link Bregman construction: for a link value
//! `f = β·Ψ(z)` the per-row loss `h(f)` has `h'(f) = w`, the representer
//! weight. The gradient of the empirical risk is therefore
//! `(1/n) Σ w_i Ψ_i - (1/n) Σ t_i + λβ`, and a stationary point balances `Ψ`
//! against its counterfactual target up to the ridge term.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};

use super::solver::{minimize, ConvexObjective};
use super::{FitTrace, Loss, RieszConfig, RieszFit, RieszModel};
use crate::error::{Error, Result};
use crate::features::{BalancingBasis, BalancingScheme, FeatureMap};
use crate::model::{Dataset, Functional};
use crate::sum::CompensatedSum;

/// Positive per-arm weight as a function of the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmLink {
    /// `w = e^f` (UKL).
    Exp,
    /// `w = e^g / (1 - e^g)` with `g = f - ln 2` and domain `g < 0` (BP).
    /// The shift puts `β = 0` at `w = 1`, inside the domain.
    LogisticOdds,
}

impl ArmLink {
    fn for_loss(loss: Loss) -> Self {
        match loss {
            Loss::Ukl => ArmLink::Exp,
            _ => ArmLink::LogisticOdds,
        }
    }

    fn shifted(self, f: f64) -> f64 {
        match self {
            ArmLink::Exp => f,
            ArmLink::LogisticOdds => f - LN_2,
        }
    }

    /// Loss integrand `h(f)`; `+∞` outside the domain.
    fn integrand(self, f: f64) -> f64 {
        let g = self.shifted(f);
        match self {
            ArmLink::Exp => g.exp(),
            ArmLink::LogisticOdds => {
                if g < 0.0 {
                    -(-g.exp()).ln_1p()
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `(h'(f), h''(f))`.
    fn derivatives(self, f: f64) -> (f64, f64) {
        let g = self.shifted(f);
        match self {
            ArmLink::Exp => {
                let e = g.exp();
                (e, e)
            }
            ArmLink::LogisticOdds => {
                let e = g.exp();
                let q = 1.0 - e;
                (e / q, e / (q * q))
            }
        }
    }

    pub fn weight(self, f: f64) -> Result<f64> {
        let g = self.shifted(f);
        match self {
            ArmLink::Exp => Ok(g.exp()),
            ArmLink::LogisticOdds => {
                if g < 0.0 {
                    let e = g.exp();
                    Ok(e / (1.0 - e))
                } else {
                    Err(Error::InvalidInput(format!(
                        "BP weight evaluated outside its domain (link value {g:.3e} >= 0)"
                    )))
                }
            }
        }
    }
}

/// Treatment-signed link over a shared `z`-only predictor. At `f = 0` both
/// reduce to the randomized-assignment representer `±2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignedLink {
    /// `α = 2d·e^f - 2(1-d)·e^{-f}` (UKL).
    Exp,
    /// `α = d·(1 + e^f) - (1-d)·(1 + e^{-f})` (BP); the inverse-propensity
    /// form with a logistic propensity.
    LogisticOdds,
}

impl SignedLink {
    fn for_loss(loss: Loss) -> Self {
        match loss {
            Loss::Ukl => SignedLink::Exp,
            _ => SignedLink::LogisticOdds,
        }
    }

    pub fn representer(self, d: u8, f: f64) -> f64 {
        match (self, d) {
            (SignedLink::Exp, 1) => 2.0 * f.exp(),
            (SignedLink::Exp, _) => -2.0 * (-f).exp(),
            (SignedLink::LogisticOdds, 1) => 1.0 + f.exp(),
            (SignedLink::LogisticOdds, _) => -(1.0 + (-f).exp()),
        }
    }

    /// Row loss whose derivative in `f` is the representer.
    fn row_loss(self, d: u8, f: f64) -> f64 {
        match (self, d) {
            (SignedLink::Exp, 1) => 2.0 * f.exp(),
            (SignedLink::Exp, _) => 2.0 * (-f).exp(),
            (SignedLink::LogisticOdds, 1) => f.exp() + f,
            (SignedLink::LogisticOdds, _) => (-f).exp() - f,
        }
    }

    fn curvature(self, d: u8, f: f64) -> f64 {
        match (self, d) {
            (SignedLink::Exp, 1) => 2.0 * f.exp(),
            (SignedLink::Exp, _) => 2.0 * (-f).exp(),
            (SignedLink::LogisticOdds, 1) => f.exp(),
            (SignedLink::LogisticOdds, _) => (-f).exp(),
        }
    }
}

fn ridge_value(beta: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * lambda * beta.norm_squared()
}

fn add_ridge(grad: &mut DVector<f64>, hess: &mut DMatrix<f64>, beta: &DVector<f64>, lambda: f64) {
    if lambda > 0.0 {
        grad.axpy(lambda, beta, 1.0);
        for k in 0..hess.nrows() {
            hess[(k, k)] += lambda;
        }
    }
}

/// `(1/n) Σ_{i ∈ arm} h(β·Ψ_i) - β·t̄ + (λ/2)‖β‖²`.
struct ArmObjective {
    psi: DMatrix<f64>,
    n_total: f64,
    target: DVector<f64>,
    lambda: f64,
    link: ArmLink,
}

impl ConvexObjective for ArmObjective {
    fn dim(&self) -> usize {
        self.psi.ncols()
    }

    fn value(&self, beta: &DVector<f64>) -> f64 {
        let f = &self.psi * beta;
        let mut acc = CompensatedSum::new();
        for &fi in f.iter() {
            let h = self.link.integrand(fi);
            if !h.is_finite() {
                return f64::INFINITY;
            }
            acc.add(h);
        }
        acc.total() / self.n_total - beta.dot(&self.target) + ridge_value(beta, self.lambda)
    }

    fn gradient_hessian(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let f = &self.psi * beta;
        let (w, curv): (Vec<f64>, Vec<f64>) = f.iter().map(|&fi| self.link.derivatives(fi)).unzip();
        let w = DVector::from_vec(w);
        let mut grad = self.psi.tr_mul(&w) / self.n_total - &self.target;
        let mut scaled = self.psi.clone();
        for (i, c) in curv.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*c);
        }
        let mut hess = self.psi.tr_mul(&scaled) / self.n_total;
        add_ridge(&mut grad, &mut hess, beta, self.lambda);
        (grad, hess)
    }
}

/// `(1/n) Σ ℓ_{d_i}(β·Ψ_i) + (λ/2)‖β‖²` with `∂ℓ/∂f = α`.
struct SignedObjective {
    psi: DMatrix<f64>,
    d: Vec<u8>,
    lambda: f64,
    link: SignedLink,
}

impl ConvexObjective for SignedObjective {
    fn dim(&self) -> usize {
        self.psi.ncols()
    }

    fn value(&self, beta: &DVector<f64>) -> f64 {
        let f = &self.psi * beta;
        let mut acc = CompensatedSum::new();
        for (i, &fi) in f.iter().enumerate() {
            acc.add(self.link.row_loss(self.d[i], fi));
        }
        acc.total() / self.d.len() as f64 + ridge_value(beta, self.lambda)
    }

    fn gradient_hessian(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.d.len() as f64;
        let f = &self.psi * beta;
        let alpha = DVector::from_fn(f.len(), |i, _| self.link.representer(self.d[i], f[i]));
        let mut grad = self.psi.tr_mul(&alpha) / n;
        let mut scaled = self.psi.clone();
        for i in 0..f.len() {
            scaled
                .row_mut(i)
                .scale_mut(self.link.curvature(self.d[i], f[i]));
        }
        let mut hess = self.psi.tr_mul(&scaled) / n;
        add_ridge(&mut grad, &mut hess, beta, self.lambda);
        (grad, hess)
    }
}

/// Squared loss on a linear representer with offset:
/// `(1/n) Σ (o_i + Φ_i·β)²/2 - β·b̄ + (λ/2)‖β‖²`.
struct LinearSqObjective<'a> {
    basis: &'a BalancingBasis,
    offsets: DVector<f64>,
    target: DVector<f64>,
    lambda: f64,
}

impl ConvexObjective for LinearSqObjective<'_> {
    fn dim(&self) -> usize {
        self.basis.width()
    }

    fn value(&self, beta: &DVector<f64>) -> f64 {
        let a = &self.offsets + &self.basis.columns * beta;
        let mut acc = CompensatedSum::new();
        for v in a.iter() {
            acc.add(0.5 * v * v);
        }
        acc.total() / self.basis.n() as f64 - beta.dot(&self.target)
            + ridge_value(beta, self.lambda)
    }

    fn gradient_hessian(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.basis.n() as f64;
        let phi = &self.basis.columns;
        let a = &self.offsets + phi * beta;
        let mut grad = phi.tr_mul(&a) / n - &self.target;
        let mut hess = phi.tr_mul(phi) / n;
        add_ridge(&mut grad, &mut hess, beta, self.lambda);
        (grad, hess)
    }
}

fn rows_where(psi: &DMatrix<f64>, d: &[u8], arm: u8) -> DMatrix<f64> {
    let idx: Vec<usize> = (0..d.len()).filter(|&i| d[i] == arm).collect();
    DMatrix::from_fn(idx.len(), psi.ncols(), |r, c| psi[(idx[r], c)])
}

fn weighted_column_means(psi: &DMatrix<f64>, weight: impl Fn(usize) -> f64) -> DVector<f64> {
    let n = psi.nrows();
    DVector::from_fn(psi.ncols(), |j, _| {
        let mut acc = CompensatedSum::new();
        for i in 0..n {
            acc.add(weight(i) * psi[(i, j)]);
        }
        acc.total() / n as f64
    })
}

fn fit_arm(
    psi: &DMatrix<f64>,
    d: &[u8],
    arm: u8,
    target: DVector<f64>,
    config: &RieszConfig,
) -> Result<(DVector<f64>, FitTrace, f64)> {
    let link = ArmLink::for_loss(config.loss);
    let objective = ArmObjective {
        psi: rows_where(psi, d, arm),
        n_total: d.len() as f64,
        target,
        lambda: config.lambda,
        link,
    };
    let trace = minimize(
        &objective,
        DVector::zeros(psi.ncols()),
        config.solver_options(),
    )?;
    let ceiling = match link {
        ArmLink::Exp => f64::INFINITY,
        ArmLink::LogisticOdds => (&objective.psi * &trace.beta).max(),
    };
    Ok((
        trace.beta,
        FitTrace {
            iterations: trace.iterations,
            grad_norm: trace.grad_norm,
        },
        ceiling,
    ))
}

pub(crate) fn fit_with_features(
    dataset: &Dataset,
    functional: Functional,
    map: &FeatureMap,
    psi: &DMatrix<f64>,
    config: &RieszConfig,
) -> Result<RieszFit> {
    let d = dataset.treatment();
    let opts = config.solver_options();
    let (model, traces) = match (config.loss, functional, config.scheme) {
        (Loss::Sq, _, _) => {
            let basis = BalancingBasis::from_features(map, psi, config.scheme, d, functional)?;
            let n = basis.n() as f64;
            let objective = LinearSqObjective {
                offsets: DVector::from_column_slice(&basis.offset_vals),
                target: DVector::from_fn(basis.width(), |j, _| {
                    basis.counterfactual_m.column(j).sum() / n
                }),
                lambda: config.lambda,
                basis: &basis,
            };
            let trace = minimize(&objective, DVector::zeros(basis.width()), opts)?;
            (
                RieszModel::Linear {
                    layout: basis.layout,
                    coefficients: trace.beta,
                },
                vec![FitTrace {
                    iterations: trace.iterations,
                    grad_norm: trace.grad_norm,
                }],
            )
        }
        (_, Functional::Ate, BalancingScheme::Regressor) => {
            let target = weighted_column_means(psi, |_| 1.0);
            let (treated, t1, c1) = fit_arm(psi, d, 1, target.clone(), config)?;
            let (control, t0, c0) = fit_arm(psi, d, 0, target, config)?;
            (
                RieszModel::PerArm {
                    link: ArmLink::for_loss(config.loss),
                    treated: Some(treated),
                    control,
                    ceiling: [c0, c1],
                },
                vec![t1, t0],
            )
        }
        (_, Functional::Ate, BalancingScheme::Covariate) => {
            let objective = SignedObjective {
                psi: psi.clone(),
                d: d.to_vec(),
                lambda: config.lambda,
                link: SignedLink::for_loss(config.loss),
            };
            let trace = minimize(&objective, DVector::zeros(psi.ncols()), opts)?;
            (
                RieszModel::SignedShared {
                    link: SignedLink::for_loss(config.loss),
                    coefficients: trace.beta,
                },
                vec![FitTrace {
                    iterations: trace.iterations,
                    grad_norm: trace.grad_norm,
                }],
            )
        }
        (_, Functional::AttMean, _) => {
            let pbar = dataset.treated_share();
            if dataset.treated_count() == 0 {
                return Err(Error::DegenerateFunctional(
                    "ATT mean needs at least one treated unit".into(),
                ));
            }
            let target = weighted_column_means(psi, |i| f64::from(d[i]) / pbar);
            let (control, t0, c0) = fit_arm(psi, d, 0, target, config)?;
            (
                RieszModel::PerArm {
                    link: ArmLink::for_loss(config.loss),
                    treated: None,
                    control,
                    ceiling: [c0, f64::INFINITY],
                },
                vec![t0],
            )
        }
    };
    Ok(RieszFit {
        config: *config,
        functional,
        map: map.clone(),
        model,
        traces,
    })
}

/// UKL or BP Riesz regression on the covariate basis of `map`.
///
/// Under the regressor scheme (and always for the ATT mean) each arm gets its
/// own positive weight function balancing `Ψ` against the arm's
/// counterfactual target. Under the covariate scheme for the ATE a single
/// coefficient vector drives a treatment-signed link and the fit balances
/// `Ψ` between the weighted arms.
pub fn fit_riesz_generalized(
    dataset: &Dataset,
    functional: Functional,
    map: &FeatureMap,
    config: &RieszConfig,
) -> Result<RieszFit> {
    if config.loss == Loss::Sq {
        return Err(Error::InvalidInput(
            "generalized Riesz regression takes the UKL or BP loss".into(),
        ));
    }
    config.validate()?;
    dataset.require_both_arms()?;
    let psi = map.eval_covariate_basis(dataset.covariates())?;
    fit_with_features(dataset, functional, map, &psi, config)
}
