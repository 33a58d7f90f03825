//! Observations, target functionals, the balancing gap and the Neyman error.
//!
//! A function of the regressor `x = (d, z)` only ever needs to be known at the
//! sample covariates under both treatment values, so functions are carried
//! around as [`Counterfactuals`]: the pair `(f(0, z_i), f(1, z_i))` per row.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sum::{mean_over, CompensatedSum};

/// Ground-truth quantities available for synthetic and semi-synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub enum Oracle {
    /// `γ0(d, z) = mu0(z) + d·tau(z)`, with the true propensity `e0`.
    Synthetic {
        mu0: Vec<f64>,
        tau: Vec<f64>,
        e0: Vec<f64>,
    },
    /// `γ0(d, z) = (1 - d)·mu0(z) + d·mu1(z)`.
    SemiSynthetic { mu0: Vec<f64>, mu1: Vec<f64> },
}

impl Oracle {
    fn check(&self, n: usize) -> Result<()> {
        let arrays: Vec<(&str, &[f64])> = match self {
            Oracle::Synthetic { mu0, tau, e0 } => vec![("mu0", mu0), ("tau", tau), ("e0", e0)],
            Oracle::SemiSynthetic { mu0, mu1 } => vec![("mu0", mu0), ("mu1", mu1)],
        };
        for (name, values) in arrays {
            if values.len() != n {
                return Err(Error::InvalidInput(format!(
                    "oracle `{name}` has length {}, expected {n}",
                    values.len()
                )));
            }
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "oracle `{name}` is not finite at row {i}"
                )));
            }
        }
        Ok(())
    }

    /// The true regression function evaluated at both arms.
    pub fn regression(&self) -> Counterfactuals {
        match self {
            Oracle::Synthetic { mu0, tau, .. } => Counterfactuals {
                at0: mu0.clone(),
                at1: mu0.iter().zip(tau).map(|(m, t)| m + t).collect(),
            },
            Oracle::SemiSynthetic { mu0, mu1 } => Counterfactuals {
                at0: mu0.clone(),
                at1: mu1.clone(),
            },
        }
    }
}

/// Observations `(D_i, Z_i, Y_i)`, optionally with oracle columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: Vec<u8>,
    z: DMatrix<f64>,
    y: Vec<f64>,
    oracle: Option<Oracle>,
}

impl Dataset {
    pub fn new(d: Vec<u8>, z: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        let n = d.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if z.nrows() != n || y.len() != n {
            return Err(Error::InvalidInput(format!(
                "row counts disagree: d={n}, z={}, y={}",
                z.nrows(),
                y.len()
            )));
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidInput(
                "covariate matrix has no columns".into(),
            ));
        }
        if let Some(i) = d.iter().position(|&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "treatment at row {i} is not 0 or 1"
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "outcome at row {i} is not finite"
            )));
        }
        for i in 0..n {
            if z.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "covariates at row {i} are not finite"
                )));
            }
        }
        Ok(Self {
            d,
            z,
            y,
            oracle: None,
        })
    }

    pub fn with_oracle(mut self, oracle: Oracle) -> Result<Self> {
        oracle.check(self.n())?;
        self.oracle = Some(oracle);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn treatment(&self) -> &[u8] {
        &self.d
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn outcome(&self) -> &[f64] {
        &self.y
    }

    pub fn oracle(&self) -> Option<&Oracle> {
        self.oracle.as_ref()
    }

    pub fn treated_count(&self) -> usize {
        self.d.iter().filter(|&&v| v == 1).count()
    }

    pub fn control_count(&self) -> usize {
        self.n() - self.treated_count()
    }

    /// Sample share of treated units.
    pub fn treated_share(&self) -> f64 {
        self.treated_count() as f64 / self.n() as f64
    }

    /// Fitting needs at least two rows and both arms present.
    pub fn require_both_arms(&self) -> Result<()> {
        if self.n() < 2 || self.treated_count() == 0 || self.control_count() == 0 {
            return Err(Error::InvalidInput(format!(
                "fitting needs both arms: {} treated, {} control",
                self.treated_count(),
                self.control_count()
            )));
        }
        Ok(())
    }

    /// True regression `γ0` at both arms.
    pub fn gamma_true(&self) -> Result<Counterfactuals> {
        self.oracle
            .as_ref()
            .map(Oracle::regression)
            .ok_or(Error::MissingOracle)
    }

    /// Rows `idx`, in the given order, with the oracle carried along.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let z = DMatrix::from_fn(idx.len(), self.p(), |r, c| self.z[(idx[r], c)]);
        let oracle = self.oracle.as_ref().map(|o| match o {
            Oracle::Synthetic { mu0, tau, e0 } => Oracle::Synthetic {
                mu0: pick(mu0),
                tau: pick(tau),
                e0: pick(e0),
            },
            Oracle::SemiSynthetic { mu0, mu1 } => Oracle::SemiSynthetic {
                mu0: pick(mu0),
                mu1: pick(mu1),
            },
        });
        Dataset {
            d: idx.iter().map(|&i| self.d[i]).collect(),
            z,
            y: pick(&self.y),
            oracle,
        }
    }
}

/// A function of `(d, z)` evaluated at every sample covariate under both arms.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactuals {
    pub at0: Vec<f64>,
    pub at1: Vec<f64>,
}

impl Counterfactuals {
    pub fn new(at0: Vec<f64>, at1: Vec<f64>) -> Self {
        assert_eq!(
            at0.len(),
            at1.len(),
            "arm evaluations must have equal length"
        );
        Self { at0, at1 }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n], vec![0.0; n])
    }

    /// Evaluates `f(d, z_i)` for `d ∈ {0, 1}` at every row of `dataset`.
    pub fn from_fn<F: Fn(u8, &[f64]) -> f64>(dataset: &Dataset, f: F) -> Self {
        let z = dataset.covariates();
        let mut row = vec![0.0; z.ncols()];
        let mut at0 = Vec::with_capacity(dataset.n());
        let mut at1 = Vec::with_capacity(dataset.n());
        for i in 0..dataset.n() {
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = z[(i, c)];
            }
            at0.push(f(0, &row));
            at1.push(f(1, &row));
        }
        Self { at0, at1 }
    }

    /// A function of `z` alone.
    pub fn covariate_only(values: Vec<f64>) -> Self {
        Self {
            at0: values.clone(),
            at1: values,
        }
    }

    pub fn len(&self) -> usize {
        self.at0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.at0.is_empty()
    }

    #[inline]
    pub fn at(&self, d: u8, i: usize) -> f64 {
        if d == 1 {
            self.at1[i]
        } else {
            self.at0[i]
        }
    }

    /// `f(D_i, Z_i)` at the observed treatment.
    pub fn observed(&self, d: &[u8]) -> Vec<f64> {
        d.iter()
            .enumerate()
            .map(|(i, &di)| self.at(di, i))
            .collect()
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Counterfactuals, b: f64) -> Counterfactuals {
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| a * u + b * v).collect();
        Counterfactuals {
            at0: mix(&self.at0, &other.at0),
            at1: mix(&self.at1, &other.at1),
        }
    }

    pub fn minus(&self, other: &Counterfactuals) -> Counterfactuals {
        self.combine(1.0, other, -1.0)
    }
}

/// Linear target functional `θ0 = E[m(W; γ0)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Functional {
    /// `m(W; γ) = γ(1, Z) - γ(0, Z)`.
    Ate,
    /// `m(W; γ) = (D / pbar)·γ(0, Z)`, with `pbar` the sample treated share.
    AttMean,
}

impl Functional {
    pub fn name(self) -> &'static str {
        match self {
            Functional::Ate => "ate",
            Functional::AttMean => "att-mean",
        }
    }

    /// Per-row coefficients of `m` on a specific sample.
    pub fn weights(self, dataset: &Dataset) -> Result<FunctionalWeights> {
        FunctionalWeights::for_sample(self, dataset.treatment())
    }
}

/// `m(W_i; f) = on1_i·f(1, z_i) + on0_i·f(0, z_i)` for every row of a sample.
///
/// Under cross-fitting the ATT share is recomputed per evaluation fold, so
/// these coefficients are allowed to differ between rows of a pooled table.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalWeights {
    pub on1: Vec<f64>,
    pub on0: Vec<f64>,
}

impl FunctionalWeights {
    pub fn for_sample(functional: Functional, d: &[u8]) -> Result<Self> {
        let n = d.len();
        match functional {
            Functional::Ate => Ok(Self {
                on1: vec![1.0; n],
                on0: vec![-1.0; n],
            }),
            Functional::AttMean => {
                let treated = d.iter().filter(|&&v| v == 1).count();
                if treated == 0 {
                    return Err(Error::DegenerateFunctional(
                        "ATT mean needs at least one treated unit".into(),
                    ));
                }
                let pbar = treated as f64 / n as f64;
                Ok(Self {
                    on1: vec![0.0; n],
                    on0: d.iter().map(|&di| f64::from(di) / pbar).collect(),
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.on1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.on1.is_empty()
    }

    /// Concatenates per-fold weights into one table, in the given row order.
    pub fn scatter(parts: &[(&[usize], &FunctionalWeights)], n: usize) -> Self {
        let mut on1 = vec![0.0; n];
        let mut on0 = vec![0.0; n];
        for (idx, w) in parts {
            for (k, &i) in idx.iter().enumerate() {
                on1[i] = w.on1[k];
                on0[i] = w.on0[k];
            }
        }
        Self { on1, on0 }
    }

    #[inline]
    pub fn m_at(&self, i: usize, f: &Counterfactuals) -> f64 {
        self.on1[i] * f.at1[i] + self.on0[i] * f.at0[i]
    }

    pub fn apply(&self, f: &Counterfactuals) -> Vec<f64> {
        (0..self.len()).map(|i| self.m_at(i, f)).collect()
    }

    /// `Δ_n(α, f) = (1/n) Σ (α(X_i) f(X_i) - m(W_i; f))`.
    pub fn gap(&self, d: &[u8], alpha: &[f64], f: &Counterfactuals) -> f64 {
        let n = d.len();
        mean_over(
            (0..n).map(|i| alpha[i] * f.at(d[i], i) - self.m_at(i, f)),
            n,
        )
    }

    pub fn neyman_error(
        &self,
        d: &[u8],
        y: &[f64],
        alpha: &[f64],
        gamma_hat: &Counterfactuals,
        gamma_true: &Counterfactuals,
    ) -> f64 {
        let n = d.len();
        mean_over(
            (0..n).map(|i| {
                alpha[i] * (y[i] - gamma_hat.at(d[i], i)) + self.m_at(i, gamma_hat)
                    - self.m_at(i, gamma_true)
            }),
            n,
        )
    }

    pub fn neyman_decomposition(
        &self,
        d: &[u8],
        y: &[f64],
        alpha: &[f64],
        gamma_hat: &Counterfactuals,
        gamma_true: &Counterfactuals,
    ) -> NeymanDecomposition {
        let n = d.len();
        let mut noise = CompensatedSum::new();
        for i in 0..n {
            noise.add(alpha[i] * (y[i] - gamma_true.at(d[i], i)));
        }
        let error = gamma_hat.minus(gamma_true);
        NeymanDecomposition {
            noise_term: noise.total() / n as f64,
            drift_term: self.gap(d, alpha, &error),
        }
    }
}

/// `NE_n = noise_term - drift_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeymanDecomposition {
    /// `(1/n) Σ α̂(X_i) ε_i` with `ε_i = Y_i - γ0(X_i)`.
    pub noise_term: f64,
    /// `Δ_n(α̂, γ̂ - γ0)`.
    pub drift_term: f64,
}

fn check_alpha(dataset: &Dataset, alpha: &[f64]) -> Result<()> {
    if alpha.len() != dataset.n() {
        return Err(Error::InvalidInput(format!(
            "alpha has length {}, expected {}",
            alpha.len(),
            dataset.n()
        )));
    }
    if let Some(i) = alpha.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "alpha is not finite at row {i}"
        )));
    }
    Ok(())
}

fn check_function(dataset: &Dataset, f: &Counterfactuals) -> Result<()> {
    if f.len() != dataset.n() {
        return Err(Error::InvalidInput(format!(
            "function evaluated at {} rows, expected {}",
            f.len(),
            dataset.n()
        )));
    }
    Ok(())
}

/// `m(W_i; f)` for every observation.
pub fn m_of_function(
    functional: Functional,
    dataset: &Dataset,
    f: &Counterfactuals,
) -> Result<Vec<f64>> {
    check_function(dataset, f)?;
    Ok(functional.weights(dataset)?.apply(f))
}

pub fn balancing_gap(
    functional: Functional,
    dataset: &Dataset,
    alpha: &[f64],
    f: &Counterfactuals,
) -> Result<f64> {
    check_alpha(dataset, alpha)?;
    check_function(dataset, f)?;
    Ok(functional
        .weights(dataset)?
        .gap(dataset.treatment(), alpha, f))
}

/// Neyman error of the plug-in score against the oracle regression.
pub fn neyman_error(
    functional: Functional,
    dataset: &Dataset,
    gamma_hat: &Counterfactuals,
    alpha: &[f64],
) -> Result<f64> {
    let gamma_true = dataset.gamma_true()?;
    check_alpha(dataset, alpha)?;
    check_function(dataset, gamma_hat)?;
    Ok(functional.weights(dataset)?.neyman_error(
        dataset.treatment(),
        dataset.outcome(),
        alpha,
        gamma_hat,
        &gamma_true,
    ))
}

pub fn neyman_decomposition(
    functional: Functional,
    dataset: &Dataset,
    gamma_hat: &Counterfactuals,
    alpha: &[f64],
) -> Result<NeymanDecomposition> {
    let gamma_true = dataset.gamma_true()?;
    check_alpha(dataset, alpha)?;
    check_function(dataset, gamma_hat)?;
    Ok(functional.weights(dataset)?.neyman_decomposition(
        dataset.treatment(),
        dataset.outcome(),
        alpha,
        gamma_hat,
        &gamma_true,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(d: Vec<u8>, z: Vec<f64>, y: Vec<f64>) -> Dataset {
        let n = d.len();
        Dataset::new(d, DMatrix::from_vec(n, 1, z), y).unwrap()
    }

    #[test]
    fn ate_of_covariate_function_is_zero() {
        let ds = toy(vec![1, 0, 1], vec![0.3, -1.0, 2.0], vec![0.0; 3]);
        let f = Counterfactuals::from_fn(&ds, |_, z| z[0].sin());
        let m = m_of_function(Functional::Ate, &ds, &f).unwrap();
        assert_eq!(m, vec![0.0; 3]);
    }

    #[test]
    fn ate_of_treatment_indicator_is_one() {
        let ds = toy(vec![1, 0, 0, 1], vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 4]);
        let f = Counterfactuals::from_fn(&ds, |d, _| f64::from(d));
        let m = m_of_function(Functional::Ate, &ds, &f).unwrap();
        assert_eq!(m, vec![1.0; 4]);
    }

    #[test]
    fn att_mean_of_constant() {
        let ds = toy(vec![1, 0], vec![0.0, 1.0], vec![0.0; 2]);
        let f = Counterfactuals::from_fn(&ds, |_, _| 1.0);
        let m = m_of_function(Functional::AttMean, &ds, &f).unwrap();
        assert_eq!(m, vec![2.0, 0.0]);
    }

    #[test]
    fn att_mean_without_treated_is_degenerate() {
        let ds = toy(vec![0, 0], vec![0.0, 1.0], vec![0.0; 2]);
        let f = Counterfactuals::zeros(2);
        let err = m_of_function(Functional::AttMean, &ds, &f).unwrap_err();
        assert!(err.to_string().contains("degenerate functional"));
    }

    #[test]
    fn gap_of_constant_under_symmetric_weights() {
        let ds = toy(vec![1, 0], vec![0.0, 0.0], vec![0.0; 2]);
        let one = Counterfactuals::covariate_only(vec![1.0; 2]);
        let gap = balancing_gap(Functional::Ate, &ds, &[2.0, -2.0], &one).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn gap_of_scalar_covariate() {
        let ds = toy(vec![1, 0, 0], vec![1.0, 2.0, 3.0], vec![0.0; 3]);
        let f = Counterfactuals::from_fn(&ds, |_, z| z[0]);
        let gap = balancing_gap(Functional::Ate, &ds, &[2.0, -2.0, -2.0], &f).unwrap();
        assert!((gap - (-8.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn neyman_requires_oracle() {
        let ds = toy(vec![1, 0], vec![0.0, 1.0], vec![1.0, 2.0]);
        let g = Counterfactuals::zeros(2);
        let err = neyman_error(Functional::Ate, &ds, &g, &[1.0, -1.0]).unwrap_err();
        assert_eq!(err.to_string(), "oracle regression required");
    }

    // d = (1, 0, 1), y = (3, 1, 4), mu0 = (1, 1, 2), tau = (1, 0, 1),
    // γ̂(0, z) = (1.5, 0.5, 2), γ̂(1, z) = (2, 1, 3), α̂ = (2, -1, 1).
    // ε = (1, 0, 1), so noise = (2 + 0 + 1)/3 = 1.
    // γ̂ - γ0 is (0.5, -0.5, 0) at d=0 and 0 at d=1; the gap rows are
    // (0 + 0.5, 0.5 - 0.5, 0) so drift = 1/6.
    // Score rows: (2 + 0.5 - 1, -0.5 + 0.5 - 0, 1 + 1 - 1) = (1.5, 0, 1).
    #[test]
    fn three_point_decomposition_by_hand() {
        let ds = toy(vec![1, 0, 1], vec![0.0, 1.0, 2.0], vec![3.0, 1.0, 4.0])
            .with_oracle(Oracle::Synthetic {
                mu0: vec![1.0, 1.0, 2.0],
                tau: vec![1.0, 0.0, 1.0],
                e0: vec![0.5; 3],
            })
            .unwrap();
        let g = Counterfactuals::new(vec![1.5, 0.5, 2.0], vec![2.0, 1.0, 3.0]);
        let alpha = [2.0, -1.0, 1.0];
        let dec = neyman_decomposition(Functional::Ate, &ds, &g, &alpha).unwrap();
        assert!((dec.noise_term - 1.0).abs() < 1e-15);
        assert!((dec.drift_term - 1.0 / 6.0).abs() < 1e-15);
        let ne = neyman_error(Functional::Ate, &ds, &g, &alpha).unwrap();
        assert!((ne - 2.5 / 3.0).abs() < 1e-15);
        assert!((ne - (dec.noise_term - dec.drift_term)).abs() < 1e-15);
    }

    #[test]
    fn exact_regression_leaves_weighted_noise() {
        let ds = toy(vec![1, 0, 0], vec![0.0, 1.0, 2.0], vec![1.2, 0.7, -0.1])
            .with_oracle(Oracle::SemiSynthetic {
                mu0: vec![0.5, 0.5, 0.0],
                mu1: vec![1.0, 2.0, 3.0],
            })
            .unwrap();
        let g0 = ds.gamma_true().unwrap();
        let alpha = [1.5, -0.5, 2.0];
        let ne = neyman_error(Functional::Ate, &ds, &g0, &alpha).unwrap();
        let expected = (1.5 * 0.2 + -0.5 * 0.2 + 2.0 * -0.1) / 3.0;
        assert!((ne - expected).abs() < 1e-15);
        let dec = neyman_decomposition(Functional::Ate, &ds, &g0, &alpha).unwrap();
        assert_eq!(dec.drift_term, 0.0);
    }

    #[test]
    fn zero_weights_leave_regression_drift() {
        let ds = toy(vec![1, 0, 1], vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 2.0])
            .with_oracle(Oracle::SemiSynthetic {
                mu0: vec![0.0, 0.0, 1.0],
                mu1: vec![1.0, 2.0, 2.0],
            })
            .unwrap();
        let g = Counterfactuals::new(vec![0.5, 0.1, 1.0], vec![1.0, 1.1, 3.0]);
        let ne = neyman_error(Functional::Ate, &ds, &g, &[0.0; 3]).unwrap();
        // m(γ̂) = (0.5, 1.0, 2.0), m(γ0) = (1, 2, 1)
        assert!((ne - (-0.5 - 1.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_outcome_has_zero_noise_term() {
        let ds = toy(vec![1, 0], vec![0.0, 1.0], vec![2.0, 0.5])
            .with_oracle(Oracle::SemiSynthetic {
                mu0: vec![1.0, 0.5],
                mu1: vec![2.0, 3.0],
            })
            .unwrap();
        let g = Counterfactuals::zeros(2);
        let dec = neyman_decomposition(Functional::Ate, &ds, &g, &[3.0, -7.0]).unwrap();
        assert_eq!(dec.noise_term, 0.0);
    }

    #[test]
    fn rejects_nonbinary_treatment() {
        let err = Dataset::new(vec![1, 2], DMatrix::zeros(2, 1), vec![0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("not 0 or 1"));
    }

    #[test]
    fn rejects_short_oracle() {
        let ds = toy(vec![1, 0], vec![0.0, 1.0], vec![0.0, 0.0]);
        let err = ds
            .with_oracle(Oracle::SemiSynthetic {
                mu0: vec![0.0],
                mu1: vec![0.0, 1.0],
            })
            .unwrap_err();
        assert!(err.to_string().contains("mu0"));
    }

    type Instance = (Vec<u8>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

    fn random_instance() -> impl Strategy<Value = Instance> {
        (2usize..30).prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..2, n),
                prop::collection::vec(-3.0..3.0f64, n),
                prop::collection::vec(-3.0..3.0f64, n),
                prop::collection::vec(-3.0..3.0f64, n),
                prop::collection::vec(-3.0..3.0f64, n),
                prop::collection::vec(-3.0..3.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn gap_is_linear_in_the_function(
            (d, z, alpha, f0, g0, g1) in random_instance(),
            a in -5.0..5.0f64,
            b in -5.0..5.0f64,
        ) {
            let n = d.len();
            let ds = Dataset::new(d, DMatrix::from_vec(n, 1, z), vec![0.0; n]).unwrap();
            let f = Counterfactuals::new(f0.clone(), f0.iter().map(|v| v * 0.5 - 1.0).collect());
            let g = Counterfactuals::new(g0, g1);
            let lhs = balancing_gap(Functional::Ate, &ds, &alpha, &f.combine(a, &g, b)).unwrap();
            let rhs = a * balancing_gap(Functional::Ate, &ds, &alpha, &f).unwrap()
                + b * balancing_gap(Functional::Ate, &ds, &alpha, &g).unwrap();
            let scale = 1.0 + lhs.abs().max(rhs.abs()) + 10.0 * (a.abs() + b.abs());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn covariate_gap_is_plain_weighted_mean((d, z, alpha, h, _, _) in random_instance()) {
            let n = d.len();
            let ds = Dataset::new(d, DMatrix::from_vec(n, 1, z), vec![0.0; n]).unwrap();
            let f = Counterfactuals::covariate_only(h.clone());
            let gap = balancing_gap(Functional::Ate, &ds, &alpha, &f).unwrap();
            let direct = crate::sum::mean_over(alpha.iter().zip(&h).map(|(a, v)| a * v), n);
            prop_assert_eq!(gap, direct);
        }

        #[test]
        fn att_gap_of_constant_is_mean_weight_minus_one((d, z, alpha, _, _, _) in random_instance()) {
            prop_assume!(d.contains(&1));
            let n = d.len();
            let ds = Dataset::new(d, DMatrix::from_vec(n, 1, z), vec![0.0; n]).unwrap();
            let one = Counterfactuals::covariate_only(vec![1.0; n]);
            let gap = balancing_gap(Functional::AttMean, &ds, &alpha, &one).unwrap();
            let expected = crate::sum::mean(&alpha) - 1.0;
            prop_assert!((gap - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }

        #[test]
        fn neyman_identity_holds((d, z, alpha, y, h0, h1) in random_instance(), att in any::<bool>()) {
            prop_assume!(!att || d.contains(&1));
            let n = d.len();
            let mu0: Vec<f64> = z.iter().map(|v| v.cos()).collect();
            let mu1: Vec<f64> = z.iter().map(|v| v * 0.7).collect();
            let ds = Dataset::new(d, DMatrix::from_vec(n, 1, z), y)
                .unwrap()
                .with_oracle(Oracle::SemiSynthetic { mu0, mu1 })
                .unwrap();
            let functional = if att { Functional::AttMean } else { Functional::Ate };
            let g = Counterfactuals::new(h0, h1);
            let ne = neyman_error(functional, &ds, &g, &alpha).unwrap();
            let dec = neyman_decomposition(functional, &ds, &g, &alpha).unwrap();
            let scale = 1.0_f64.max(ne.abs()).max(dec.noise_term.abs()).max(dec.drift_term.abs());
            prop_assert!((ne - (dec.noise_term - dec.drift_term)).abs() <= 1e-12 * scale);
        }
    }
}
