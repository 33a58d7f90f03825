//! Random Fourier features for a Gaussian kernel and the balancing bases
//! built from them.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Functional;

/// Frozen feature map `ψ_k(z) = sqrt(2/m)·cos(ω_k·z + b_k)` with
/// `ω_k ~ N(0, I/σ²)` and `b_k ~ U[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    p: usize,
    bandwidth: f64,
    /// `m × p`.
    frequencies: DMatrix<f64>,
    offsets: Vec<f64>,
    include_intercept: bool,
    seed: u64,
}

/// Draws a feature map. Maps drawn with equal arguments are identical.
/// The leading intercept column is on; see [`FeatureMap::with_intercept`].
pub fn make_feature_map(p: usize, m: usize, bandwidth: f64, seed: u64) -> Result<FeatureMap> {
    if p == 0 || m == 0 {
        return Err(Error::InvalidInput(format!(
            "feature map needs p >= 1 and m >= 1 (got p={p}, m={m})"
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / bandwidth).expect("positive scale");
    // row-major draw order so the map does not depend on storage layout
    let mut freq = vec![0.0; m * p];
    for v in freq.iter_mut() {
        *v = normal.sample(&mut rng);
    }
    let frequencies = DMatrix::from_row_slice(m, p, &freq);
    let offsets = (0..m).map(|_| rng.random_range(0.0..TAU)).collect();
    Ok(FeatureMap {
        p,
        bandwidth,
        frequencies,
        offsets,
        include_intercept: true,
        seed,
    })
}

impl FeatureMap {
    /// Builds a map from explicit frequencies (`m × p`) and offsets.
    /// `m = 0` is allowed and, with the intercept on, gives the constant basis.
    pub fn from_parts(
        frequencies: DMatrix<f64>,
        offsets: Vec<f64>,
        include_intercept: bool,
    ) -> Result<Self> {
        if frequencies.nrows() != offsets.len() {
            return Err(Error::InvalidInput(format!(
                "{} frequency rows but {} offsets",
                frequencies.nrows(),
                offsets.len()
            )));
        }
        if frequencies.ncols() == 0 {
            return Err(Error::InvalidInput("feature map needs p >= 1".into()));
        }
        if frequencies.nrows() == 0 && !include_intercept {
            return Err(Error::InvalidInput(
                "feature map would have no columns".into(),
            ));
        }
        Ok(Self {
            p: frequencies.ncols(),
            bandwidth: f64::NAN,
            frequencies,
            offsets,
            include_intercept,
            seed: 0,
        })
    }

    pub fn with_intercept(mut self, include_intercept: bool) -> Self {
        self.include_intercept = include_intercept;
        self
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of random features `m`.
    pub fn m(&self) -> usize {
        self.offsets.len()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn include_intercept(&self) -> bool {
        self.include_intercept
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Columns of the covariate basis: `m`, plus one with the intercept.
    pub fn q(&self) -> usize {
        self.m() + usize::from(self.include_intercept)
    }

    fn check_dims(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.ncols() != self.p {
            return Err(Error::InvalidInput(format!(
                "covariates have {} columns, feature map expects {}",
                z.ncols(),
                self.p
            )));
        }
        Ok(())
    }

    /// The `m` random features at every row (no intercept).
    pub fn eval_rff(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(z)?;
        let m = self.m();
        let scale = (2.0 / m as f64).sqrt();
        let proj = z * self.frequencies.transpose();
        Ok(DMatrix::from_fn(z.nrows(), m, |i, k| {
            scale * (proj[(i, k)] + self.offsets[k]).cos()
        }))
    }

    /// `[1 | ψ_1(z) .. ψ_m(z)]`, the intercept present when enabled.
    pub fn eval_covariate_basis(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rff = self.eval_rff(z)?;
        if !self.include_intercept {
            return Ok(rff);
        }
        let mut out = DMatrix::from_element(z.nrows(), self.q(), 1.0);
        out.columns_mut(1, self.m()).copy_from(&rff);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BalancingScheme {
    /// Balance functions of `z` only.
    Covariate,
    /// Balance treatment-specific functions `(d·ψ(z), (1-d)·ψ(z))`.
    Regressor,
}

impl BalancingScheme {
    pub fn name(self) -> &'static str {
        match self {
            BalancingScheme::Covariate => "covariate",
            BalancingScheme::Regressor => "regressor",
        }
    }
}

/// How the representer is laid out over a covariate basis `ψ(z)` of width `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisLayout {
    /// `α(d, z) = d·ψ(z)·β_1 + (1-d)·ψ(z)·β_0`, coefficients `[β_1 | β_0]`.
    Interacted,
    /// `α(d, z) = 2(2d - 1) + ψ(z)·β`.
    CenteredCovariate,
    /// `α(d, z) = (1-d)·ψ(z)·β`.
    ControlArm,
}

impl BasisLayout {
    pub fn resolve(scheme: BalancingScheme, functional: Functional) -> Self {
        match (scheme, functional) {
            (BalancingScheme::Regressor, Functional::Ate) => BasisLayout::Interacted,
            (BalancingScheme::Covariate, Functional::Ate) => BasisLayout::CenteredCovariate,
            (_, Functional::AttMean) => BasisLayout::ControlArm,
        }
    }

    pub fn width(self, q: usize) -> usize {
        match self {
            BasisLayout::Interacted => 2 * q,
            BasisLayout::CenteredCovariate | BasisLayout::ControlArm => q,
        }
    }
}

/// Randomized-assignment ATE representer (`e = 1/2`), used as the offset of
/// the centered covariate model.
#[inline]
pub fn randomized_ate_representer(d: u8) -> f64 {
    if d == 1 {
        2.0
    } else {
        -2.0
    }
}

/// Basis columns `Φ(X_i)`, their images `m(W_i; Φ_j)` and the fixed offset of
/// the representer model, for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingBasis {
    pub columns: DMatrix<f64>,
    pub counterfactual_m: DMatrix<f64>,
    pub offset_vals: Vec<f64>,
    pub scheme: BalancingScheme,
    pub functional: Functional,
    pub layout: BasisLayout,
    pub map: FeatureMap,
}

impl BalancingBasis {
    pub fn n(&self) -> usize {
        self.columns.nrows()
    }

    pub fn width(&self) -> usize {
        self.columns.ncols()
    }

    /// Builds the basis from precomputed covariate features `psi` (`n × q`).
    pub fn from_features(
        map: &FeatureMap,
        psi: &DMatrix<f64>,
        scheme: BalancingScheme,
        d: &[u8],
        functional: Functional,
    ) -> Result<Self> {
        let n = d.len();
        if psi.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "{} feature rows for {n} observations",
                psi.nrows()
            )));
        }
        let q = psi.ncols();
        let layout = BasisLayout::resolve(scheme, functional);
        let width = layout.width(q);
        let mut columns = DMatrix::zeros(n, width);
        let mut cm = DMatrix::zeros(n, width);
        let mut offset_vals = vec![0.0; n];
        match layout {
            BasisLayout::Interacted => {
                for i in 0..n {
                    let treated = d[i] == 1;
                    for j in 0..q {
                        let v = psi[(i, j)];
                        if treated {
                            columns[(i, j)] = v;
                        } else {
                            columns[(i, q + j)] = v;
                        }
                        cm[(i, j)] = v;
                        cm[(i, q + j)] = -v;
                    }
                }
            }
            BasisLayout::CenteredCovariate => {
                columns.copy_from(psi);
                for (i, o) in offset_vals.iter_mut().enumerate() {
                    *o = randomized_ate_representer(d[i]);
                }
            }
            BasisLayout::ControlArm => {
                let treated = d.iter().filter(|&&v| v == 1).count();
                if treated == 0 {
                    return Err(Error::DegenerateFunctional(
                        "ATT mean needs at least one treated unit".into(),
                    ));
                }
                let pbar = treated as f64 / n as f64;
                for i in 0..n {
                    for j in 0..q {
                        let v = psi[(i, j)];
                        if d[i] == 0 {
                            columns[(i, j)] = v;
                        } else {
                            cm[(i, j)] = v / pbar;
                        }
                    }
                }
            }
        }
        Ok(Self {
            columns,
            counterfactual_m: cm,
            offset_vals,
            scheme,
            functional,
            layout,
            map: map.clone(),
        })
    }
}

pub fn eval_balancing_basis(
    map: &FeatureMap,
    scheme: BalancingScheme,
    d: &[u8],
    z: &DMatrix<f64>,
    functional: Functional,
) -> Result<BalancingBasis> {
    if z.nrows() != d.len() {
        return Err(Error::InvalidInput(format!(
            "{} covariate rows for {} treatments",
            z.nrows(),
            d.len()
        )));
    }
    let psi = map.eval_covariate_basis(z)?;
    BalancingBasis::from_features(map, &psi, scheme, d, functional)
}
