//! Conjugate-Gaussian updates and closed-form information gain.
//!
//! Every station (or network) enters the inference as a 6×6 precision
//! summary `H = GᵀΣε⁻¹G`, optionally paired with `b = GᵀΣε⁻¹y`. Because the
//! noise of distinct stations is independent, the summary of a network is the
//! sum of its stations' summaries.

use std::ops::{Add, AddAssign};

use nalgebra::{Cholesky, Matrix3, Matrix6, Vector6, U6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry accepted before a matrix is symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// The reference source used throughout the experiments.
pub const TRUE_MT: [f64; 6] = [0.269, 0.700, -0.969, -0.454, -0.195, 0.0592];

/// Default prior standard deviation per moment-tensor component.
pub const DEFAULT_SIGMA_P: f64 = 0.5;

/// Independent components of a symmetric moment tensor, ordered
/// `(M11, M22, M33, M12, M13, M23)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct MomentTensor(Vector6<f64>);

impl MomentTensor {
    pub fn new(components: [f64; 6]) -> Result<Self> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("moment tensor components must be finite".into()));
        }
        Ok(Self(Vector6::from(components)))
    }

    /// Unit vector along component `q` (0-based).
    pub fn basis(q: usize) -> Self {
        let mut v = Vector6::zeros();
        v[q] = 1.0;
        Self(v)
    }

    pub fn reference() -> Self {
        Self(Vector6::from(TRUE_MT))
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    /// Full symmetric 3×3 tensor; off-diagonal components populate both
    /// mirrored entries.
    pub fn to_tensor(&self) -> Matrix3<f64> {
        let m = &self.0;
        Matrix3::new(
            m[0], m[3], m[4], //
            m[3], m[1], m[5], //
            m[4], m[5], m[2],
        )
    }
}

impl TryFrom<[f64; 6]> for MomentTensor {
    type Error = Error;

    fn try_from(value: [f64; 6]) -> Result<Self> {
        Self::new(value)
    }
}

impl From<MomentTensor> for [f64; 6] {
    fn from(mt: MomentTensor) -> Self {
        mt.0.into()
    }
}

/// A Gaussian over the six moment-tensor components.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: Vector6<f64>,
    cov: Matrix6<f64>,
}

impl GaussianBelief {
    /// Validates finiteness, symmetry and positive definiteness. The stored
    /// covariance is exactly symmetric.
    pub fn new(mean: Vector6<f64>, cov: Matrix6<f64>) -> Result<Self> {
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("belief mean must be finite".into()));
        }
        let cov = checked_symmetric(&cov).ok_or(Error::NonSpdPrior)?;
        if Cholesky::new(cov).is_none() {
            return Err(Error::NonSpdPrior);
        }
        Ok(Self { mean, cov })
    }

    /// Zero-mean isotropic prior `N(0, σ²I₆)`.
    pub fn isotropic(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::NonSpdPrior);
        }
        Ok(Self {
            mean: Vector6::zeros(),
            cov: Matrix6::identity() * (sigma * sigma),
        })
    }

    pub fn mean(&self) -> &Vector6<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix6<f64> {
        &self.cov
    }

    /// Marginal standard deviations.
    pub fn marginal_sd(&self) -> Vector6<f64> {
        self.cov.diagonal().map(f64::sqrt)
    }

    /// Same covariance, mean reset to zero.
    pub fn centered(&self) -> Self {
        Self {
            mean: Vector6::zeros(),
            cov: self.cov,
        }
    }
}

/// Information contributed by one station or a network: `H = GᵀΣε⁻¹G` and,
/// once data are available, `b = GᵀΣε⁻¹y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionSummary {
    pub h: Matrix6<f64>,
    pub b: Option<Vector6<f64>>,
}

impl PrecisionSummary {
    pub fn zero() -> Self {
        Self {
            h: Matrix6::zeros(),
            b: None,
        }
    }

    pub fn from_h(h: Matrix6<f64>) -> Self {
        Self { h, b: None }
    }

    pub fn with_data(h: Matrix6<f64>, b: Vector6<f64>) -> Self {
        Self { h, b: Some(b) }
    }

    /// Multiplies every noise variance by `c`, i.e. divides the summary by `c`.
    pub fn scale_noise_variance(&self, c: f64) -> Self {
        Self {
            h: self.h / c,
            b: self.b.map(|b| b / c),
        }
    }
}

impl Add for PrecisionSummary {
    type Output = PrecisionSummary;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for PrecisionSummary {
    fn add_assign(&mut self, rhs: Self) {
        self.h += rhs.h;
        self.b = match (self.b, rhs.b) {
            (Some(a), Some(b)) => Some(a + b),
            (Some(a), None) | (None, Some(a)) => Some(a),
            (None, None) => None,
        };
    }
}

impl<'a> std::iter::Sum<&'a PrecisionSummary> for PrecisionSummary {
    fn sum<I: Iterator<Item = &'a PrecisionSummary>>(iter: I) -> Self {
        iter.fold(PrecisionSummary::zero(), |acc, s| acc + s.clone())
    }
}

/// Returns `(A + Aᵀ)/2` when the relative asymmetry of `a` is within
/// [`SYMMETRY_TOL`] and every entry is finite.
pub fn checked_symmetric(a: &Matrix6<f64>) -> Option<Matrix6<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return None;
    }
    Some(symmetrize(a))
}

pub fn symmetrize(a: &Matrix6<f64>) -> Matrix6<f64> {
    (a + a.transpose()) * 0.5
}

fn cholesky(a: &Matrix6<f64>) -> Option<Cholesky<f64, U6>> {
    Cholesky::new(checked_symmetric(a)?)
}

/// `log det` of an SPD matrix through its Cholesky factor.
pub fn logdet_spd(a: &Matrix6<f64>) -> Result<f64> {
    let chol = cholesky(a).ok_or_else(|| Error::NumericalBreakdown("logdet of non-SPD".into()))?;
    Ok(chol_logdet(&chol))
}

fn chol_logdet(chol: &Cholesky<f64, U6>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Posterior covariance `(H + Σ_pr⁻¹)⁻¹` from a prior covariance.
pub fn posterior_cov(prior_cov: &Matrix6<f64>, h: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let prior_precision = cholesky(prior_cov).ok_or(Error::NonSpdPrior)?.inverse();
    let post_precision = symmetrize(&(h + prior_precision));
    let chol = Cholesky::new(post_precision)
        .ok_or_else(|| Error::NumericalBreakdown("posterior precision is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Conjugate update of `prior` with the information in `summary`. A missing
/// `b` is treated as zero data.
pub fn posterior_update(prior: &GaussianBelief, summary: &PrecisionSummary) -> Result<GaussianBelief> {
    let prior_precision = cholesky(&prior.cov).ok_or(Error::NonSpdPrior)?.inverse();
    let post_precision = symmetrize(&(summary.h + prior_precision));
    let chol = Cholesky::new(post_precision)
        .ok_or_else(|| Error::NumericalBreakdown("posterior precision is not positive definite".into()))?;
    let rhs = prior_precision * prior.mean + summary.b.unwrap_or_else(Vector6::zeros);
    let mean = chol.solve(&rhs);
    let cov = symmetrize(&chol.inverse());
    if Cholesky::new(cov).is_none() {
        return Err(Error::NumericalBreakdown(
            "posterior covariance lost positive definiteness".into(),
        ));
    }
    Ok(GaussianBelief { mean, cov })
}

/// Expected information gain `½ logdet(HΣ_pr + I)`, evaluated as
/// `½ logdet(LᵀHL + I)` with `Σ_pr = LLᵀ`.
pub fn eig(h: &Matrix6<f64>, prior_cov: &Matrix6<f64>) -> Result<f64> {
    let l = cholesky(prior_cov).ok_or(Error::NonSpdPrior)?.unpack();
    eig_with_factor(h, &l)
}

/// [`eig`] with a precomputed lower Cholesky factor of the prior covariance.
pub fn eig_with_factor(h: &Matrix6<f64>, prior_factor: &Matrix6<f64>) -> Result<f64> {
    let whitened = symmetrize(&(prior_factor.transpose() * h * prior_factor)) + Matrix6::identity();
    let chol = Cholesky::new(whitened).ok_or_else(|| Error::NumericalBreakdown("EIG Cholesky failed".into()))?;
    Ok((0.5 * chol_logdet(&chol)).max(0.0))
}

/// EIG of a network with block-diagonal noise: the summaries add.
pub fn eig_network(stations: &[PrecisionSummary], prior_cov: &Matrix6<f64>) -> Result<f64> {
    if stations.is_empty() {
        return Err(Error::EmptyNetwork);
    }
    let h = stations.iter().fold(Matrix6::zeros(), |acc, s| acc + s.h);
    eig(&h, prior_cov)
}

/// `KL(p ‖ q)` between two Gaussians.
pub fn kl_gaussian(p: &GaussianBelief, q: &GaussianBelief) -> Result<f64> {
    let chol_p = cholesky(&p.cov).ok_or(Error::NonSpdPrior)?;
    let chol_q = cholesky(&q.cov).ok_or(Error::NonSpdPrior)?;
    let trace = chol_q.solve(&p.cov).trace();
    let diff = q.mean - p.mean;
    let maha = diff.dot(&chol_q.solve(&diff));
    let kl = 0.5 * (trace + maha - 6.0 + chol_logdet(&chol_q) - chol_logdet(&chol_p));
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spd(seed: u64) -> Matrix6<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + Matrix6::identity() * 0.1
    }

    #[test]
    fn zero_information_leaves_prior_untouched() {
        let prior = GaussianBelief::new(Vector6::repeat(0.3), spd(1)).unwrap();
        let post = posterior_update(&prior, &PrecisionSummary::zero()).unwrap();
        assert_abs_diff_eq!(post.cov(), prior.cov(), epsilon = 1e-12);
        assert_abs_diff_eq!(post.mean(), prior.mean(), epsilon = 1e-12);
        assert_eq!(eig(&Matrix6::zeros(), prior.cov()).unwrap(), 0.0);
    }

    #[test]
    fn identity_case() {
        let v = eig(&Matrix6::identity(), &Matrix6::identity()).unwrap();
        assert_abs_diff_eq!(v, 3.0 * 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn isotropic_kl() {
        let p = GaussianBelief::isotropic(1.0).unwrap();
        let q = GaussianBelief::isotropic(2f64.sqrt()).unwrap();
        let expected = 0.5 * (-3.0 + 6.0 * 2f64.ln());
        assert_abs_diff_eq!(kl_gaussian(&p, &q).unwrap(), expected, epsilon = 1e-13);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_priors() {
        let mut c = Matrix6::identity();
        c[(0, 0)] = -1.0;
        assert!(matches!(
            GaussianBelief::new(Vector6::zeros(), c),
            Err(Error::NonSpdPrior)
        ));
        let mut c = Matrix6::identity();
        c[(0, 1)] = 0.5;
        assert!(GaussianBelief::new(Vector6::zeros(), c).is_err());
        assert!(matches!(
            posterior_cov(&(-Matrix6::identity()), &Matrix6::zeros()),
            Err(Error::NonSpdPrior)
        ));
        assert!(matches!(
            eig_network(&[], &Matrix6::identity()),
            Err(Error::EmptyNetwork)
        ));
    }

    #[test]
    fn tensor_layout() {
        let m = MomentTensor::new([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = m.to_tensor();
        assert_eq!(t, t.transpose());
        assert_eq!(t[(0, 1)], 4.0);
        assert_eq!(t[(0, 2)], 5.0);
        assert_eq!(t[(1, 2)], 6.0);
        assert!(MomentTensor::new([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn accumulation_order_does_not_matter() {
        let prior = GaussianBelief::isotropic(0.5).unwrap();
        let parts: Vec<_> = (0..5).map(|i| PrecisionSummary::from_h(spd(10 + i))).collect();
        let fwd = parts.iter().sum::<PrecisionSummary>();
        let rev = parts.iter().rev().sum::<PrecisionSummary>();
        let a = posterior_update(&prior, &fwd).unwrap();
        let b = posterior_update(&prior, &rev).unwrap();
        assert_abs_diff_eq!(a.cov(), b.cov(), epsilon = 1e-10);
    }

    #[test]
    fn noise_scaling_strictly_decreases_eig() {
        let h = PrecisionSummary::from_h(spd(3));
        let prior = Matrix6::identity() * 0.25;
        let base = eig(&h.h, &prior).unwrap();
        for c in [1.5, 2.0, 10.0] {
            let scaled = h.scale_noise_variance(c);
            assert!(eig(&scaled.h, &prior).unwrap() < base);
        }
    }
}
