//! Exponentially correlated noise with a tridiagonal precision.
//!
//! On a uniform grid the kernel `σ²·exp(−|tᵢ−tⱼ|/T)` is the covariance of a
//! stationary AR(1) sequence with coefficient `ρ = exp(−dt/T)`. Its inverse is
//! tridiagonal:
//!
//! ```text
//! Σ⁻¹ = 1/(σ²(1−ρ²)) · tridiag(−ρ; [1, 1+ρ², …, 1+ρ², 1]; −ρ)
//! ```
//!
//! The three displacement components are independent, so the full
//! `3n_t × 3n_t` operator is block diagonal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::TimeGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma_eps: f64,
    corr_time: f64,
    grid: TimeGrid,
    floored: bool,
}

impl NoiseModel {
    /// `corr_time = 0` selects white noise. `sigma_eps = 0` is allowed for
    /// noise-free synthesis but has no precision.
    pub fn new(sigma_eps: f64, corr_time: f64, grid: TimeGrid) -> Result<Self> {
        if !(sigma_eps.is_finite() && sigma_eps >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "sigma_eps must be finite and >= 0, got {sigma_eps}"
            )));
        }
        if !(corr_time.is_finite() && corr_time >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "correlation time must be finite and >= 0, got {corr_time}"
            )));
        }
        Ok(Self {
            sigma_eps,
            corr_time,
            grid,
            floored: false,
        })
    }

    pub(crate) fn with_floor_flag(mut self, floored: bool) -> Self {
        self.floored = floored;
        self
    }

    pub fn sigma_eps(&self) -> f64 {
        self.sigma_eps
    }

    pub fn corr_time(&self) -> f64 {
        self.corr_time
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Set when calibration hit the zero-signal path and fell back to the
    /// noise floor.
    pub fn floored(&self) -> bool {
        self.floored
    }

    pub fn rho(&self) -> f64 {
        correlation(self.grid.dt, self.corr_time)
    }

    /// Diagonal and off-diagonal of the single-component precision.
    pub fn precision_tridiagonal(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let scale = self.precision_scale()?;
        let n = self.grid.n_t;
        let rho = self.rho();
        let mut diag = vec![scale * (1.0 + rho * rho); n];
        diag[0] = scale;
        diag[n - 1] = scale;
        let off = vec![-scale * rho; n - 1];
        Ok((diag, off))
    }

    /// Single-component dense kernel, mainly for verification.
    pub fn dense_kernel(&self) -> DMatrix<f64> {
        let n = self.grid.n_t;
        let var = self.sigma_eps * self.sigma_eps;
        let rho = self.rho();
        DMatrix::from_fn(n, n, |i, j| var * rho.powi((i as i32 - j as i32).abs()))
    }

    /// `Σε⁻¹x` for a full three-component trace.
    pub fn apply_precision(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let scale = self.precision_scale()?;
        let n = self.grid.n_t;
        if x.len() != 3 * n || out.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!(
                "trace of length {} does not match 3·n_t = {}",
                x.len(),
                3 * n
            )));
        }
        let rho = self.rho();
        for (xc, oc) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            apply_unit_precision(rho, xc, oc);
            oc.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(())
    }

    /// Draws one three-component noise trace by running the AR(1) recursion
    /// that the tridiagonal precision factors into.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.grid.n_t;
        let rho = self.rho();
        let innovation = self.sigma_eps * (1.0 - rho * rho).sqrt();
        let mut out = DVector::zeros(3 * n);
        for c in 0..3 {
            let block = &mut out.as_mut_slice()[c * n..(c + 1) * n];
            let z: f64 = rng.sample(StandardNormal);
            block[0] = self.sigma_eps * z;
            for i in 1..n {
                let z: f64 = rng.sample(StandardNormal);
                block[i] = rho * block[i - 1] + innovation * z;
            }
        }
        out
    }

    fn precision_scale(&self) -> Result<f64> {
        if self.sigma_eps <= 0.0 {
            return Err(Error::InvalidInput(
                "noise model with sigma_eps = 0 has no precision".into(),
            ));
        }
        let rho = self.rho();
        Ok(1.0 / (self.sigma_eps * self.sigma_eps * (1.0 - rho * rho)))
    }
}

pub(crate) fn correlation(dt: f64, corr_time: f64) -> f64 {
    if corr_time == 0.0 {
        0.0
    } else {
        (-dt / corr_time).exp()
    }
}

/// Applies `(1−ρ²)·Σ⁻¹` for unit variance to one component.
pub(crate) fn apply_unit_precision(rho: f64, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert!(n >= 2 && out.len() == n);
    let mid = 1.0 + rho * rho;
    out[0] = x[0] - rho * x[1];
    for i in 1..n - 1 {
        out[i] = mid * x[i] - rho * (x[i - 1] + x[i + 1]);
    }
    out[n - 1] = x[n - 1] - rho * x[n - 2];
}
