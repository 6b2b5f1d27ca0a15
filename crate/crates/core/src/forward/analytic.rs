//! Far-field moment-tensor radiation in a homogeneous, isotropic full space.
//!
//! For a unit-moment basis tensor `M` the displacement at distance `r` along
//! the unit direction `γ` is
//!
//! ```text
//! uᵢ(t) = γᵢ(γᵀMγ) / (4πρVp³r) · ṡ(t − r/Vp)
//!       + ((Mγ)ᵢ − γᵢ(γᵀMγ)) / (4πρVs³r) · ṡ(t − r/Vs)
//! ```
//!
//! Near- and intermediate-field terms are omitted. Coordinates are
//! (east, north, depth) with depth positive downward; displacement
//! components use the same axes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use super::{GreenMatrix, TimeGrid};
use crate::error::{Error, Result};
use crate::inference::MomentTensor;

/// Homogeneous elastic medium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumSpec {
    pub vp: f64,
    pub vs: f64,
    pub rho: f64,
}

impl MediumSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vs.is_finite() && self.vp.is_finite() && self.vs > 0.0 && self.vp > self.vs;
        if !ok {
            return Err(Error::InvalidInput(format!(
                "medium requires vp > vs > 0, got vp = {}, vs = {}",
                self.vp, self.vs
            )));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidInput(format!("density must be > 0, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Derivative-of-Gaussian source time function with width `1/(2π f_c)`,
/// supported on `[0, 8σ]` and centered at `4σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTimeFunction {
    pub corner_hz: f64,
}

impl Default for SourceTimeFunction {
    fn default() -> Self {
        Self { corner_hz: 10.0 }
    }
}

impl SourceTimeFunction {
    pub fn width(&self) -> f64 {
        1.0 / (2.0 * PI * self.corner_hz)
    }

    /// Length of the nonzero support, seconds.
    pub fn support(&self) -> f64 {
        8.0 * self.width()
    }

    /// `s(τ)`, normalized to unit peak magnitude.
    pub fn value(&self, tau: f64) -> f64 {
        let w = self.width();
        if !(0.0..=self.support()).contains(&tau) {
            return 0.0;
        }
        let x = (tau - 4.0 * w) / w;
        // peak of |x·exp(−x²/2)| is exp(−½) at |x| = 1
        -x * (-0.5 * x * x).exp() / (-0.5f64).exp()
    }

    /// `ṡ(τ)`.
    pub fn derivative(&self, tau: f64) -> f64 {
        let w = self.width();
        if !(0.0..=self.support()).contains(&tau) {
            return 0.0;
        }
        let x = (tau - 4.0 * w) / w;
        (x * x - 1.0) * (-0.5 * x * x).exp() / ((-0.5f64).exp() * w)
    }
}

/// Point source: hypocenter, time history and the scalar moment that
/// converts the dimensionless tensor into N·m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub east_m: f64,
    pub north_m: f64,
    pub depth_m: f64,
    #[serde(default)]
    pub stf: SourceTimeFunction,
    #[serde(default = "default_scalar_moment")]
    pub scalar_moment_nm: f64,
}

fn default_scalar_moment() -> f64 {
    1e15
}

impl SourceSpec {
    pub fn at(east_m: f64, north_m: f64, depth_m: f64) -> Self {
        Self {
            east_m,
            north_m,
            depth_m,
            stf: SourceTimeFunction::default(),
            scalar_moment_nm: default_scalar_moment(),
        }
    }

    pub fn location(&self) -> [f64; 3] {
        [self.east_m, self.north_m, self.depth_m]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_m.is_finite() && self.depth_m > 0.0) {
            return Err(Error::InvalidInput(format!(
                "source depth must be > 0, got {}",
                self.depth_m
            )));
        }
        if !(self.stf.corner_hz.is_finite() && self.stf.corner_hz > 0.0) {
            return Err(Error::InvalidInput("source corner frequency must be > 0".into()));
        }
        if !(self.scalar_moment_nm.is_finite() && self.scalar_moment_nm > 0.0) {
            return Err(Error::InvalidInput("scalar moment must be > 0".into()));
        }
        Ok(())
    }
}

/// Green matrix of a receiver for the homogeneous far-field model. Column
/// `q` is the response to the tensor built from the `q`-th basis vector.
pub fn green_analytic(
    station_id: usize,
    src: &SourceSpec,
    medium: &MediumSpec,
    receiver: [f64; 3],
    grid: TimeGrid,
) -> Result<GreenMatrix> {
    src.validate()?;
    medium.validate()?;
    grid.validate()?;
    let offset = Vector3::from(receiver) - Vector3::from(src.location());
    let r = offset.norm();
    let min_m = medium.vp * grid.dt;
    if r.is_nan() || r < min_m {
        return Err(Error::DegenerateGeometry { distance_m: r, min_m });
    }
    let gamma = offset / r;
    let p_scale = src.scalar_moment_nm / (4.0 * PI * medium.rho * medium.vp.powi(3) * r);
    let s_scale = src.scalar_moment_nm / (4.0 * PI * medium.rho * medium.vs.powi(3) * r);
    let (tp, ts) = (r / medium.vp, r / medium.vs);

    let n = grid.n_t;
    let p_pulse: Vec<f64> = (0..n).map(|i| src.stf.derivative(grid.time(i) - tp)).collect();
    let s_pulse: Vec<f64> = (0..n).map(|i| src.stf.derivative(grid.time(i) - ts)).collect();

    let mut samples = DMatrix::zeros(3 * n, 6);
    for q in 0..6 {
        let m = MomentTensor::basis(q).to_tensor();
        let m_gamma = m * gamma;
        let radial = gamma.dot(&m_gamma);
        for c in 0..3 {
            let a_p = p_scale * gamma[c] * radial;
            let a_s = s_scale * (m_gamma[c] - gamma[c] * radial);
            for i in 0..n {
                samples[(c * n + i, q)] = a_p * p_pulse[i] + a_s * s_pulse[i];
            }
        }
    }
    GreenMatrix::new(station_id, samples)
}
