//! Forward modeling: per-station Green matrices, noise calibration and
//! synthetic observations.
//!
//! A Green matrix maps the six moment-tensor components to a three-component
//! displacement trace. Rows are component-major: all `n_t` samples of the
//! east component, then north, then down.

mod analytic;
mod import;
mod noise;

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use analytic::{green_analytic, MediumSpec, SourceSpec, SourceTimeFunction};
pub use import::{green_export, green_import, read_manifest, GreenManifest, ImportedGreens, ManifestStation};
pub use noise::NoiseModel;

use crate::error::{Error, Result};
use crate::inference::{MomentTensor, PrecisionSummary};

/// Uniform sampling of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub n_t: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(n_t: usize, dt: f64) -> Result<Self> {
        let grid = Self { n_t, dt };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t < 2 {
            return Err(Error::InvalidInput(format!("n_t must be >= 2, got {}", self.n_t)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {}", self.dt)));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.n_t as f64 * self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Rows of a Green matrix on this grid.
    pub fn rows(&self) -> usize {
        3 * self.n_t
    }
}

/// A candidate receiver on the free surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: usize,
    pub east_m: f64,
    pub north_m: f64,
}

impl Station {
    pub fn location(&self) -> [f64; 3] {
        [self.east_m, self.north_m, 0.0]
    }
}

/// Linear observation operator of one station, shape `(3·n_t, 6)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenMatrix {
    station_id: usize,
    samples: DMatrix<f64>,
}

impl GreenMatrix {
    pub fn new(station_id: usize, samples: DMatrix<f64>) -> Result<Self> {
        if samples.ncols() != 6 || !samples.nrows().is_multiple_of(3) || samples.nrows() < 6 {
            return Err(Error::ShapeMismatch(format!(
                "station {station_id}: Green matrix must be (3·n_t, 6), got ({}, {})",
                samples.nrows(),
                samples.ncols()
            )));
        }
        // nalgebra is column-major; report the first bad row in row order.
        let bad_row = (0..samples.nrows()).find(|&r| samples.row(r).iter().any(|v| !v.is_finite()));
        if let Some(row) = bad_row {
            return Err(Error::NonFiniteSample {
                station: station_id,
                row,
            });
        }
        Ok(Self { station_id, samples })
    }

    pub fn station_id(&self) -> usize {
        self.station_id
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn n_t(&self) -> usize {
        self.samples.nrows() / 3
    }

    /// Noise-free displacement `G·m`.
    pub fn response(&self, mt: &MomentTensor) -> DVector<f64> {
        &self.samples * mt.as_vector()
    }

    fn check_grid(&self, grid: TimeGrid) -> Result<()> {
        if self.samples.nrows() != grid.rows() {
            return Err(Error::ShapeMismatch(format!(
                "station {}: Green matrix has {} rows but noise grid expects {}",
                self.station_id,
                self.samples.nrows(),
                grid.rows()
            )));
        }
        Ok(())
    }

    /// `Σε⁻¹G`, column by column.
    fn whitened(&self, noise: &NoiseModel) -> Result<DMatrix<f64>> {
        self.check_grid(noise.grid())?;
        let mut out = DMatrix::zeros(self.samples.nrows(), 6);
        for q in 0..6 {
            noise.apply_precision(self.samples.column(q).as_slice(), out.column_mut(q).as_mut_slice())?;
        }
        Ok(out)
    }
}

/// Noise calibration parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCalibration {
    /// Target ratio of noise to signal energy (in the L2 sense).
    pub rel: f64,
    /// Correlation time `T` of the exponential kernel, seconds.
    pub corr_time: f64,
    /// Lower bound on the per-station noise deviation.
    pub sigma_floor: f64,
}

/// Sets `σε = rel·‖u‖₂/√(3n_t)` for `u = G·m_ref`, so that the expected noise
/// energy is `rel²` times the signal energy. Stations whose reference
/// waveform is (numerically) zero fall back to `sigma_floor` and are flagged.
pub fn calibrate_noise(
    green: &GreenMatrix,
    reference_mt: &MomentTensor,
    grid: TimeGrid,
    params: &NoiseCalibration,
) -> Result<NoiseModel> {
    green.check_grid(grid)?;
    let norm = green.response(reference_mt).norm();
    let (sigma, zero) = sigma_from_norm(norm, grid, params)?;
    Ok(NoiseModel::new(sigma, params.corr_time, grid)?.with_floor_flag(zero))
}

pub(crate) fn sigma_from_norm(norm: f64, grid: TimeGrid, params: &NoiseCalibration) -> Result<(f64, bool)> {
    if !(params.rel > 0.0 && params.rel <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "relative noise level must lie in (0, 1], got {}",
            params.rel
        )));
    }
    if !(params.sigma_floor.is_finite() && params.sigma_floor >= 0.0) {
        return Err(Error::InvalidInput("sigma_floor must be finite and >= 0".into()));
    }
    let root_n = (grid.rows() as f64).sqrt();
    if norm < params.sigma_floor * root_n || norm == 0.0 {
        return Ok((params.sigma_floor, true));
    }
    Ok(((params.rel * norm / root_n).max(params.sigma_floor), false))
}

/// `H = GᵀΣε⁻¹G`, plus `b = GᵀΣε⁻¹y` when a waveform is supplied.
pub fn precision_summary(
    green: &GreenMatrix,
    noise: &NoiseModel,
    y: Option<&DVector<f64>>,
) -> Result<PrecisionSummary> {
    let whitened = green.whitened(noise)?;
    let h = green.samples.transpose() * &whitened;
    let h = Matrix6::from_iterator(h.iter().copied());
    let b = match y {
        Some(y) => {
            if y.len() != green.samples.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "waveform of length {} does not match {} Green rows",
                    y.len(),
                    green.samples.nrows()
                )));
            }
            let b = whitened.transpose() * y;
            Some(Vector6::from_iterator(b.iter().copied()))
        }
        None => None,
    };
    Ok(PrecisionSummary {
        h: crate::inference::symmetrize(&h),
        b,
    })
}

/// Cross information `GᵀΣε⁻¹G̃` between the inference model `G` and a
/// data-generating model `G̃` observed through the same noise.
pub fn cross_information(model: &GreenMatrix, data: &GreenMatrix, noise: &NoiseModel) -> Result<Matrix6<f64>> {
    data.check_grid(noise.grid())?;
    let whitened = model.whitened(noise)?;
    let m = whitened.transpose() * &data.samples;
    Ok(Matrix6::from_iterator(m.iter().copied()))
}

/// `y = G·m + ε`, deterministic in `seed`.
pub fn synthesize_observation(
    green: &GreenMatrix,
    true_mt: &MomentTensor,
    noise: &NoiseModel,
    seed: u64,
) -> Result<DVector<f64>> {
    green.check_grid(noise.grid())?;
    let mut y = green.response(true_mt);
    if noise.sigma_eps() > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        y += noise.sample(&mut rng);
    }
    Ok(y)
}

/// Writes a three-component trace as CSV with header `t,u1,u2,u3`.
pub fn write_waveform_csv<W: Write>(mut out: W, grid: TimeGrid, trace: &DVector<f64>) -> Result<()> {
    if trace.len() != grid.rows() {
        return Err(Error::ShapeMismatch(format!(
            "trace of length {} does not match 3·n_t = {}",
            trace.len(),
            grid.rows()
        )));
    }
    let n = grid.n_t;
    let io = |e| Error::io("writing waveform CSV", e);
    writeln!(out, "t,u1,u2,u3").map_err(io)?;
    for i in 0..n {
        writeln!(
            out,
            "{},{},{},{}",
            grid.time(i),
            trace[i],
            trace[n + i],
            trace[2 * n + i]
        )
        .map_err(io)?;
    }
    Ok(())
}
