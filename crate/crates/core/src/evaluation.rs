//! Posterior quality metrics: Bayes risk (nominal and misspecified),
//! posterior log-determinant and the continuous ranked probability score.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix6, Vector6};
use serde::Serialize;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::forward::{self, GreenMatrix, NoiseModel};
use crate::inference::{self, GaussianBelief, MomentTensor, PrecisionSummary};

/// Tolerance on `‖Σ_pos(H + Σ_pr⁻¹) − I‖_max`, relative to
/// `6·‖Σ_pos‖_max·‖H + Σ_pr⁻¹‖_max`, when checking that a posterior
/// covariance belongs to the supplied model.
pub const POSTERIOR_IDENTITY_TOL: f64 = 1e-8;

/// Information of the inference model `H = GᵀΣε⁻¹G` and the cross term
/// `H̃ = GᵀΣε⁻¹G̃` with the data-generating Green matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MisspecPair {
    pub h: Matrix6<f64>,
    pub h_tilde: Matrix6<f64>,
}

impl MisspecPair {
    pub fn well_specified(h: Matrix6<f64>) -> Self {
        Self { h, h_tilde: h }
    }

    /// Identical model and data matrices give `H̃ = H` exactly.
    pub fn from_greens(model: &GreenMatrix, data: &GreenMatrix, noise: &NoiseModel) -> Result<Self> {
        let h = forward::precision_summary(model, noise, None)?.h;
        if model.samples() == data.samples() {
            return Ok(Self::well_specified(h));
        }
        Ok(Self {
            h,
            h_tilde: forward::cross_information(model, data, noise)?,
        })
    }
}

impl std::ops::Add for MisspecPair {
    type Output = MisspecPair;

    fn add(self, rhs: Self) -> Self {
        Self {
            h: self.h + rhs.h,
            h_tilde: self.h_tilde + rhs.h_tilde,
        }
    }
}

/// Bayes risk of the posterior mean in the well-specified case, `Tr Σ_pos`.
pub fn bayes_risk_nominal(pos: &GaussianBelief) -> f64 {
    pos.cov().trace()
}

/// Bayes risk of the posterior mean when data come from `G̃` but inference
/// uses `G`. With `D = H̃ − H`:
///
/// ```text
/// Tr Σ_pos + Tr(Σ_pos D (Σ_pr + μμᵀ) Dᵀ Σ_pos) − Tr(Σ_pos (D + Dᵀ) Σ_pos)
/// ```
pub fn bayes_risk_misspec(pos_cov: &Matrix6<f64>, prior: &GaussianBelief, pair: &MisspecPair) -> Result<f64> {
    let prior_precision = nalgebra::Cholesky::new(*prior.cov())
        .ok_or(Error::NonSpdPrior)?
        .inverse();
    let precision = pair.h + prior_precision;
    let residual = (pos_cov * precision - Matrix6::identity()).amax();
    // backward-error scaling: a correct inverse of an ill-conditioned
    // precision only satisfies the identity to ~cond·eps
    let scale = (6.0 * pos_cov.amax() * precision.amax()).max(1.0);
    if residual.is_nan() || residual > POSTERIOR_IDENTITY_TOL * scale {
        return Err(Error::InconsistentInputs(format!(
            "posterior covariance does not invert H + Σ_pr⁻¹ (residual {residual:.3e})"
        )));
    }
    let d = pair.h_tilde - pair.h;
    let mu = prior.mean();
    let second = prior.cov() + mu * mu.transpose();
    let spread = (pos_cov * d * second * d.transpose() * pos_cov).trace();
    let cross = (pos_cov * (d + d.transpose()) * pos_cov).trace();
    let risk = pos_cov.trace() + spread - cross;
    if !risk.is_finite() {
        return Err(Error::NumericalBreakdown("misspecified risk is not finite".into()));
    }
    Ok(risk)
}

/// CRPS of a Gaussian forecast against a point truth:
/// `σ[z(2Φ(z) − 1) + 2φ(z) − 1/√π]`, `z = (truth − mean)/σ`. A zero
/// standard deviation degenerates to `|truth − mean|`.
pub fn crps_gaussian(mean: f64, sd: f64, truth: f64) -> Result<f64> {
    if sd.is_nan() || sd < 0.0 || !mean.is_finite() || !truth.is_finite() {
        return Err(Error::InvalidInput(format!(
            "CRPS needs finite mean/truth and sd >= 0, got ({mean}, {sd}, {truth})"
        )));
    }
    if sd == 0.0 {
        return Ok((truth - mean).abs());
    }
    let std = Normal::standard();
    let z = (truth - mean) / sd;
    let value = sd * (z * (2.0 * std.cdf(z) - 1.0) + 2.0 * std.pdf(z) - 1.0 / PI.sqrt());
    Ok(value.max(0.0))
}

/// Forward data for one selected station in a scoring run. `data` is the
/// Green matrix that generates observations; `None` means the model itself.
#[derive(Debug, Clone)]
pub struct StationObservation {
    pub model: GreenMatrix,
    pub noise: NoiseModel,
    pub data: Option<GreenMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub k: usize,
    pub trace_risk: f64,
    pub logdet_pos: f64,
    pub crps: [f64; 6],
    pub misspec_risk: Option<f64>,
}

/// Per-prefix posterior quality of a network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub label: String,
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    /// CSV with header `k,trace_risk,logdet_pos,crps_m1..crps_m6` and a
    /// trailing `misspec_risk` column when any row carries one.
    pub fn to_csv(&self) -> String {
        let with_misspec = self.rows.iter().any(|r| r.misspec_risk.is_some());
        let mut out = String::from("k,trace_risk,logdet_pos,crps_m1,crps_m2,crps_m3,crps_m4,crps_m5,crps_m6");
        if with_misspec {
            out.push_str(",misspec_risk");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.k, r.trace_risk, r.logdet_pos));
            for c in r.crps {
                out.push_str(&format!(",{c}"));
            }
            if with_misspec {
                match r.misspec_risk {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every prefix `k = 0..=K` of `station_ids`. Observations are
/// synthesized from `truth` with a per-(seed, station) stream; CRPS values
/// are averaged over `seeds`.
pub fn score_network(
    label: &str,
    station_ids: &[usize],
    bindings: &BTreeMap<usize, StationObservation>,
    prior: &GaussianBelief,
    truth: &MomentTensor,
    seeds: &[u64],
) -> Result<ScoreReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("score_network needs at least one seed".into()));
    }
    let mut per_station = Vec::with_capacity(station_ids.len());
    let mut any_misspec = false;
    for id in station_ids {
        let obs = bindings
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("no observation binding for station {id}")))?;
        let data_green = obs.data.as_ref().unwrap_or(&obs.model);
        any_misspec |= obs.data.is_some();
        let pair = MisspecPair::from_greens(&obs.model, data_green, &obs.noise)?;
        let mut bs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let y = forward::synthesize_observation(data_green, truth, &obs.noise, station_seed(seed, *id))?;
            let s = forward::precision_summary(&obs.model, &obs.noise, Some(&y))?;
            bs.push(s.b.expect("waveform supplied"));
        }
        per_station.push((pair, bs));
    }

    let mut rows = Vec::with_capacity(station_ids.len() + 1);
    let mut pair = MisspecPair::well_specified(Matrix6::zeros());
    let mut b_sums = vec![Vector6::zeros(); seeds.len()];
    for k in 0..=station_ids.len() {
        if k > 0 {
            let (p, bs) = &per_station[k - 1];
            pair = pair + p.clone();
            for (acc, b) in b_sums.iter_mut().zip(bs) {
                *acc += b;
            }
        }
        let mut crps = [0.0; 6];
        let mut pos_cov = *prior.cov();
        for b in &b_sums {
            let pos = inference::posterior_update(prior, &PrecisionSummary::with_data(pair.h, *b))?;
            pos_cov = *pos.cov();
            let sd = pos.marginal_sd();
            for (i, c) in crps.iter_mut().enumerate() {
                *c += crps_gaussian(pos.mean()[i], sd[i], truth.as_vector()[i])?;
            }
        }
        crps.iter_mut().for_each(|c| *c /= seeds.len() as f64);
        let misspec_risk = if any_misspec {
            Some(bayes_risk_misspec(&pos_cov, prior, &pair)?)
        } else {
            None
        };
        rows.push(ScoreRow {
            k,
            trace_risk: pos_cov.trace(),
            logdet_pos: inference::logdet_spd(&pos_cov)?,
            crps,
            misspec_risk,
        });
    }
    Ok(ScoreReport {
        label: label.to_string(),
        rows,
    })
}

/// Mixes a run seed with a station id into an independent stream seed.
pub fn station_seed(seed: u64, station_id: usize) -> u64 {
    crate::scenario::derive_seed(seed, "observation", station_id as u64)
}
