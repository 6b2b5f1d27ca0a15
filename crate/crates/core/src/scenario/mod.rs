//! Experiment setup: candidate grids, source clouds, seed splitting and the
//! run orchestration behind every study.

mod config;
mod run;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::Station;

pub use config::{
    DepthStudyConfig, ExperimentConfig, ForwardConfig, MisspecConfig, MisspecScenarios, Mode, NamedMedium, NoiseConfig,
    PriorConfig, ProviderKind, RandomBaselineConfig, ScoringConfig, SourceCloudConfig,
};
pub use run::{configure_threads, run_experiment, RunBundle, THREADS_ENV};

/// Relative slack when checking that a spacing divides an extent.
const SPACING_TOL: f64 = 1e-9;

/// Horizontal receiver grid. Exactly one of `spacing_m` / `counts` is set;
/// `counts = [n_east, n_north]` places points at both ends of each extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub east_m: [f64; 2],
    pub north_m: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<[usize; 2]>,
}

impl GridSpec {
    pub fn with_spacing(east_m: [f64; 2], north_m: [f64; 2], spacing_m: f64) -> Self {
        Self {
            east_m,
            north_m,
            spacing_m: Some(spacing_m),
            counts: None,
        }
    }

    pub fn with_counts(east_m: [f64; 2], north_m: [f64; 2], n_east: usize, n_north: usize) -> Self {
        Self {
            east_m,
            north_m,
            spacing_m: None,
            counts: Some([n_east, n_north]),
        }
    }

    fn axis(&self, lo: f64, hi: f64, count: Option<usize>, name: &str) -> Result<(usize, f64)> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidExtent(format!(
                "{name} extent [{lo}, {hi}] is not ordered"
            )));
        }
        let span = hi - lo;
        match (self.spacing_m, count) {
            (Some(h), None) => {
                if !(h.is_finite() && h > 0.0) {
                    return Err(Error::InvalidExtent(format!("spacing must be > 0, got {h}")));
                }
                let steps = span / h;
                let rounded = steps.round();
                if (steps - rounded).abs() > SPACING_TOL * steps.max(1.0) {
                    return Err(Error::InvalidExtent(format!(
                        "spacing {h} m does not divide the {name} extent of {span} m"
                    )));
                }
                Ok((rounded as usize + 1, h))
            }
            (None, Some(n)) => {
                if n == 0 {
                    return Err(Error::InvalidExtent(format!("{name} count must be >= 1")));
                }
                if n == 1 {
                    if span != 0.0 {
                        return Err(Error::InvalidExtent(format!(
                            "a single {name} point needs a zero-width extent"
                        )));
                    }
                    return Ok((1, 0.0));
                }
                Ok((n, span / (n - 1) as f64))
            }
            _ => Err(Error::InvalidExtent(
                "exactly one of spacing_m or counts must be given".into(),
            )),
        }
    }

    /// `(n_east, n_north)`.
    pub fn shape(&self) -> Result<(usize, usize)> {
        let (ne, _) = self.axis(self.east_m[0], self.east_m[1], self.counts.map(|c| c[0]), "east")?;
        let (nn, _) = self.axis(self.north_m[0], self.north_m[1], self.counts.map(|c| c[1]), "north")?;
        Ok((ne, nn))
    }

    pub fn len(&self) -> Result<usize> {
        let (ne, nn) = self.shape()?;
        Ok(ne * nn)
    }

    /// Never true for a valid spec; kept for symmetry with `len`.
    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().map(|_| ())
    }

    /// `id = row·n_east + col`, rows running south to north.
    pub fn id_of(&self, row: usize, col: usize) -> Result<usize> {
        let (ne, nn) = self.shape()?;
        if row >= nn || col >= ne {
            return Err(Error::InvalidInput(format!(
                "({row}, {col}) is outside a {nn}×{ne} grid"
            )));
        }
        Ok(row * ne + col)
    }

    /// Inverse of [`Self::id_of`].
    pub fn row_col(&self, id: usize) -> Result<(usize, usize)> {
        let (ne, nn) = self.shape()?;
        if id >= ne * nn {
            return Err(Error::InvalidInput(format!("id {id} is outside a grid of {}", ne * nn)));
        }
        Ok((id / ne, id % ne))
    }
}

/// Surface receivers, south-to-north outer and west-to-east inner.
pub fn build_grid(spec: &GridSpec) -> Result<Vec<Station>> {
    let (ne, he) = spec.axis(spec.east_m[0], spec.east_m[1], spec.counts.map(|c| c[0]), "east")?;
    let (nn, hn) = spec.axis(spec.north_m[0], spec.north_m[1], spec.counts.map(|c| c[1]), "north")?;
    let mut out = Vec::with_capacity(ne * nn);
    for row in 0..nn {
        let north = if row + 1 == nn {
            spec.north_m[1]
        } else {
            spec.north_m[0] + row as f64 * hn
        };
        for col in 0..ne {
            let east = if col + 1 == ne {
                spec.east_m[1]
            } else {
                spec.east_m[0] + col as f64 * he
            };
            out.push(Station {
                id: row * ne + col,
                east_m: east,
                north_m: north,
            });
        }
    }
    Ok(out)
}

/// Axis-aligned horizontal rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub east_m: [f64; 2],
    pub north_m: [f64; 2],
}

impl Bounds {
    pub fn centered(east: f64, north: f64, half_width: f64) -> Self {
        Self {
            east_m: [east - half_width, east + half_width],
            north_m: [north - half_width, north + half_width],
        }
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.east_m[0] + self.east_m[1]),
            0.5 * (self.north_m[0] + self.north_m[1]),
        ]
    }
}

/// I.i.d. uniform epicenters at a fixed depth; returns `[east, north, depth]`.
pub fn sample_source_cloud(bounds: &Bounds, depth_m: f64, count: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    if count == 0 {
        return Err(Error::InvalidInput("source cloud count must be >= 1".into()));
    }
    let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
    if !ordered(bounds.east_m) || !ordered(bounds.north_m) {
        return Err(Error::InvalidExtent(format!(
            "source bounds {bounds:?} are not ordered"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
    Ok((0..count)
        .map(|_| {
            let e = draw(bounds.east_m);
            let n = draw(bounds.north_m);
            [e, n, depth_m]
        })
        .collect())
}

/// Splits a root seed into an independent stream per `(purpose, index)`.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_grid() {
        let spec = GridSpec::with_spacing([-4000.0, 4000.0], [-4000.0, 4000.0], 50.0);
        let grid = build_grid(&spec).unwrap();
        assert_eq!(grid.len(), 25_921);
        assert_eq!((grid[0].east_m, grid[0].north_m), (-4000.0, -4000.0));
        let center = spec.id_of(80, 80).unwrap();
        assert_eq!((grid[center].east_m, grid[center].north_m), (0.0, 0.0));
        assert_eq!(grid.last().map(|s| (s.east_m, s.north_m)), Some((4000.0, 4000.0)));
    }

    #[test]
    fn unit_square_order() {
        let grid = build_grid(&GridSpec::with_counts([0.0, 1.0], [0.0, 1.0], 2, 2)).unwrap();
        let xy: Vec<_> = grid.iter().map(|s| (s.id, s.east_m, s.north_m)).collect();
        assert_eq!(xy, vec![(0, 0.0, 0.0), (1, 1.0, 0.0), (2, 0.0, 1.0), (3, 1.0, 1.0)]);
    }

    #[test]
    fn bad_extents() {
        let spec = GridSpec::with_spacing([0.0, 1000.0], [0.0, 1000.0], 300.0);
        assert!(matches!(build_grid(&spec), Err(Error::InvalidExtent(_))));
        let spec = GridSpec::with_spacing([10.0, 0.0], [0.0, 0.0], 1.0);
        assert!(matches!(build_grid(&spec), Err(Error::InvalidExtent(_))));
        let both = GridSpec {
            counts: Some([2, 2]),
            ..GridSpec::with_spacing([0.0, 1.0], [0.0, 1.0], 1.0)
        };
        assert!(matches!(build_grid(&both), Err(Error::InvalidExtent(_))));
        let zero = GridSpec::with_counts([0.0, 1.0], [0.0, 1.0], 0, 2);
        assert!(matches!(build_grid(&zero), Err(Error::InvalidExtent(_))));
    }

    #[test]
    fn id_round_trip() {
        let spec = GridSpec::with_counts([0.0, 4.0], [0.0, 2.0], 5, 3);
        for id in 0..15 {
            let (r, c) = spec.row_col(id).unwrap();
            assert_eq!(spec.id_of(r, c).unwrap(), id);
        }
        assert!(spec.row_col(15).is_err());
    }

    #[test]
    fn cloud_in_bounds_and_repeatable() {
        let b = Bounds::centered(0.0, 0.0, 500.0);
        let a = sample_source_cloud(&b, 2000.0, 25, 7).unwrap();
        assert_eq!(a.len(), 25);
        assert!(a
            .iter()
            .all(|p| p[0].abs() <= 500.0 && p[1].abs() <= 500.0 && p[2] == 2000.0));
        assert_eq!(a, sample_source_cloud(&b, 2000.0, 25, 7).unwrap());
        assert_ne!(a, sample_source_cloud(&b, 2000.0, 25, 8).unwrap());
        assert!(sample_source_cloud(&b, 2000.0, 0, 7).is_err());
    }

    #[test]
    fn seeds_split_by_purpose() {
        assert_eq!(derive_seed(1, "noise", 0), derive_seed(1, "noise", 0));
        assert_ne!(derive_seed(1, "noise", 0), derive_seed(1, "noise", 1));
        assert_ne!(derive_seed(1, "noise", 0), derive_seed(1, "random", 0));
        assert_ne!(derive_seed(1, "noise", 0), derive_seed(2, "noise", 0));
    }
}
