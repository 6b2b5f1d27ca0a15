//! Ingestion and export of externally computed Green matrices.
//!
//! A manifest (JSON) lists the time grid and the stations; every station
//! points at a raw file of little-endian `f64` values holding the
//! `(3·n_t) × 6` matrix in row-major order.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{GreenMatrix, Station, TimeGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestStation {
    pub id: usize,
    pub east_m: f64,
    pub north_m: f64,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreenManifest {
    pub n_t: usize,
    pub dt: f64,
    pub stations: Vec<ManifestStation>,
}

#[derive(Debug, Clone)]
pub struct ImportedGreens {
    pub grid: TimeGrid,
    pub stations: Vec<Station>,
    pub greens: Vec<GreenMatrix>,
}

/// Parses and checks a manifest without touching the sample files.
pub fn read_manifest(path: &Path) -> Result<GreenManifest> {
    let parse_err = |reason: String| Error::ManifestParse {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: GreenManifest = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    TimeGrid::new(manifest.n_t, manifest.dt).map_err(|e| parse_err(e.to_string()))?;
    let mut seen = HashSet::new();
    for s in &manifest.stations {
        if !seen.insert(s.id) {
            return Err(Error::DuplicateStation(s.id));
        }
    }
    Ok(manifest)
}

/// Loads every station listed in the manifest. Relative file paths resolve
/// against the manifest's directory.
pub fn green_import(manifest_path: &Path) -> Result<ImportedGreens> {
    let manifest = read_manifest(manifest_path)?;
    let grid = TimeGrid::new(manifest.n_t, manifest.dt)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let rows = grid.rows();
    let expected_bytes = rows * 6 * 8;

    let mut stations = Vec::with_capacity(manifest.stations.len());
    let mut greens = Vec::with_capacity(manifest.stations.len());
    for entry in &manifest.stations {
        let path = base.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if bytes.len() != expected_bytes {
            return Err(Error::ShapeMismatch(format!(
                "station {}: {} holds {} bytes, expected {} for ({rows}, 6) doubles",
                entry.id,
                path.display(),
                bytes.len(),
                expected_bytes
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let samples = DMatrix::from_row_iterator(rows, 6, values);
        greens.push(GreenMatrix::new(entry.id, samples)?);
        stations.push(Station {
            id: entry.id,
            east_m: entry.east_m,
            north_m: entry.north_m,
        });
    }
    Ok(ImportedGreens { grid, stations, greens })
}

/// Writes `manifest.json` plus one `station_<id>.f64` file per station into
/// `dir` and returns the manifest path.
pub fn green_export(dir: &Path, grid: TimeGrid, stations: &[Station], greens: &[GreenMatrix]) -> Result<PathBuf> {
    if stations.len() != greens.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} stations but {} Green matrices",
            stations.len(),
            greens.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::with_capacity(stations.len());
    for (station, green) in stations.iter().zip(greens) {
        if green.samples().nrows() != grid.rows() {
            return Err(Error::ShapeMismatch(format!(
                "station {}: Green matrix has {} rows, grid expects {}",
                station.id,
                green.samples().nrows(),
                grid.rows()
            )));
        }
        let file = PathBuf::from(format!("station_{}.f64", station.id));
        let samples = green.samples();
        let mut bytes = Vec::with_capacity(samples.len() * 8);
        for r in 0..samples.nrows() {
            for c in 0..6 {
                bytes.extend_from_slice(&samples[(r, c)].to_le_bytes());
            }
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        entries.push(ManifestStation {
            id: station.id,
            east_m: station.east_m,
            north_m: station.north_m,
            file,
        });
    }
    let manifest = GreenManifest {
        n_t: grid.n_t,
        dt: grid.dt,
        stations: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}
