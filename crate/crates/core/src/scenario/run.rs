//! Study pipelines: forward precompute → design → evaluation → export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Matrix6;
use rayon::prelude::*;
use serde_json::json;

use super::config::{ExperimentConfig, MisspecScenarios, Mode, ProviderKind};
use super::{build_grid, derive_seed, sample_source_cloud, Bounds};
use crate::design::{self, CandidateSet, DesignRecord, Scenario, ScenarioKind, ScenarioSet};
use crate::error::{Error, Result};
use crate::evaluation::{self, MisspecPair, ScoreReport, StationObservation};
use crate::forward::{
    self, green_analytic, green_import, GreenMatrix, ImportedGreens, MediumSpec, NoiseCalibration, NoiseModel,
    SourceSpec, Station, TimeGrid,
};
use crate::inference::{self, GaussianBelief, MomentTensor, PrecisionSummary};

/// Environment variable bounding the worker pool size.
pub const THREADS_ENV: &str = "OEDMT_THREADS";

/// Sizes the global worker pool from `explicit`, else from
/// [`THREADS_ENV`]. A pool that is already initialized is left alone.
pub fn configure_threads(explicit: Option<usize>) -> Result<()> {
    let n = match explicit {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(THREADS_ENV, format!("expected a positive integer, got `{v}`")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Everything a run produced, in memory. [`RunBundle::write`] puts it on
/// disk under `<out>/<config_hash>/`.
#[derive(Debug, Clone)]
pub struct RunBundle {
    pub config_hash: String,
    pub mode: Mode,
    pub config_toml: String,
    pub designs: Vec<(String, DesignRecord)>,
    pub scores: Vec<ScoreReport>,
    /// `(file name, CSV body)`.
    pub tables: Vec<(String, String)>,
    pub summary: serde_json::Value,
}

impl RunBundle {
    pub fn design(&self, label: &str) -> Option<&DesignRecord> {
        self.designs.iter().find(|(l, _)| l == label).map(|(_, d)| d)
    }

    pub fn table(&self, name: &str) -> Option<&str> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }

    pub fn score(&self, label: &str) -> Option<&ScoreReport> {
        self.scores.iter().find(|s| s.label == label)
    }

    /// Scores of every report as one CSV with a leading `label` column.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from(
            "label,k,trace_risk,logdet_pos,crps_m1,crps_m2,crps_m3,crps_m4,crps_m5,crps_m6,misspec_risk\n",
        );
        for report in &self.scores {
            for r in &report.rows {
                out.push_str(&format!("{},{},{},{}", report.label, r.k, r.trace_risk, r.logdet_pos));
                for c in r.crps {
                    out.push_str(&format!(",{c}"));
                }
                match r.misspec_risk {
                    Some(v) => out.push_str(&format!(",{v}\n")),
                    None => out.push_str(",\n"),
                }
            }
        }
        out
    }

    /// Writes the bundle and returns the run directory. Every file is fully
    /// determined by the bundle contents.
    pub fn write(&self, out_root: &Path) -> Result<PathBuf> {
        let dir = out_root.join(&self.config_hash);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let put = |name: &str, body: &str| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
        };
        put("config.toml", &self.config_toml)?;
        let summary = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        put("summary.json", &(summary + "\n"))?;
        for (label, record) in &self.designs {
            put(
                &format!("design_{}.json", file_label(label)),
                &(record.to_json() + "\n"),
            )?;
        }
        if !self.scores.is_empty() {
            put("scores.csv", &self.scores_csv())?;
        }
        for (name, body) in &self.tables {
            put(name, body)?;
        }
        Ok(dir)
    }
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Where a scenario's Green matrices come from.
#[derive(Debug, Clone)]
enum Forward {
    Analytic { source: SourceSpec, medium: MediumSpec },
    Imported(Arc<ImportedGreens>),
}

/// A forward scenario after noise calibration, with cached information.
struct Prepared {
    label: String,
    kind: ScenarioKind,
    forward: Forward,
    info: Vec<Matrix6<f64>>,
    sigma: Vec<f64>,
    floored: Vec<bool>,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    k: usize,
    grid: TimeGrid,
    stations: Vec<Station>,
    prior: GaussianBelief,
    truth: MomentTensor,
    reference: MomentTensor,
    corr_time: f64,
    scoring_seeds: Vec<u64>,
    imports: Vec<Arc<ImportedGreens>>,
}

/// Runs the pipeline of `cfg.mode`. Relative manifest paths resolve against
/// `base_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<RunBundle> {
    cfg.validate()?;
    let ctx = Context::new(cfg, base_dir)?;
    let mut bundle = match cfg.mode {
        Mode::Greedy => ctx.run_greedy(false),
        Mode::RandomBaseline => ctx.run_greedy(true),
        Mode::DepthStudy => ctx.run_depth_study(),
        Mode::ConsensusVelocity => ctx.run_consensus(ScenarioKind::VelocityModel),
        Mode::ConsensusSource => ctx.run_consensus(ScenarioKind::SourceLocation),
        Mode::MisspecSweep => ctx.run_misspec(),
    }
    .map_err(|e| e.context(format!("{} run {}", cfg.mode.as_str(), ctx.hash)))?;
    for (_, record) in bundle.designs.iter_mut() {
        if record.config_hash.is_none() {
            record.config_hash = Some(ctx.hash.clone());
        }
    }
    Ok(bundle)
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig, base_dir: &Path) -> Result<Self> {
        let grid = cfg.time;
        let (stations, imports) = match cfg.forward.provider {
            ProviderKind::Analytic => (build_grid(&cfg.grid)?, Vec::new()),
            ProviderKind::Import => {
                let mut imports = Vec::with_capacity(cfg.forward.manifests.len());
                for path in &cfg.forward.manifests {
                    let full = base_dir.join(path);
                    let imported = green_import(&full)?;
                    if imported.grid != grid {
                        return Err(Error::config(
                            "time",
                            format!("{} uses {:?}, config says {:?}", full.display(), imported.grid, grid),
                        ));
                    }
                    imports.push(Arc::new(imported));
                }
                let stations = imports[0].stations.clone();
                if let Some(i) = imports.iter().position(|imp| imp.stations != stations) {
                    return Err(Error::ScenarioForwardMissing {
                        scenario: cfg.forward.manifests[i].display().to_string(),
                        missing: stations.len().abs_diff(imports[i].stations.len()).max(1),
                    });
                }
                (stations, imports)
            }
        };
        if stations.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let k = cfg.k()?;
        if k > stations.len() {
            return Err(Error::KTooLarge { k, n: stations.len() });
        }
        Ok(Self {
            cfg,
            hash: cfg.hash(),
            k,
            grid,
            stations,
            prior: GaussianBelief::isotropic(cfg.prior_sigma())?,
            truth: cfg.truth()?,
            reference: cfg.reference_mt()?,
            corr_time: cfg.corr_time(),
            scoring_seeds: (0..cfg.scoring.realizations as u64)
                .map(|i| derive_seed(cfg.seed, "noise", i))
                .collect(),
            imports,
        })
    }

    fn green(&self, forward: &Forward, pos: usize) -> Result<GreenMatrix> {
        let st = &self.stations[pos];
        match forward {
            Forward::Analytic { source, medium } => green_analytic(st.id, source, medium, st.location(), self.grid),
            Forward::Imported(imp) => Ok(imp.greens[pos].clone()),
        }
    }

    fn velocity_forwards(&self) -> Vec<(String, Forward)> {
        match self.cfg.forward.provider {
            ProviderKind::Analytic => self
                .cfg
                .media
                .iter()
                .map(|m| {
                    (
                        m.label.clone(),
                        Forward::Analytic {
                            source: self.cfg.source,
                            medium: m.spec(),
                        },
                    )
                })
                .collect(),
            ProviderKind::Import => self
                .imports
                .iter()
                .zip(&self.cfg.forward.manifests)
                .enumerate()
                .map(|(i, (imp, path))| {
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    (format!("m{i}_{stem}"), Forward::Imported(imp.clone()))
                })
                .collect(),
        }
    }

    fn source_cloud(&self) -> Result<Vec<[f64; 3]>> {
        let sc = self.cfg.source_cloud.expect("validated");
        let src = &self.cfg.source;
        sample_source_cloud(
            &Bounds::centered(src.east_m, src.north_m, sc.half_width_m),
            src.depth_m,
            sc.count,
            derive_seed(self.cfg.seed, "source-cloud", 0),
        )
    }

    fn source_forwards(&self) -> Result<Vec<(String, Forward)>> {
        let medium = self.cfg.media[0].spec();
        Ok(self
            .source_cloud()?
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let source = SourceSpec {
                    east_m: p[0],
                    north_m: p[1],
                    depth_m: p[2],
                    ..self.cfg.source
                };
                (format!("src{i:02}"), Forward::Analytic { source, medium })
            })
            .collect())
    }

    /// Per-station information with the noise calibrated from the reference
    /// waveform. First pass: unit-variance information and waveform norms;
    /// the floor depends on the global RMS, so `σ` is fixed in a second pass.
    fn prepare(&self, label: String, kind: ScenarioKind, forward: Forward) -> Result<Prepared> {
        let unit = NoiseModel::new(1.0, self.corr_time, self.grid)?;
        let first: Vec<(Matrix6<f64>, f64)> = (0..self.stations.len())
            .into_par_iter()
            .map(|pos| {
                let g = self.green(&forward, pos)?;
                let h = forward::precision_summary(&g, &unit, None)?.h;
                Ok((h, g.response(&self.reference).norm()))
            })
            .collect::<Result<_>>()?;
        let energy: f64 = first.iter().map(|(_, norm)| norm * norm).sum();
        let rms = (energy / (first.len() * self.grid.rows()) as f64).sqrt();
        let params = NoiseCalibration {
            rel: self.cfg.noise.rel,
            corr_time: self.corr_time,
            sigma_floor: self.cfg.noise.floor_scale * rms.max(1.0),
        };
        let mut info = Vec::with_capacity(first.len());
        let mut sigma = Vec::with_capacity(first.len());
        let mut floored = Vec::with_capacity(first.len());
        for (pos, (h, norm)) in first.into_iter().enumerate() {
            let (s, flag) = forward::sigma_from_norm(norm, self.grid, &params)?;
            if s == 0.0 {
                return Err(Error::NumericalBreakdown(format!(
                    "station {} has a zero reference waveform and a zero noise floor",
                    self.stations[pos].id
                )));
            }
            info.push(h / (s * s));
            sigma.push(s);
            floored.push(flag);
        }
        Ok(Prepared {
            label,
            kind,
            forward,
            info,
            sigma,
            floored,
        })
    }

    fn prepare_all(&self, kind: ScenarioKind, forwards: Vec<(String, Forward)>) -> Result<Vec<Prepared>> {
        forwards
            .into_iter()
            .map(|(label, f)| self.prepare(label, kind, f))
            .collect()
    }

    fn noise(&self, prep: &Prepared, pos: usize) -> Result<NoiseModel> {
        Ok(NoiseModel::new(prep.sigma[pos], self.corr_time, self.grid)?.with_floor_flag(prep.floored[pos]))
    }

    fn position(&self, id: usize) -> Result<usize> {
        self.stations
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown station id {id}")))
    }

    fn candidates(&self, prep: &Prepared) -> Result<CandidateSet> {
        CandidateSet::new(self.stations.clone(), prep.info.clone())
    }

    /// Scores `ids` with inference under `model` and data from `data`.
    fn score(&self, label: String, ids: &[usize], model: &Prepared, data: Option<&Prepared>) -> Result<ScoreReport> {
        let mut bindings = BTreeMap::new();
        for &id in ids {
            let pos = self.position(id)?;
            let obs = StationObservation {
                model: self.green(&model.forward, pos)?,
                noise: self.noise(model, pos)?,
                data: match data {
                    Some(d) => Some(self.green(&d.forward, pos)?),
                    None => None,
                },
            };
            bindings.insert(id, obs);
        }
        evaluation::score_network(&label, ids, &bindings, &self.prior, &self.truth, &self.scoring_seeds)
    }

    fn provenance(&self, record: DesignRecord) -> DesignRecord {
        record.with_provenance(Some(self.hash.clone()), Some(self.cfg.seed))
    }

    fn bundle(
        &self,
        designs: Vec<(String, DesignRecord)>,
        scores: Vec<ScoreReport>,
        tables: Vec<(String, String)>,
        summary: serde_json::Value,
    ) -> RunBundle {
        let mut summary = summary;
        if let Some(obj) = summary.as_object_mut() {
            obj.insert("config_hash".into(), json!(self.hash));
            obj.insert("mode".into(), json!(self.cfg.mode.as_str()));
            obj.insert("seed".into(), json!(self.cfg.seed));
            obj.insert("candidates".into(), json!(self.stations.len()));
            obj.insert("k".into(), json!(self.k));
        }
        RunBundle {
            config_hash: self.hash.clone(),
            mode: self.cfg.mode,
            config_toml: self.cfg.to_toml_string(),
            designs,
            scores,
            tables,
            summary,
        }
    }

    fn run_greedy(&self, with_random: bool) -> Result<RunBundle> {
        let (label, forward) = self.velocity_forwards().swap_remove(0);
        let prep = self.prepare(label, ScenarioKind::VelocityModel, forward)?;
        let cands = self.candidates(&prep)?;
        let (record, fields) = design::greedy_select_traced(&cands, self.k, &self.prior)?;
        let record = self.provenance(record);
        let ids = record.station_ids();
        let joint = cands.network_eig(&ids, self.prior.cov())?;

        let mut tables = Vec::new();
        for (step, field) in fields.iter().enumerate() {
            let mut csv = String::from("station_id,east_m,north_m,eig\n");
            for (st, v) in self.stations.iter().zip(field) {
                match v {
                    Some(v) => csv.push_str(&format!("{},{},{},{v}\n", st.id, st.east_m, st.north_m)),
                    None => csv.push_str(&format!("{},{},{},\n", st.id, st.east_m, st.north_m)),
                }
            }
            tables.push((format!("eig_field_step{:02}.csv", step + 1), csv));
        }
        let mut scores = vec![self.score("greedy".into(), &ids, &prep, None)?];
        let mut designs = vec![("greedy".to_string(), record.clone())];
        let mut summary = json!({
            "scenario": prep.label,
            "selected": ids,
            "total_eig": record.total_eig(),
            "joint_eig": joint,
            "floored_stations": prep.floored.iter().filter(|f| **f).count(),
        });

        if with_random {
            let networks = self.cfg.random_baseline.expect("validated").networks;
            let randoms: Vec<(String, DesignRecord, ScoreReport)> = (0..networks)
                .into_par_iter()
                .map(|i| {
                    let seed = derive_seed(self.cfg.seed, "random-network", i as u64);
                    let rec = design::random_select(&cands, self.k, seed, &self.prior)?
                        .with_provenance(Some(self.hash.clone()), Some(seed));
                    let label = format!("random{i:03}");
                    let score = self.score(label.clone(), &rec.station_ids(), &prep, None)?;
                    Ok((label, rec, score))
                })
                .collect::<Result<_>>()?;

            let mut cmp = String::from("k,greedy_eig,random_min_eig,random_mean_eig,random_max_eig,greedy_dominates\n");
            let mut dominates_all = true;
            for k in 1..=self.k {
                let g = record.steps[k - 1].cum_eig;
                let vals: Vec<f64> = randoms.iter().map(|(_, r, _)| r.steps[k - 1].cum_eig).collect();
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let dominates = g >= max;
                dominates_all &= dominates;
                cmp.push_str(&format!("{k},{g},{min},{mean},{max},{dominates}\n"));
            }
            tables.push(("random_comparison.csv".into(), cmp));

            let mut crps = String::from("k,component,greedy_crps,random_mean_crps\n");
            for k in 0..=self.k {
                for c in 0..6 {
                    let g = scores[0].rows[k].crps[c];
                    let mean = randoms.iter().map(|(_, _, s)| s.rows[k].crps[c]).sum::<f64>() / randoms.len() as f64;
                    crps.push_str(&format!("{k},m{},{g},{mean}\n", c + 1));
                }
            }
            tables.push(("crps_comparison.csv".into(), crps));
            summary["random_networks"] = json!(networks);
            summary["greedy_dominates_random"] = json!(dominates_all);
            for (label, rec, score) in randoms {
                designs.push((label, rec));
                scores.push(score);
            }
        }
        Ok(self.bundle(designs, scores, tables, summary))
    }

    fn run_depth_study(&self) -> Result<RunBundle> {
        let depths = self.cfg.depth_study.as_ref().expect("validated").depths_m.clone();
        let medium = self.cfg.media[0].spec();
        let runs: Vec<(f64, DesignRecord, ScoreReport)> = depths
            .iter()
            .map(|&depth| {
                let source = SourceSpec {
                    depth_m: depth,
                    ..self.cfg.source
                };
                let prep = self.prepare(
                    format!("depth{depth}"),
                    ScenarioKind::SourceLocation,
                    Forward::Analytic { source, medium },
                )?;
                let rec = self.provenance(design::greedy_select(&self.candidates(&prep)?, self.k, &self.prior)?);
                let score = self.score(format!("depth_{depth}m"), &rec.station_ids(), &prep, None)?;
                Ok((depth, rec, score))
            })
            .collect::<Result<_>>()?;

        let (e0, n0) = (self.cfg.source.east_m, self.cfg.source.north_m);
        let radius = |s: &design::DesignStep| (s.east_m - e0).hypot(s.north_m - n0);
        let mut csv = String::from("depth_m,first_radius_m,mean_radius_m,min_radius_m,max_radius_m\n");
        let mut means = Vec::new();
        for (depth, rec, _) in &runs {
            let ring: Vec<f64> = rec.steps.iter().skip(1).map(radius).collect();
            let first = radius(&rec.steps[0]);
            if ring.is_empty() {
                csv.push_str(&format!("{depth},{first},,,\n"));
                continue;
            }
            let mean = ring.iter().sum::<f64>() / ring.len() as f64;
            let min = ring.iter().copied().fold(f64::INFINITY, f64::min);
            let max = ring.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            means.push((*depth, mean));
            csv.push_str(&format!("{depth},{first},{mean},{min},{max}\n"));
        }
        let mut sorted = means.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let increasing = sorted.len() >= 2 && sorted.windows(2).all(|w| w[1].1 > w[0].1);
        let summary = json!({
            "depths_m": depths,
            "mean_ring_radius_m": means.iter().map(|m| m.1).collect::<Vec<_>>(),
            "radius_increases_with_depth": increasing,
        });
        let mut designs = Vec::new();
        let mut scores = Vec::new();
        for (depth, rec, score) in runs {
            designs.push((format!("depth_{depth}m"), rec));
            scores.push(score);
        }
        Ok(self.bundle(designs, scores, vec![("depth_radii.csv".into(), csv)], summary))
    }

    /// Scenarios for the consensus / misspecification studies and how many
    /// of the leading ones drive the consensus design.
    fn scenario_family(&self, kind: ScenarioKind) -> Result<(Vec<Prepared>, usize)> {
        match kind {
            ScenarioKind::VelocityModel => {
                let preps = self.prepare_all(kind, self.velocity_forwards())?;
                let n = preps.len();
                Ok((preps, n))
            }
            ScenarioKind::SourceLocation => {
                let preps = self.prepare_all(kind, self.source_forwards()?)?;
                Ok((preps, self.cfg.source_cloud.expect("validated").design_count))
            }
        }
    }

    /// Consensus network over the leading `n_design` scenarios plus one
    /// greedy network per scenario.
    fn networks(&self, preps: &[Prepared], n_design: usize) -> Result<Vec<(String, DesignRecord)>> {
        let set = ScenarioSet::new(
            self.stations.clone(),
            preps[..n_design]
                .iter()
                .map(|p| Scenario {
                    label: p.label.clone(),
                    kind: p.kind,
                    info: p.info.clone(),
                })
                .collect(),
        )?;
        let mut out = vec![(
            "consensus".to_string(),
            self.provenance(design::consensus_select(&set, self.k, &self.prior)?),
        )];
        let greedy: Vec<(String, DesignRecord)> = preps
            .par_iter()
            .map(|p| {
                let rec = design::greedy_select(&self.candidates(p)?, self.k, &self.prior)?;
                Ok((format!("greedy_{}", p.label), self.provenance(rec)))
            })
            .collect::<Result<_>>()?;
        out.extend(greedy);
        Ok(out)
    }

    fn run_consensus(&self, kind: ScenarioKind) -> Result<RunBundle> {
        let (preps, n_design) = self.scenario_family(kind)?;
        let designs = self.networks(&preps, n_design)?;
        let jobs: Vec<(usize, usize)> = (0..designs.len())
            .flat_map(|d| (0..preps.len()).map(move |s| (d, s)))
            .collect();
        let scores: Vec<ScoreReport> = jobs
            .par_iter()
            .map(|&(d, s)| {
                let (label, rec) = &designs[d];
                self.score(
                    format!("{label}@{}", preps[s].label),
                    &rec.station_ids(),
                    &preps[s],
                    None,
                )
            })
            .collect::<Result<_>>()?;

        let mut tables = Vec::new();
        if kind == ScenarioKind::SourceLocation {
            let mut csv = String::from("index,label,east_m,north_m,depth_m,in_design\n");
            for (i, p) in preps.iter().enumerate() {
                if let Forward::Analytic { source, .. } = &p.forward {
                    csv.push_str(&format!(
                        "{i},{},{},{},{},{}\n",
                        p.label,
                        source.east_m,
                        source.north_m,
                        source.depth_m,
                        i < n_design
                    ));
                }
            }
            tables.push(("source_cloud.csv".into(), csv));
        }
        // Final-k posterior metrics averaged over evaluation scenarios.
        let mut csv = String::from("network,mean_trace_risk,mean_logdet_pos,mean_crps\n");
        let mut means = serde_json::Map::new();
        for (label, _) in &designs {
            let rows: Vec<_> = scores
                .iter()
                .filter(|s| s.label.split('@').next() == Some(label.as_str()))
                .map(|s| s.rows.last().expect("k+1 rows"))
                .collect();
            let n = rows.len() as f64;
            let tr = rows.iter().map(|r| r.trace_risk).sum::<f64>() / n;
            let ld = rows.iter().map(|r| r.logdet_pos).sum::<f64>() / n;
            let cr = rows.iter().map(|r| r.crps.iter().sum::<f64>() / 6.0).sum::<f64>() / n;
            csv.push_str(&format!("{label},{tr},{ld},{cr}\n"));
            means.insert(label.clone(), json!(tr));
        }
        tables.push(("network_summary.csv".into(), csv));
        let summary = json!({
            "scenarios": preps.iter().map(|p| p.label.clone()).collect::<Vec<_>>(),
            "design_scenarios": n_design,
            "consensus": designs[0].1.station_ids(),
            "mean_trace_risk_at_k": means,
        });
        Ok(self.bundle(designs, scores, tables, summary))
    }

    fn run_misspec(&self) -> Result<RunBundle> {
        let ms = self.cfg.misspec.as_ref().expect("validated");
        let kind = match ms.scenarios {
            MisspecScenarios::Velocity => ScenarioKind::VelocityModel,
            MisspecScenarios::Source => ScenarioKind::SourceLocation,
        };
        let (preps, n_design) = self.scenario_family(kind)?;
        let designs = self.networks(&preps, n_design)?;
        let n = preps.len();
        let pairs: Vec<[usize; 2]> = match &ms.pairs {
            Some(p) => p.clone(),
            None => (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| [i, j]))
                .collect(),
        };

        let used: BTreeSet<usize> = designs.iter().flat_map(|(_, d)| d.station_ids()).collect();
        let used: Vec<usize> = used.into_iter().collect();
        // Green matrices of every used station under every scenario.
        let greens: Vec<BTreeMap<usize, GreenMatrix>> = preps
            .par_iter()
            .map(|p| {
                used.iter()
                    .map(|&id| Ok((id, self.green(&p.forward, self.position(id)?)?)))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;

        // Risk per (pair, network, k).
        let risks: Vec<Vec<Vec<f64>>> = pairs
            .par_iter()
            .map(|&[i, j]| {
                let mut per_station = BTreeMap::new();
                for &id in &used {
                    let pos = self.position(id)?;
                    let noise = self.noise(&preps[i], pos)?;
                    let (gm, gd) = (&greens[i][&id], &greens[j][&id]);
                    let pair = if i == j {
                        MisspecPair::well_specified(forward::precision_summary(gm, &noise, None)?.h)
                    } else {
                        MisspecPair::from_greens(gm, gd, &noise)?
                    };
                    per_station.insert(id, pair);
                }
                designs
                    .iter()
                    .map(|(_, rec)| {
                        let mut acc = MisspecPair::well_specified(Matrix6::zeros());
                        rec.station_ids()
                            .iter()
                            .map(|id| {
                                acc = acc.clone() + per_station[id].clone();
                                let pos = inference::posterior_update(&self.prior, &PrecisionSummary::from_h(acc.h))?;
                                evaluation::bayes_risk_misspec(pos.cov(), &self.prior, &acc)
                            })
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;

        let mut csv = String::from("model,data,network,k,consensus_risk,network_risk,difference\n");
        let mut by_k: Vec<Vec<f64>> = vec![Vec::new(); self.k];
        for (pi, &[i, j]) in pairs.iter().enumerate() {
            for (d, (label, _)) in designs.iter().enumerate().skip(1) {
                for k in 1..=self.k {
                    let c = risks[pi][0][k - 1];
                    let g = risks[pi][d][k - 1];
                    let diff = c - g;
                    by_k[k - 1].push(diff);
                    csv.push_str(&format!(
                        "{},{},{label},{k},{c},{g},{diff}\n",
                        preps[i].label, preps[j].label
                    ));
                }
            }
        }
        let mut summary_csv = String::from("k,count,mean,min,q25,median,q75,max,fraction_consensus_lower\n");
        for (k, diffs) in by_k.iter_mut().enumerate() {
            diffs.sort_by(f64::total_cmp);
            let count = diffs.len();
            let mean = diffs.iter().sum::<f64>() / count as f64;
            let lower = diffs.iter().filter(|d| **d < 0.0).count() as f64 / count as f64;
            summary_csv.push_str(&format!(
                "{},{count},{mean},{},{},{},{},{},{lower}\n",
                k + 1,
                diffs[0],
                quantile(diffs, 0.25),
                quantile(diffs, 0.5),
                quantile(diffs, 0.75),
                diffs[count - 1]
            ));
        }
        let summary = json!({
            "scenarios": preps.iter().map(|p| p.label.clone()).collect::<Vec<_>>(),
            "pairs": pairs,
            "networks": designs.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>(),
            "rows": pairs.len() * (designs.len() - 1) * self.k,
        });
        let tables = vec![
            ("misspec_differences.csv".into(), csv),
            ("misspec_summary.csv".into(), summary_csv),
        ];
        Ok(self.bundle(designs, Vec::new(), tables, summary))
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
