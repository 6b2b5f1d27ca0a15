//! Experiment configuration, validation and hashing.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{MediumSpec, SourceSpec, TimeGrid};
use crate::inference::{MomentTensor, DEFAULT_SIGMA_P, TRUE_MT};

use super::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Greedy,
    ConsensusVelocity,
    ConsensusSource,
    DepthStudy,
    MisspecSweep,
    RandomBaseline,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Greedy => "greedy",
            Mode::ConsensusVelocity => "consensus-velocity",
            Mode::ConsensusSource => "consensus-source",
            Mode::DepthStudy => "depth-study",
            Mode::MisspecSweep => "misspec-sweep",
            Mode::RandomBaseline => "random-baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma_p: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma_p: DEFAULT_SIGMA_P,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Noise-to-signal ratio in the L2 sense.
    #[serde(default = "default_rel")]
    pub rel: f64,
    /// Correlation time; defaults to the trace duration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr_time_s: Option<f64>,
    /// `sigma_floor = floor_scale · max(1, global RMS of reference waveforms)`.
    #[serde(default = "default_floor_scale")]
    pub floor_scale: f64,
    /// Moment tensor defining the calibration waveform.
    #[serde(default = "default_mt")]
    pub reference_mt: [f64; 6],
}

fn default_rel() -> f64 {
    0.1
}

fn default_floor_scale() -> f64 {
    1e-12
}

fn default_mt() -> [f64; 6] {
    TRUE_MT
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            rel: default_rel(),
            corr_time_s: None,
            floor_scale: default_floor_scale(),
            reference_mt: default_mt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMedium {
    pub label: String,
    pub vp: f64,
    pub vs: f64,
    pub rho: f64,
}

impl NamedMedium {
    pub fn spec(&self) -> MediumSpec {
        MediumSpec {
            vp: self.vp,
            vs: self.vs,
            rho: self.rho,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    #[default]
    Analytic,
    Import,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    #[serde(default)]
    pub provider: ProviderKind,
    /// One manifest per velocity scenario when `provider = "import"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manifests: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    /// Number of noise realizations averaged in CRPS scoring.
    pub realizations: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { realizations: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBaselineConfig {
    pub networks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthStudyConfig {
    pub depths_m: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceCloudConfig {
    /// Half-width of the square of epicenters around the nominal source.
    pub half_width_m: f64,
    /// Locations drawn.
    pub count: usize,
    /// Leading locations used to build the consensus network.
    pub design_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisspecScenarios {
    Velocity,
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisspecConfig {
    pub scenarios: MisspecScenarios,
    /// Ordered `(model, data)` scenario index pairs; all `i ≠ j` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<[usize; 2]>>,
}

/// Everything a run needs. Field order in the file is irrelevant to the
/// hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prior: PriorConfig,
    pub grid: GridSpec,
    pub time: TimeGrid,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub source: SourceSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub media: Vec<NamedMedium>,
    #[serde(default = "default_mt")]
    pub truth_mt: [f64; 6],
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_baseline: Option<RandomBaselineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_study: Option<DepthStudyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_cloud: Option<SourceCloudConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misspec: Option<MisspecConfig>,
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be a finite value > 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn k(&self) -> Result<usize> {
        match self.k {
            Some(k) if k >= 1 => Ok(k),
            Some(_) => Err(Error::config("k", "must be at least 1")),
            None => Err(Error::config("k", "is required")),
        }
    }

    pub fn prior_sigma(&self) -> f64 {
        self.prior.sigma_p
    }

    pub fn corr_time(&self) -> f64 {
        self.noise.corr_time_s.unwrap_or_else(|| self.time.duration())
    }

    pub fn truth(&self) -> Result<MomentTensor> {
        MomentTensor::new(self.truth_mt).map_err(|e| Error::config("truth_mt", e.to_string()))
    }

    pub fn reference_mt(&self) -> Result<MomentTensor> {
        MomentTensor::new(self.noise.reference_mt).map_err(|e| Error::config("noise.reference_mt", e.to_string()))
    }

    /// Checks cross-field consistency for the selected mode; never runs any
    /// forward computation.
    pub fn validate(&self) -> Result<()> {
        let k = self.k()?;
        positive("prior.sigma_p", self.prior.sigma_p)?;
        self.time.validate().map_err(|e| Error::config("time", e.to_string()))?;
        if !(self.noise.rel > 0.0 && self.noise.rel <= 1.0) {
            return Err(Error::config(
                "noise.rel",
                format!("must lie in (0, 1], got {}", self.noise.rel),
            ));
        }
        if let Some(t) = self.noise.corr_time_s {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::config("noise.corr_time_s", format!("must be >= 0, got {t}")));
            }
        }
        if !(self.noise.floor_scale.is_finite() && self.noise.floor_scale >= 0.0) {
            return Err(Error::config("noise.floor_scale", "must be >= 0"));
        }
        self.reference_mt()?;
        self.truth()?;
        self.source
            .validate()
            .map_err(|e| Error::config("source", e.to_string()))?;
        if self.scoring.realizations == 0 {
            return Err(Error::config("scoring.realizations", "must be at least 1"));
        }

        match self.forward.provider {
            ProviderKind::Analytic => {
                self.grid.validate()?;
                let n = self.grid.len()?;
                if k > n {
                    return Err(Error::config("k", format!("k = {k} exceeds the {n} grid candidates")));
                }
                if self.media.is_empty() {
                    return Err(Error::config("media", "at least one medium is required"));
                }
                for (i, m) in self.media.iter().enumerate() {
                    m.spec()
                        .validate()
                        .map_err(|e| Error::config(format!("media[{i}]"), e.to_string()))?;
                }
                let mut labels: Vec<&str> = self.media.iter().map(|m| m.label.as_str()).collect();
                labels.sort_unstable();
                if labels.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::config("media", "labels must be unique"));
                }
            }
            ProviderKind::Import => {
                if self.forward.manifests.is_empty() {
                    return Err(Error::config(
                        "forward.manifests",
                        "import provider needs at least one manifest",
                    ));
                }
                if matches!(self.mode, Mode::DepthStudy | Mode::ConsensusSource)
                    || self
                        .misspec
                        .as_ref()
                        .is_some_and(|m| m.scenarios == MisspecScenarios::Source)
                {
                    return Err(Error::config(
                        "forward.provider",
                        "source-geometry studies require the analytic provider",
                    ));
                }
            }
        }

        match self.mode {
            Mode::RandomBaseline => {
                let rb = self
                    .random_baseline
                    .ok_or_else(|| Error::config("random_baseline", "required for random-baseline mode"))?;
                if rb.networks == 0 {
                    return Err(Error::config("random_baseline.networks", "must be at least 1"));
                }
            }
            Mode::DepthStudy => {
                let ds = self
                    .depth_study
                    .as_ref()
                    .ok_or_else(|| Error::config("depth_study", "required for depth-study mode"))?;
                if ds.depths_m.is_empty() {
                    return Err(Error::config("depth_study.depths_m", "must list at least one depth"));
                }
                for d in &ds.depths_m {
                    positive("depth_study.depths_m", *d)?;
                }
            }
            Mode::ConsensusSource => self.validate_cloud()?,
            Mode::MisspecSweep => {
                let ms = self
                    .misspec
                    .as_ref()
                    .ok_or_else(|| Error::config("misspec", "required for misspec-sweep mode"))?;
                let n = match ms.scenarios {
                    MisspecScenarios::Velocity => self.scenario_count_velocity(),
                    MisspecScenarios::Source => {
                        self.validate_cloud()?;
                        self.source_cloud.expect("validated").count
                    }
                };
                match &ms.pairs {
                    Some(pairs) => {
                        if pairs.is_empty() {
                            return Err(Error::config("misspec.pairs", "must not be empty"));
                        }
                        if let Some(p) = pairs.iter().find(|p| p[0] >= n || p[1] >= n) {
                            return Err(Error::config(
                                "misspec.pairs",
                                format!("pair {p:?} references a scenario outside 0..{n}"),
                            ));
                        }
                    }
                    None => {
                        if n < 2 {
                            return Err(Error::config("misspec.scenarios", "need at least two scenarios"));
                        }
                    }
                }
            }
            Mode::Greedy | Mode::ConsensusVelocity => {}
        }
        Ok(())
    }

    fn validate_cloud(&self) -> Result<()> {
        let sc = self
            .source_cloud
            .ok_or_else(|| Error::config("source_cloud", "required for source-location scenarios"))?;
        positive("source_cloud.half_width_m", sc.half_width_m)?;
        if sc.count == 0 {
            return Err(Error::config("source_cloud.count", "must be at least 1"));
        }
        if sc.design_count == 0 || sc.design_count > sc.count {
            return Err(Error::config(
                "source_cloud.design_count",
                format!("must lie in 1..={}, got {}", sc.count, sc.design_count),
            ));
        }
        Ok(())
    }

    pub(crate) fn scenario_count_velocity(&self) -> usize {
        match self.forward.provider {
            ProviderKind::Analytic => self.media.len(),
            ProviderKind::Import => self.forward.manifests.len(),
        }
    }

    /// Canonical JSON: object keys sorted recursively, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes to JSON");
        let mut out = String::new();
        write_canonical(&value, &mut out);
        out
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Applies a `dotted.path=value` override. The value is parsed as a TOML
    /// literal (falling back to a bare string) and the result is re-checked
    /// against the schema, so unknown keys and wrong types are rejected.
    pub fn apply_override(&self, assignment: &str) -> Result<Self> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        let path = path.trim();
        let raw = raw.trim();
        if path.is_empty() {
            return Err(Error::config(assignment, "override key is empty"));
        }
        let value = parse_toml_value(raw);
        let mut doc = toml::Value::try_from(self).expect("config converts to TOML");
        let mut cursor = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::config(path, format!("`{}` is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            cursor = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
        }
        let text = toml::to_string(&doc).expect("TOML document serializes");
        toml::from_str(&text).map_err(|e| Error::config(path, message_line(&e.to_string())))
    }
}

/// TOML errors put the source snippet first and the message last.
fn message_line(s: &str) -> String {
    s.lines()
        .rfind(|l| !l.trim().is_empty())
        .unwrap_or(s)
        .trim()
        .to_string()
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string key"));
                out.push(':');
                write_canonical(&map[key.as_str()], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
