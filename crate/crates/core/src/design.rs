//! Network selection: greedy, consensus greedy, random baseline and the
//! exhaustive oracle.
//!
//! All selectors work on cached per-station information matrices `H`, so a
//! greedy step is one `O(n·6³)` sweep over the remaining candidates. Sweeps
//! run in parallel against an immutable covariance snapshot; the argmax and
//! the belief update are sequential. Exact ties go to the lowest station id.

use std::collections::HashSet;

use itertools::Itertools;
use nalgebra::{Cholesky, Matrix6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Station;
use crate::inference::{self, GaussianBelief};

/// Upper bound on the number of subsets `exhaustive_select` will visit.
pub const EXHAUSTIVE_LIMIT: f64 = 1e6;

/// Candidate stations bound to a single forward scenario.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    stations: Vec<Station>,
    info: Vec<Matrix6<f64>>,
}

impl CandidateSet {
    pub fn new(stations: Vec<Station>, info: Vec<Matrix6<f64>>) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        check_unique(&stations)?;
        if info.len() != stations.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} stations but {} information matrices",
                stations.len(),
                info.len()
            )));
        }
        Ok(Self { stations, info })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn info(&self) -> &[Matrix6<f64>] {
        &self.info
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    /// Summed information of the given station ids.
    pub fn network_info(&self, ids: &[usize]) -> Result<Matrix6<f64>> {
        ids.iter().try_fold(Matrix6::zeros(), |acc, id| {
            let pos = self
                .position(*id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown station id {id}")))?;
            Ok(acc + self.info[pos])
        })
    }

    /// Joint EIG of a set of station ids under `prior_cov`.
    pub fn network_eig(&self, ids: &[usize], prior_cov: &Matrix6<f64>) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::EmptyNetwork);
        }
        inference::eig(&self.network_info(ids)?, prior_cov)
    }
}

fn check_unique(stations: &[Station]) -> Result<()> {
    let mut seen = HashSet::with_capacity(stations.len());
    for s in stations {
        if !seen.insert(s.id) {
            return Err(Error::DuplicateStation(s.id));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    VelocityModel,
    SourceLocation,
}

/// One plausible forward model: information matrices aligned with the
/// shared station list.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub label: String,
    pub kind: ScenarioKind,
    pub info: Vec<Matrix6<f64>>,
}

/// Candidates shared by several forward scenarios.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    stations: Vec<Station>,
    scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn new(stations: Vec<Station>, scenarios: Vec<Scenario>) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        check_unique(&stations)?;
        if scenarios.is_empty() {
            return Err(Error::InvalidInput("scenario set must not be empty".into()));
        }
        for s in &scenarios {
            if s.info.len() != stations.len() {
                return Err(Error::ScenarioForwardMissing {
                    scenario: s.label.clone(),
                    missing: stations.len().saturating_sub(s.info.len()).max(1),
                });
            }
        }
        Ok(Self { stations, scenarios })
    }

    pub fn single(cands: &CandidateSet, label: &str, kind: ScenarioKind) -> Self {
        Self {
            stations: cands.stations.clone(),
            scenarios: vec![Scenario {
                label: label.to_string(),
                kind,
                info: cands.info.clone(),
            }],
        }
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    /// The candidate set of scenario `index`.
    pub fn candidate_set(&self, index: usize) -> CandidateSet {
        CandidateSet {
            stations: self.stations.clone(),
            info: self.scenarios[index].info.clone(),
        }
    }
}

/// One selection step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignStep {
    pub rank: usize,
    pub station_id: usize,
    pub east_m: f64,
    pub north_m: f64,
    pub eig_increment: f64,
    pub cum_eig: f64,
    /// Posterior covariance after the step, one per scenario.
    #[serde(skip)]
    pub posterior_covs: Vec<Matrix6<f64>>,
}

/// Ordered result of a selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub steps: Vec<DesignStep>,
}

impl DesignRecord {
    pub fn station_ids(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.station_id).collect()
    }

    pub fn total_eig(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cum_eig)
    }

    pub fn with_provenance(mut self, config_hash: Option<String>, seed: Option<u64>) -> Self {
        self.config_hash = config_hash;
        self.seed = seed;
        self
    }

    /// JSON export: `{config_hash, seed, steps: [{rank, station_id, east_m,
    /// north_m, eig_increment, cum_eig}]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("design record serializes")
    }
}

/// EIG of every candidate position under one covariance. Positions listed in
/// `taken` get `None`.
pub fn eig_field(info: &[Matrix6<f64>], cov: &Matrix6<f64>, taken: &[bool]) -> Result<Vec<Option<f64>>> {
    let l = Cholesky::new(*cov).ok_or(Error::NonSpdPrior)?.unpack();
    info.par_iter()
        .zip(taken.par_iter())
        .map(|(h, &t)| {
            if t {
                Ok(None)
            } else {
                inference::eig_with_factor(h, &l).map(Some)
            }
        })
        .collect()
}

/// Index of the maximal entry; ties resolve to the lowest station id.
fn argmax(values: &[Option<f64>], stations: &[Station]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        let Some(v) = *v else { continue };
        best = match best {
            None => Some((i, v)),
            Some((bi, bv)) => {
                if v > bv || (v == bv && stations[i].id < stations[bi].id) {
                    Some((i, v))
                } else {
                    Some((bi, bv))
                }
            }
        };
    }
    best.map(|(i, _)| i)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    Ok(())
}

/// Greedy selection of `k` stations. Only the covariance of `prior` is
/// used: the mean is irrelevant to the information gain.
pub fn greedy_select(cands: &CandidateSet, k: usize, prior: &GaussianBelief) -> Result<DesignRecord> {
    Ok(consensus_core(&cands.stations, &[&cands.info], k, prior, false)?.0)
}

/// [`greedy_select`] that also returns the EIG field evaluated at every step
/// (`None` for already-selected stations).
pub fn greedy_select_traced(
    cands: &CandidateSet,
    k: usize,
    prior: &GaussianBelief,
) -> Result<(DesignRecord, Vec<Vec<Option<f64>>>)> {
    consensus_core(&cands.stations, &[&cands.info], k, prior, true)
}

/// Greedy selection on the arithmetic mean of the per-scenario EIG; each
/// scenario keeps its own covariance.
pub fn consensus_select(scenarios: &ScenarioSet, k: usize, prior: &GaussianBelief) -> Result<DesignRecord> {
    let infos: Vec<&[Matrix6<f64>]> = scenarios.scenarios.iter().map(|s| s.info.as_slice()).collect();
    Ok(consensus_core(&scenarios.stations, &infos, k, prior, false)?.0)
}

fn consensus_core(
    stations: &[Station],
    infos: &[&[Matrix6<f64>]],
    k: usize,
    prior: &GaussianBelief,
    trace: bool,
) -> Result<(DesignRecord, Vec<Vec<Option<f64>>>)> {
    let n = stations.len();
    check_k(k, n)?;
    let n_scen = infos.len() as f64;
    let mut covs = vec![*prior.cov(); infos.len()];
    let mut taken = vec![false; n];
    let mut steps = Vec::with_capacity(k);
    let mut fields = Vec::new();
    let mut cum = 0.0;

    for rank in 1..=k {
        let mut mean_field: Vec<Option<f64>> = vec![Some(0.0); n];
        for (info, cov) in infos.iter().zip(&covs) {
            let field = eig_field(info, cov, &taken)?;
            for (m, v) in mean_field.iter_mut().zip(field) {
                *m = match (*m, v) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                };
            }
        }
        if infos.len() > 1 {
            mean_field.iter_mut().flatten().for_each(|v| *v /= n_scen);
        }
        let best = argmax(&mean_field, stations).ok_or(Error::EmptyCandidates)?;
        let increment = mean_field[best].expect("argmax is an open candidate");
        taken[best] = true;
        for (info, cov) in infos.iter().zip(covs.iter_mut()) {
            *cov = inference::posterior_cov(cov, &info[best])?;
        }
        cum += increment;
        let st = stations[best];
        steps.push(DesignStep {
            rank,
            station_id: st.id,
            east_m: st.east_m,
            north_m: st.north_m,
            eig_increment: increment,
            cum_eig: cum,
            posterior_covs: covs.clone(),
        });
        if trace {
            fields.push(mean_field);
        }
    }
    Ok((
        DesignRecord {
            config_hash: None,
            seed: None,
            steps,
        },
        fields,
    ))
}

/// Evaluates a fixed station order under sequential prior updating.
pub fn record_for_sequence(cands: &CandidateSet, ids: &[usize], prior: &GaussianBelief) -> Result<DesignRecord> {
    let mut cov = *prior.cov();
    let mut cum = 0.0;
    let mut steps = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let pos = cands
            .position(*id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown station id {id}")))?;
        let h = &cands.info[pos];
        let increment = inference::eig(h, &cov)?;
        cov = inference::posterior_cov(&cov, h)?;
        cum += increment;
        let st = cands.stations[pos];
        steps.push(DesignStep {
            rank: i + 1,
            station_id: st.id,
            east_m: st.east_m,
            north_m: st.north_m,
            eig_increment: increment,
            cum_eig: cum,
            posterior_covs: vec![cov],
        });
    }
    Ok(DesignRecord {
        config_hash: None,
        seed: None,
        steps,
    })
}

/// Uniform draw of `k` distinct stations; increments are evaluated in draw
/// order.
pub fn random_select(cands: &CandidateSet, k: usize, seed: u64, prior: &GaussianBelief) -> Result<DesignRecord> {
    check_k(k, cands.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = rand::seq::index::sample(&mut rng, cands.len(), k)
        .into_iter()
        .map(|pos| cands.stations[pos].id)
        .collect();
    Ok(record_for_sequence(cands, &ids, prior)?.with_provenance(None, Some(seed)))
}

/// `C(n, k)` as a float, for the exhaustive-search guard.
pub fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact maximizer of the joint EIG over all `k`-subsets. Subsets are
/// visited in lexicographic order of sorted station ids; the first maximum
/// wins.
pub fn exhaustive_select(cands: &CandidateSet, k: usize, prior: &GaussianBelief) -> Result<(Vec<usize>, f64)> {
    let n = cands.len();
    check_k(k, n)?;
    let count = binomial(n, k);
    if count > EXHAUSTIVE_LIMIT {
        return Err(Error::CombinatorialBlowup {
            n,
            k,
            count,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let l = Cholesky::new(*prior.cov()).ok_or(Error::NonSpdPrior)?.unpack();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&p| cands.stations[p].id);

    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in order.iter().copied().combinations(k) {
        let h = subset.iter().fold(Matrix6::zeros(), |acc, &p| acc + cands.info[p]);
        let value = inference::eig_with_factor(&h, &l)?;
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((subset, value));
        }
    }
    let (subset, value) = best.expect("at least one subset");
    Ok((subset.iter().map(|&p| cands.stations[p].id).collect(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic(n: usize, seed: u64) -> CandidateSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stations: Vec<Station> = (0..n)
            .map(|i| Station {
                id: i,
                east_m: i as f64,
                north_m: 0.0,
            })
            .collect();
        let info = (0..n)
            .map(|_| {
                let g = nalgebra::SMatrix::<f64, 3, 6>::from_fn(|_, _| rng.random_range(-1.0..1.0));
                g.transpose() * g
            })
            .collect();
        CandidateSet::new(stations, info).unwrap()
    }

    fn prior() -> GaussianBelief {
        GaussianBelief::isotropic(0.5).unwrap()
    }

    #[test]
    fn k_bounds() {
        let c = synthetic(4, 1);
        assert!(matches!(
            greedy_select(&c, 5, &prior()),
            Err(Error::KTooLarge { k: 5, n: 4 })
        ));
        assert!(greedy_select(&c, 0, &prior()).is_err());
        assert!(matches!(
            random_select(&c, 5, 0, &prior()),
            Err(Error::KTooLarge { .. })
        ));
        assert!(matches!(CandidateSet::new(vec![], vec![]), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let stations = vec![
            Station {
                id: 9,
                east_m: 0.0,
                north_m: 0.0,
            },
            Station {
                id: 3,
                east_m: 1.0,
                north_m: 0.0,
            },
            Station {
                id: 5,
                east_m: 2.0,
                north_m: 0.0,
            },
        ];
        let h = Matrix6::identity();
        let c = CandidateSet::new(stations, vec![h, h, h * 0.5]).unwrap();
        let rec = greedy_select(&c, 1, &prior()).unwrap();
        assert_eq!(rec.station_ids(), vec![3]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = Station {
            id: 1,
            east_m: 0.0,
            north_m: 0.0,
        };
        assert!(matches!(
            CandidateSet::new(vec![s, s], vec![Matrix6::zeros(); 2]),
            Err(Error::DuplicateStation(1))
        ));
    }

    #[test]
    fn full_random_draw_is_permutation() {
        let c = synthetic(7, 2);
        let mut ids = random_select(&c, 7, 5, &prior()).unwrap().station_ids();
        ids.sort();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn exhaustive_edge_cases() {
        let c = synthetic(10, 3);
        let first = greedy_select(&c, 1, &prior()).unwrap().station_ids()[0];
        assert_eq!(exhaustive_select(&c, 1, &prior()).unwrap().0, vec![first]);
        let (all, _) = exhaustive_select(&c, 10, &prior()).unwrap();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let big = synthetic(60, 4);
        assert!(matches!(
            exhaustive_select(&big, 6, &prior()),
            Err(Error::CombinatorialBlowup { .. })
        ));
    }

    #[test]
    fn binomial_counts() {
        assert_eq!(binomial(12, 3), 220.0);
        assert_eq!(binomial(10, 2), 45.0);
        assert_eq!(binomial(5, 5), 1.0);
        assert_eq!(binomial(5, 0), 1.0);
    }

    #[test]
    fn scenario_set_requires_full_coverage() {
        let c = synthetic(4, 5);
        let short = Scenario {
            label: "short".into(),
            kind: ScenarioKind::VelocityModel,
            info: c.info()[..3].to_vec(),
        };
        assert!(matches!(
            ScenarioSet::new(c.stations().to_vec(), vec![short]),
            Err(Error::ScenarioForwardMissing { .. })
        ));
    }
}
