//! Test-side oracles: plain dense linear algebra that shares no code with
//! the library's Cholesky/tridiagonal paths.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use oedmt::evaluation::{bayes_risk_misspec, MisspecPair};
use oedmt::forward::{GreenMatrix, NoiseModel, Station, TimeGrid};
use oedmt::inference::{self, GaussianBelief, PrecisionSummary};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn gj_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| a[(i, j)]).collect();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p != 0.0, "singular matrix");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        let pivot_row = m[col].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != col {
                let f = row[col];
                if f != 0.0 {
                    for (v, pv) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    DMatrix::from_fn(n, n, |i, j| m[i][n + j])
}

pub fn gj_inverse6(a: &Matrix6<f64>) -> Matrix6<f64> {
    let d = gj_inverse(&DMatrix::from_iterator(6, 6, a.iter().copied()));
    Matrix6::from_iterator(d.iter().copied())
}

/// `log|det A|` via LU with partial pivoting.
pub fn lu_logdet(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut m = a.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[(x, col)].abs().total_cmp(&m[(y, col)].abs()))
            .unwrap();
        m.swap_rows(col, piv);
        let p = m[(col, col)];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = m[(r, col)] / p;
            for c in col..n {
                m[(r, c)] -= f * m[(col, c)];
            }
        }
    }
    acc
}

pub fn lu_logdet6(a: &Matrix6<f64>) -> f64 {
    lu_logdet(&DMatrix::from_iterator(6, 6, a.iter().copied()))
}

/// Dense exponential kernel of one component, `σ²exp(−|tᵢ−tⱼ|/T)`.
pub fn kernel(n_t: usize, dt: f64, sigma: f64, corr_time: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n_t, n_t, |i, j| {
        let lag = (i as f64 - j as f64).abs() * dt;
        let c = if corr_time == 0.0 {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else {
            (-lag / corr_time).exp()
        };
        sigma * sigma * c
    })
}

/// Block-diagonal 3-component noise precision from a dense inverse.
pub fn dense_precision(n_t: usize, dt: f64, sigma: f64, corr_time: f64) -> DMatrix<f64> {
    let inv = gj_inverse(&kernel(n_t, dt, sigma, corr_time));
    let mut q = DMatrix::zeros(3 * n_t, 3 * n_t);
    for c in 0..3 {
        q.view_mut((c * n_t, c * n_t), (n_t, n_t)).copy_from(&inv);
    }
    q
}

pub fn random_green(rng: &mut impl Rng, id: usize, n_t: usize) -> GreenMatrix {
    GreenMatrix::new(id, DMatrix::from_fn(3 * n_t, 6, |_, _| normal(rng))).unwrap()
}

/// Random SPD prior with a random mean.
pub fn random_prior(rng: &mut impl Rng) -> GaussianBelief {
    let a = Matrix6::from_fn(|_, _| normal(rng));
    let cov = a * a.transpose() * 0.05 + Matrix6::identity() * 0.05;
    let mean = Vector6::from_fn(|_, _| 0.3 * normal(rng));
    GaussianBelief::new(mean, cov).unwrap()
}

/// A station with random Green matrix and random noise.
pub struct Instance {
    pub grid: TimeGrid,
    pub green: GreenMatrix,
    pub noise: NoiseModel,
    pub sigma: f64,
    pub corr_time: f64,
    pub y: DVector<f64>,
}

pub fn random_instance(rng: &mut impl Rng, id: usize, n_t: usize) -> Instance {
    let grid = TimeGrid::new(n_t, 0.01).unwrap();
    let green = random_green(rng, id, n_t);
    let sigma = rng.random_range(0.5..2.0);
    // ρ between ~0.05 and ~0.95
    let rho: f64 = rng.random_range(0.05..0.95);
    let corr_time = -grid.dt / rho.ln();
    let noise = NoiseModel::new(sigma, corr_time, grid).unwrap();
    let y = DVector::from_fn(3 * n_t, |_, _| normal(rng));
    Instance {
        grid,
        green,
        noise,
        sigma,
        corr_time,
        y,
    }
}

/// `(H, b)` of an instance by dense inversion of the noise covariance.
pub fn dense_summary(inst: &Instance) -> (DMatrix<f64>, DVector<f64>) {
    let q = dense_precision(inst.grid.n_t, inst.grid.dt, inst.sigma, inst.corr_time);
    let g = inst.green.samples();
    (g.transpose() * &q * g, g.transpose() * &q * &inst.y)
}

pub fn to6(m: &DMatrix<f64>) -> Matrix6<f64> {
    Matrix6::from_iterator(m.iter().copied())
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale.max(f64::MIN_POSITIVE)
}

/// Stations on a line with unit-spaced ids.
pub fn stations(n: usize) -> Vec<Station> {
    (0..n)
        .map(|i| Station {
            id: i,
            east_m: i as f64,
            north_m: 0.0,
        })
        .collect()
}

/// Random rank-deficient PSD information matrices (a station sees only
/// part of the tensor), so greedy choices genuinely interact.
pub fn random_infos(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<Matrix6<f64>> {
    (0..n)
        .map(|_| {
            let rank = rng.random_range(1..=3);
            let mut h = Matrix6::zeros();
            for _ in 0..rank {
                let v = Vector6::from_fn(|_, _| normal(rng));
                h += v * v.transpose() * scale;
            }
            h
        })
        .collect()
}

pub struct Setup {
    pub prior: GaussianBelief,
    pub model: GreenMatrix,
    pub data: GreenMatrix,
    pub noise: NoiseModel,
    pub sigma: f64,
    pub corr_time: f64,
    pub grid: TimeGrid,
}

pub fn setup(r: &mut impl Rng, n_t: usize, perturb: f64) -> Setup {
    let grid = TimeGrid::new(n_t, 0.01).unwrap();
    let model = random_green(r, 0, n_t);
    let data = GreenMatrix::new(
        0,
        model.samples() + DMatrix::from_fn(3 * n_t, 6, |_, _| perturb * normal(r)),
    )
    .unwrap();
    let sigma = r.random_range(0.8..1.5);
    let corr_time = r.random_range(0.005..0.03);
    Setup {
        prior: random_prior(r),
        model,
        data,
        noise: NoiseModel::new(sigma, corr_time, grid).unwrap(),
        sigma,
        corr_time,
        grid,
    }
}

/// `E_m E_{Y|m} ‖μ_pos − m‖²` with `m ~ prior`, `Y = G̃m + ε`.
pub fn monte_carlo_risk(s: &Setup, r: &mut impl Rng, n: usize) -> f64 {
    let q = dense_precision(s.grid.n_t, s.grid.dt, s.sigma, s.corr_time);
    let w = s.model.samples().transpose() * &q;
    let h = &w * s.model.samples();
    let prior_prec = gj_inverse6(s.prior.cov());
    let p = gj_inverse6(&(to6(&h) + prior_prec));
    let shift = prior_prec * s.prior.mean();
    let lp = s.prior.cov().cholesky().unwrap().unpack();
    let mut acc = 0.0;
    for _ in 0..n {
        let m = s.prior.mean() + lp * Vector6::from_fn(|_, _| normal(r));
        let y: DVector<f64> = s.data.samples() * DVector::from_column_slice(m.as_slice()) + s.noise.sample(r);
        let wy = &w * y;
        let mu = p * (shift + Vector6::from_column_slice(wy.as_slice()));
        acc += (mu - m).norm_squared();
    }
    acc / n as f64
}

pub fn library_risk(s: &Setup) -> (f64, Matrix6<f64>, MisspecPair) {
    let pair = MisspecPair::from_greens(&s.model, &s.data, &s.noise).unwrap();
    let pos = inference::posterior_update(&s.prior, &PrecisionSummary::from_h(pair.h)).unwrap();
    (
        bayes_risk_misspec(pos.cov(), &s.prior, &pair).unwrap(),
        *pos.cov(),
        pair,
    )
}

/// `∫ (F(x) − 1{x ≥ truth})² dx` by composite Simpson on both sides of the
/// jump.
pub fn crps_quadrature(mean: f64, sd: f64, truth: f64) -> f64 {
    let dist = Normal::new(mean, sd).unwrap();
    let lo = (mean - 12.0 * sd).min(truth);
    let hi = (mean + 12.0 * sd).max(truth);
    let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
        let n = 4000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    };
    let below = simpson(lo, truth, &|x| dist.cdf(x).powi(2));
    let above = simpson(truth, hi, &|x| (1.0 - dist.cdf(x)).powi(2));
    below + above
}

/// Consensus reference: every candidate's gain is the difference of joint
/// gains of explicitly stacked systems, averaged over scenarios.
pub fn brute_force_consensus(
    greens: &[Vec<GreenMatrix>],
    noises: &[Vec<(f64, f64)>],
    grid: TimeGrid,
    prior_cov: &Matrix6<f64>,
    k: usize,
) -> Vec<(usize, f64)> {
    let n = greens[0].len();
    let rows = grid.rows();
    let joint = |s: usize, set: &[usize]| -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let mut g = DMatrix::zeros(rows * set.len(), 6);
        let mut q = DMatrix::zeros(rows * set.len(), rows * set.len());
        for (i, &p) in set.iter().enumerate() {
            g.view_mut((i * rows, 0), (rows, 6)).copy_from(greens[s][p].samples());
            let (sigma, t) = noises[s][p];
            q.view_mut((i * rows, i * rows), (rows, rows))
                .copy_from(&dense_precision(grid.n_t, grid.dt, sigma, t));
        }
        let h = to6(&(g.transpose() * &q * &g));
        0.5 * lu_logdet6(&(h * prior_cov + Matrix6::identity()))
    };
    let mut chosen: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for p in 0..n {
            if chosen.contains(&p) {
                continue;
            }
            let mut with = chosen.clone();
            with.push(p);
            let gain = (0..greens.len())
                .map(|s| joint(s, &with) - joint(s, &chosen))
                .sum::<f64>()
                / greens.len() as f64;
            if best.is_none_or(|(_, b)| gain > b) {
                best = Some((p, gain));
            }
        }
        let (p, gain) = best.unwrap();
        chosen.push(p);
        out.push((p, gain));
    }
    out
}
