//! Free-measure Monte Carlo over zero-mode-free periodic paths.
//!
//! ξ^a(τ) = Σ_{m=1}^{M} (ξ^a_m e^{−iω_mτ} + c.c.) with Re ξ^a_m and Im ξ^a_m
//! independent N(0, 1/(2βω_m²)), so ⟨ξ^a(τ)ξ^b(τ′)⟩ = δ^{ab}Δ′_M(τ−τ′).
//! Non-flat metrics are handled by the vielbein ξ = L^{−T}z with g = LLᵀ.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointGeometry;
use crate::linalg;
use crate::propagator::{PeriodicPropagator, PropagatorError};
use crate::wick_engine::{self, Prefactor, Route, Vertex, WickError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error(transparent)]
    Propagator(#[from] PropagatorError),
    #[error(transparent)]
    Wick(#[from] WickError),
    #[error("time grid of {grid} points is coarser than the required {min}")]
    GridTooCoarse { grid: usize, min: usize },
    #[error("sample variance of the interaction is {0:.3} (>= 1); use a smaller beta or larger M")]
    VarianceGuard(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeOrder {
    Ascending,
    Descending,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub beta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub samples: usize,
    pub seed: u64,
    /// Time-grid points; defaults to 8M.
    pub grid: usize,
    pub batch_size: usize,
    /// Order in which the random stream fills the modes.
    pub mode_order: ModeOrder,
}

impl McConfig {
    pub fn new(beta: f64, m: usize, samples: usize, seed: u64) -> Self {
        Self { beta, m, samples, seed, grid: 8 * m, batch_size: 4096, mode_order: ModeOrder::Ascending }
    }

    fn validate(&self) -> Result<(), McError> {
        PeriodicPropagator::new(self.beta, self.m)?;
        if self.grid < 8 * self.m {
            return Err(McError::GridTooCoarse { grid: self.grid, min: 8 * self.m });
        }
        if self.samples < 2 || self.batch_size == 0 {
            return Err(McError::Invalid("need at least 2 samples and a positive batch size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Running mean and sum of squared deviations; combined pairwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn combine(&self, o: &Moments) -> Moments {
        if self.n == 0 {
            return *o;
        }
        if o.n == 0 {
            return *self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n as f64 / n as f64,
            m2: self.m2 + o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64,
        }
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self, seed: u64) -> McEstimate {
        McEstimate { mean: self.mean, stderr: (self.variance() / self.n as f64).sqrt(), n_samples: self.n, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub beta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    /// ξ^a_m at `a·M + (m − 1)` as (re, im).
    pub modes: Vec<(f64, f64)>,
}

fn omega(beta: f64, m: usize) -> f64 {
    2.0 * PI * m as f64 / beta
}

fn draw_modes<R: Rng>(rng: &mut R, beta: f64, m: usize, dim: usize, order: ModeOrder) -> Vec<(f64, f64)> {
    let mut modes = vec![(0.0, 0.0); dim * m];
    let ks: Vec<usize> = match order {
        ModeOrder::Ascending => (1..=m).collect(),
        ModeOrder::Descending => (1..=m).rev().collect(),
    };
    for a in 0..dim {
        for &k in &ks {
            let s = 1.0 / ((2.0 * beta).sqrt() * omega(beta, k));
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            modes[a * m + k - 1] = (s * re, s * im);
        }
    }
    modes
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sample_modes(beta: f64, m: usize, dim: usize, seed: u64) -> Result<PathSample, McError> {
    PeriodicPropagator::new(beta, m)?;
    let mut rng = stream_rng(seed, 0);
    Ok(PathSample { beta, m, dim, modes: draw_modes(&mut rng, beta, m, dim, ModeOrder::Ascending) })
}

/// Field values on the grid τ_j = jβ/N: ξ and ξ̇ at `j·D + a`.
pub struct GridPath {
    pub npts: usize,
    pub dim: usize,
    pub xi: Vec<f64>,
    pub xidot: Vec<f64>,
}

impl PathSample {
    /// ξ^a(τ) by direct summation.
    pub fn value(&self, a: usize, tau: f64) -> f64 {
        let mut acc = 0.0;
        for k in (1..=self.m).rev() {
            let (re, im) = self.modes[a * self.m + k - 1];
            let ph = omega(self.beta, k) * tau;
            // 2 Re[(re + i im) e^{−iφ}]
            acc += 2.0 * (re * ph.cos() + im * ph.sin());
        }
        acc
    }

    /// One complex FFT per component, packing z = ξ + iξ̇.
    pub fn on_grid(&self, fft: &Arc<dyn Fft<f64>>) -> GridPath {
        let n = fft.len();
        let d = self.dim;
        let mut xi = vec![0.0; n * d];
        let mut xidot = vec![0.0; n * d];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for a in 0..d {
            buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
            for k in 1..=self.m {
                let (re, im) = self.modes[a * self.m + k - 1];
                let c = Complex::new(re, im);
                let w = omega(self.beta, k);
                buf[k % n] += c * (1.0 + w);
                buf[(n - k) % n] += c.conj() * (1.0 - w);
            }
            fft.process(&mut buf);
            for j in 0..n {
                xi[j * d + a] = buf[j].re;
                xidot[j * d + a] = buf[j].im;
            }
        }
        GridPath { npts: n, dim: d, xi, xidot }
    }
}

impl GridPath {
    /// Maps every grid vector through x ↦ L^{−T}x (skipped for L = 1).
    fn apply_vielbein(&mut self, l: &[f64]) {
        let d = self.dim;
        let identity = (0..d).all(|i| (0..d).all(|j| l[i * d + j] == if i == j { 1.0 } else { 0.0 }));
        if identity {
            return;
        }
        for v in [&mut self.xi, &mut self.xidot] {
            for x in v.chunks_exact_mut(d) {
                linalg::solve_upper_transposed_in_place(l, d, x);
            }
        }
    }

    /// pref · ∫dτ coeff Π ∂^{d_k}ξ on the trapezoid grid.
    pub fn vertex_action(&self, v: &Vertex, beta: f64, m: usize) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        let mut fields: Vec<&[f64]> = Vec::with_capacity(v.rank());
        for j in 0..self.npts {
            let xi = &self.xi[j * d..(j + 1) * d];
            let xd = &self.xidot[j * d..(j + 1) * d];
            fields.clear();
            fields.extend(v.slots.iter().map(|&s| if s == 0 { xi } else { xd }));
            acc += v.contract_fields(&fields);
        }
        let pref = match v.prefactor {
            Prefactor::Plain => 1.0,
            Prefactor::InverseBeta => 1.0 / beta,
            Prefactor::MeasureDelta => (2 * m + 1) as f64 / beta,
        };
        pref * beta * acc / self.npts as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionModel {
    /// Sum of the route's catalog vertices.
    Truncated,
    /// Full embedding-chart sphere action (sphere route only).
    Exact,
}

/// Exact sphere interaction at the origin of the embedding chart:
/// ½∫(q·q̇)²/(1−q²) + ½δ(0)∫log(1−q²) − D log(β⁻¹∫√(1−q²)).
/// `None` if the path leaves the chart.
pub fn sphere_exact_action(path: &GridPath, beta: f64, m: usize) -> Option<f64> {
    let d = path.dim;
    let n = path.npts;
    let delta0 = (2 * m + 1) as f64 / beta;
    let (mut kin, mut jac, mut root) = (0.0, 0.0, 0.0);
    for j in 0..n {
        let q = &path.xi[j * d..(j + 1) * d];
        let qd = &path.xidot[j * d..(j + 1) * d];
        let q2: f64 = q.iter().map(|x| x * x).sum();
        if q2 >= 1.0 {
            return None;
        }
        let qqd: f64 = q.iter().zip(qd).map(|(a, b)| a * b).sum();
        kin += qqd * qqd / (1.0 - q2);
        jac += (1.0 - q2).ln();
        root += (1.0 - q2).sqrt();
    }
    let dt = beta / n as f64;
    Some(0.5 * kin * dt + 0.5 * delta0 * jac * dt - d as f64 * (root / n as f64).ln())
}

/// Per-batch statistics, in batch order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStat {
    pub batch: usize,
    pub moments: Moments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRun {
    pub estimate: McEstimate,
    pub batches: Vec<BatchStat>,
    /// Statistics of the interaction itself (for `mc_boltzmann`).
    pub action: Option<Moments>,
    /// Samples whose path left the chart (weight 0).
    pub rejected: usize,
}

/// Evaluates `f` on every sample path; batches run in parallel on
/// independent ChaCha streams and are reduced in batch order.
/// `f` returns the per-path action (`None` if the path leaves the chart) and
/// `weight` maps it to the averaged quantity.
fn run_samples<F, W>(cfg: &McConfig, dim: usize, l: &[f64], f: F, weight: W) -> Vec<(Moments, Moments, usize)>
where
    F: Fn(&GridPath) -> Option<f64> + Sync,
    W: Fn(Option<f64>) -> f64 + Sync,
{
    let nb = cfg.samples.div_ceil(cfg.batch_size);
    let fft = FftPlanner::new().plan_fft_forward(cfg.grid);
    (0..nb)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(cfg.seed, b as u64);
            let count = cfg.batch_size.min(cfg.samples - b * cfg.batch_size);
            let mut values = Moments::default();
            let mut raw = Moments::default();
            let mut rejected = 0;
            for _ in 0..count {
                let sample = PathSample {
                    beta: cfg.beta,
                    m: cfg.m,
                    dim,
                    modes: draw_modes(&mut rng, cfg.beta, cfg.m, dim, cfg.mode_order),
                };
                let mut path = sample.on_grid(&fft);
                path.apply_vielbein(l);
                let a = f(&path);
                match a {
                    Some(a) => raw.push(a),
                    None => rejected += 1,
                }
                values.push(weight(a));
            }
            (values, raw, rejected)
        })
        .collect()
}

fn vielbein(geom: &PointGeometry) -> Result<Vec<f64>, McError> {
    linalg::cholesky(&geom.g, geom.dim).map_err(|e| McError::Invalid(format!("metric factorization: {e:?}")))
}

fn finish(cfg: &McConfig, parts: Vec<(Moments, Moments, usize)>) -> McRun {
    let batches: Vec<BatchStat> =
        parts.iter().enumerate().map(|(b, p)| BatchStat { batch: b, moments: p.0 }).collect();
    let total = parts.iter().fold(Moments::default(), |acc, p| acc.combine(&p.0));
    let raw = parts.iter().fold(Moments::default(), |acc, p| acc.combine(&p.1));
    let rejected = parts.iter().map(|p| p.2).sum();
    McRun { estimate: total.estimate(cfg.seed), batches, action: Some(raw), rejected }
}

/// Per-sample values of a vertex action (for distribution tests).
pub fn mc_vertex_samples(v: &Vertex, geom: &PointGeometry, cfg: &McConfig) -> Result<Vec<f64>, McError> {
    cfg.validate()?;
    let l = vielbein(geom)?;
    let fft = FftPlanner::new().plan_fft_forward(cfg.grid);
    let nb = cfg.samples.div_ceil(cfg.batch_size);
    let out: Vec<Vec<f64>> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(cfg.seed, b as u64);
            let count = cfg.batch_size.min(cfg.samples - b * cfg.batch_size);
            (0..count)
                .map(|_| {
                    let modes = draw_modes(&mut rng, cfg.beta, cfg.m, geom.dim, cfg.mode_order);
                    let sample = PathSample { beta: cfg.beta, m: cfg.m, dim: geom.dim, modes };
                    let mut path = sample.on_grid(&fft);
                    path.apply_vielbein(&l);
                    path.vertex_action(v, cfg.beta, cfg.m)
                })
                .collect()
        })
        .collect();
    Ok(out.concat())
}

pub fn mc_vertex_run(v: &Vertex, geom: &PointGeometry, cfg: &McConfig) -> Result<McRun, McError> {
    cfg.validate()?;
    if v.dim != geom.dim {
        return Err(McError::Invalid("vertex and geometry dimensions differ".into()));
    }
    let l = vielbein(geom)?;
    let parts = run_samples(cfg, geom.dim, &l, |p| Some(p.vertex_action(v, cfg.beta, cfg.m)), |a| a.unwrap_or(f64::NAN));
    let mut run = finish(cfg, parts);
    run.action = None;
    Ok(run)
}

/// Unbiased estimate of ⟨A_v⟩ under the free measure.
pub fn mc_vertex_expectation(v: &Vertex, geom: &PointGeometry, cfg: &McConfig) -> Result<McEstimate, McError> {
    Ok(mc_vertex_run(v, geom, cfg)?.estimate)
}

pub fn mc_boltzmann_run(
    route: Route,
    geom: &PointGeometry,
    cfg: &McConfig,
    model: ActionModel,
) -> Result<McRun, McError> {
    cfg.validate()?;
    let vertices = wick_engine::vertex_catalog(geom, cfg.beta, route)?;
    if model == ActionModel::Exact && route != Route::Sphere {
        return Err(McError::Invalid("the exact action model exists for the sphere route only".into()));
    }
    let l = vielbein(geom)?;
    let action = |p: &GridPath| -> Option<f64> {
        match model {
            ActionModel::Exact => sphere_exact_action(p, cfg.beta, cfg.m),
            ActionModel::Truncated => Some(vertices.iter().map(|v| p.vertex_action(v, cfg.beta, cfg.m)).sum()),
        }
    };
    // reweight with exp(−A); paths outside the chart weigh 0
    let parts = run_samples(cfg, geom.dim, &l, action, |a| a.map_or(0.0, |a| (-a).exp()));
    let run = finish(cfg, parts);
    let raw = run.action.expect("action moments");
    let var = raw.variance();
    if !(var < 1.0) {
        return Err(McError::VarianceGuard(var));
    }
    Ok(run)
}

/// ⟨e^{−A_int}⟩ under the free measure.
pub fn mc_boltzmann(
    route: Route,
    geom: &PointGeometry,
    cfg: &McConfig,
    model: ActionModel,
) -> Result<McEstimate, McError> {
    Ok(mc_boltzmann_run(route, geom, cfg, model)?.estimate)
}

/// Empirical ⟨ξ^1(τ)ξ^1(τ′)⟩ at each probe pair (flat metric).
pub fn mc_two_point(cfg: &McConfig, probes: &[(f64, f64)]) -> Result<Vec<McEstimate>, McError> {
    cfg.validate()?;
    let nb = cfg.samples.div_ceil(cfg.batch_size);
    let parts: Vec<Vec<Moments>> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(cfg.seed, b as u64);
            let count = cfg.batch_size.min(cfg.samples - b * cfg.batch_size);
            let mut acc = vec![Moments::default(); probes.len()];
            for _ in 0..count {
                let modes = draw_modes(&mut rng, cfg.beta, cfg.m, 1, cfg.mode_order);
                let s = PathSample { beta: cfg.beta, m: cfg.m, dim: 1, modes };
                for (k, &(t, tp)) in probes.iter().enumerate() {
                    acc[k].push(s.value(0, t) * s.value(0, tp));
                }
            }
            acc
        })
        .collect();
    Ok((0..probes.len())
        .map(|k| parts.iter().fold(Moments::default(), |a, p| a.combine(&p[k])).estimate(cfg.seed))
        .collect())
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    // Q_KS(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}; the series fails to converge as λ → 0, where Q → 1
    let mut p = 0.0;
    let mut converged = false;
    for k in 1..=100 {
        let t = 2.0 * (if k % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += t;
        if t.abs() < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        p = 1.0;
    }
    (d, p.clamp(0.0, 1.0))
}
