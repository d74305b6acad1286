//! Gaussian expectation values of polynomial interaction functionals over
//! periodic, zero-mode-free fluctuations with ⟨ξ^a(τ)ξ^b(τ′)⟩ = g^{ab}Δ′(τ−τ′).
//!
//! First-order values are exact counter polynomials. Second-order connected
//! values reduce every pairing to β∫₀^β Π Δ′^{(n_i)}(x) dx; these integrals are
//! evaluated in closed form where the integrand is an ordinary function, on an
//! exact trapezoid grid at finite M, and (for the two products of
//! distributions that occur) either by the partial-integration reduction or
//! by strict mode cutoff.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointGeometry;
use crate::propagator::{CounterPolynomial, PeriodicPropagator, PropagatorError};

pub const MAX_SLOTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WickError {
    #[error("{0} field slots exceed the limit of {MAX_SLOTS}")]
    TooManySlots(usize),
    #[error("vertex {label}: {message}")]
    InvalidVertex { label: String, message: String },
    #[error(transparent)]
    Propagator(#[from] PropagatorError),
    #[error("no evaluation rule for the time integral with derivative orders {0:?}")]
    UnsupportedIntegral(Vec<u8>),
    #[error("route {route:?} does not apply here: {message}")]
    RouteMismatch { route: Route, message: String },
    #[error("M-series needs {levels} halvings of M = {m}")]
    CutoffTooSmall { m: usize, levels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Covariant,
    Eta,
    Sphere,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor {
    Plain,
    /// 1/β
    InverseBeta,
    /// δ(0) of the measure, N_all/β.
    MeasureDelta,
}

/// A_v = prefactor · ∫dτ coeff_{i₁…iₙ} Π_k ∂_τ^{d_k} ξ^{i_k}(τ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub label: String,
    pub prefactor: Prefactor,
    pub dim: usize,
    /// Derivative order of each field slot (0 or 1).
    pub slots: Vec<u8>,
    /// Dense row-major tensor of rank `slots.len()`.
    pub coeff: Vec<f64>,
}

impl Vertex {
    pub fn new(
        label: impl Into<String>,
        prefactor: Prefactor,
        dim: usize,
        slots: Vec<u8>,
        coeff: Vec<f64>,
    ) -> Result<Self, WickError> {
        let label = label.into();
        let bad = |message: String| WickError::InvalidVertex { label: label.clone(), message };
        if slots.is_empty() || slots.len() > 4 {
            return Err(bad(format!("slot count {} outside 1..=4", slots.len())));
        }
        if let Some(d) = slots.iter().find(|&&d| d > 1) {
            return Err(bad(format!("derivative order {d} on a slot")));
        }
        let want = dim.pow(slots.len() as u32);
        if coeff.len() != want {
            return Err(bad(format!("coefficient length {} != {want}", coeff.len())));
        }
        if coeff.iter().any(|c| !c.is_finite()) {
            return Err(bad("non-finite coefficient".into()));
        }
        Ok(Self { label, prefactor, dim, slots, coeff })
    }

    pub fn rank(&self) -> usize {
        self.slots.len()
    }

    pub fn is_zero(&self) -> bool {
        self.coeff.iter().all(|&c| c == 0.0)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { coeff: self.coeff.iter().map(|c| a * c).collect(), ..self.clone() }
    }

    /// Evaluates coeff_{i…} Π v_k^{i_k} for per-slot field values.
    pub fn contract_fields(&self, fields: &[&[f64]]) -> f64 {
        let d = self.dim;
        let n = self.rank();
        let mut acc = 0.0;
        for (lin, &c) in self.coeff.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let mut rest = lin;
            let mut prod = c;
            for k in (0..n).rev() {
                prod *= fields[k][rest % d];
                rest /= d;
            }
            acc += prod;
        }
        acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Products of distributions reduced by partial integration; everything
    /// else at finite M.
    DistributionCalculus,
    /// Every integral as the literal finite-M mode sum.
    ModeCutoff,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderOptions {
    pub scheme: Scheme,
    /// Number of cutoffs M, M/2, … in the series (at least 3 for Richardson).
    pub levels: usize,
}

impl Default for SecondOrderOptions {
    fn default() -> Self {
        Self { scheme: Scheme::DistributionCalculus, levels: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationValue {
    /// M → ∞ representation. The constant is the closed form when
    /// `closed_form` holds, otherwise the extrapolated limit.
    pub counter_poly: CounterPolynomial,
    pub closed_form: bool,
    /// Representation at the cutoff `cutoff`.
    pub at_cutoff: CounterPolynomial,
    pub cutoff: usize,
    /// (M, constant part at M).
    pub numeric_m_series: Vec<(usize, f64)>,
    pub limit: f64,
    pub limit_error: f64,
}

impl ExpectationValue {
    pub fn zero(cutoff: usize) -> Self {
        Self {
            counter_poly: CounterPolynomial::ZERO,
            closed_form: true,
            at_cutoff: CounterPolynomial::ZERO,
            cutoff,
            numeric_m_series: Vec::new(),
            limit: 0.0,
            limit_error: 0.0,
        }
    }

    /// Exact value at the cutoff.
    pub fn value_at_cutoff(&self) -> f64 {
        self.at_cutoff.value_at(self.cutoff)
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            counter_poly: self.counter_poly.scale(a),
            at_cutoff: self.at_cutoff.scale(a),
            numeric_m_series: self.numeric_m_series.iter().map(|&(m, v)| (m, a * v)).collect(),
            limit: a * self.limit,
            limit_error: a.abs() * self.limit_error,
            ..self.clone()
        }
    }

    /// Sum of expectation values; M-series are merged where the cutoffs agree.
    pub fn sum<'a>(items: impl IntoIterator<Item = &'a ExpectationValue>) -> Self {
        let items: Vec<&ExpectationValue> = items.into_iter().collect();
        let cutoff = items.first().map_or(0, |e| e.cutoff);
        let mut out = Self::zero(cutoff);
        let mut series: BTreeMap<usize, f64> = BTreeMap::new();
        let mut with_series = 0;
        for e in &items {
            out.counter_poly = out.counter_poly + e.counter_poly;
            out.closed_form &= e.closed_form;
            out.at_cutoff = out.at_cutoff + e.at_cutoff;
            out.limit += e.limit;
            out.limit_error += e.limit_error;
            if !e.numeric_m_series.is_empty() {
                with_series += 1;
                for &(m, v) in &e.numeric_m_series {
                    *series.entry(m).or_insert(0.0) += v;
                }
            }
        }
        // only cutoffs present in every series survive
        if with_series > 0 {
            let keep: Vec<usize> = series
                .keys()
                .copied()
                .filter(|m| {
                    items
                        .iter()
                        .filter(|e| !e.numeric_m_series.is_empty())
                        .all(|e| e.numeric_m_series.iter().any(|&(mm, _)| mm == *m))
                })
                .collect();
            let first_order: f64 = items
                .iter()
                .filter(|e| e.numeric_m_series.is_empty())
                .map(|e| e.counter_poly.constant)
                .sum();
            out.numeric_m_series = keep.into_iter().map(|m| (m, series[&m] + first_order)).collect();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub limit: f64,
    pub error: f64,
}

/// Two-level Richardson extrapolation in 1/M for cutoffs related by
/// doubling. Error estimate: difference of the last two values of the
/// deepest level reached.
pub fn richardson(series: &[(usize, f64)]) -> Extrapolation {
    let mut s: Vec<(usize, f64)> = series.to_vec();
    s.sort_by_key(|&(m, _)| m);
    match s.len() {
        0 => Extrapolation { limit: f64::NAN, error: f64::INFINITY },
        1 => Extrapolation { limit: s[0].1, error: f64::INFINITY },
        2 => {
            let r = 2.0 * s[1].1 - s[0].1;
            Extrapolation { limit: r, error: (r - s[1].1).abs() }
        }
        _ => {
            let r1: Vec<f64> = s.windows(2).map(|w| 2.0 * w[1].1 - w[0].1).collect();
            let r2: Vec<f64> = r1.windows(2).map(|w| (4.0 * w[1] - w[0]) / 3.0).collect();
            let limit = *r2.last().unwrap();
            let error = if r2.len() >= 2 {
                (r2[r2.len() - 1] - r2[r2.len() - 2]).abs()
            } else {
                (r1[r1.len() - 1] - r1[r1.len() - 2]).abs()
            };
            Extrapolation { limit, error }
        }
    }
}

/// All perfect matchings of `n` slots, in lexicographic order.
pub fn pairings(n: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(free: &mut Vec<usize>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if free.is_empty() {
            out.push(cur.clone());
            return;
        }
        let a = free.remove(0);
        for k in 0..free.len() {
            let b = free.remove(k);
            cur.push((a, b));
            rec(free, cur, out);
            cur.pop();
            free.insert(k, b);
        }
        free.insert(0, a);
    }
    let mut out = Vec::new();
    if n % 2 == 0 {
        rec(&mut (0..n).collect(), &mut Vec::new(), &mut out);
    }
    out
}

/// Value of a quantity both as its M → ∞ form and at a cutoff.
#[derive(Clone, Copy, Debug)]
struct Term {
    closed: CounterPolynomial,
    closed_exact: bool,
    at_m: CounterPolynomial,
}

impl Term {
    fn exact(closed: CounterPolynomial, at_m: CounterPolynomial) -> Self {
        Self { closed, closed_exact: true, at_m }
    }

    fn same(c: CounterPolynomial) -> Self {
        Self::exact(c, c)
    }

    fn one() -> Self {
        Self::same(CounterPolynomial::constant(1.0))
    }

    fn zero() -> Self {
        Self::same(CounterPolynomial::ZERO)
    }

    fn is_zero(&self) -> bool {
        self.closed == CounterPolynomial::ZERO && self.at_m == CounterPolynomial::ZERO
    }

    fn mul(&self, o: &Term) -> Result<Term, WickError> {
        Ok(Term {
            closed: self.closed.try_mul(&o.closed)?,
            closed_exact: self.closed_exact && o.closed_exact,
            at_m: self.at_m.try_mul(&o.at_m)?,
        })
    }

    fn scale(&self, a: f64) -> Term {
        Term { closed: self.closed.scale(a), closed_exact: self.closed_exact, at_m: self.at_m.scale(a) }
    }

    fn add(&self, o: &Term) -> Term {
        Term {
            closed: self.closed + o.closed,
            closed_exact: self.closed_exact && o.closed_exact,
            at_m: self.at_m + o.at_m,
        }
    }
}

fn prefactor_term(p: Prefactor, beta: f64) -> Term {
    match p {
        Prefactor::Plain => Term::one(),
        Prefactor::InverseBeta => Term::same(CounterPolynomial::constant(1.0 / beta)),
        Prefactor::MeasureDelta => Term::same(CounterPolynomial::nall(1.0 / beta)),
    }
}

/// Equal-time pair ⟨∂^a ξ(τ) ∂^b ξ(τ)⟩ without the metric factor.
fn equal_time_pair(a: u8, b: u8, p: &PeriodicPropagator) -> Term {
    let t = p.equal_time_table();
    match (a, b) {
        (0, 0) => Term::exact(CounterPolynomial::constant(t.delta0), CounterPolynomial::constant(t.delta0_modes)),
        (1, 1) => Term::same(t.dd_delta0),
        _ => Term::zero(),
    }
}

/// Σ over index assignments of the paired slots of c1 ⊗ c2 with a factor
/// g^{ab} per pair.
fn contract(c1: &Vertex, c2: Option<&Vertex>, pairing: &[(usize, usize)], g_inv: &[f64]) -> f64 {
    let d = c1.dim;
    let n1 = c1.rank();
    let n = n1 + c2.map_or(0, |v| v.rank());
    let mut idx = vec![0usize; n];

    fn lin(idx: &[usize], d: usize) -> usize {
        idx.iter().fold(0, |acc, &i| acc * d + i)
    }

    fn rec(
        k: usize,
        w: f64,
        idx: &mut Vec<usize>,
        pairing: &[(usize, usize)],
        g_inv: &[f64],
        d: usize,
        n1: usize,
        c1: &Vertex,
        c2: Option<&Vertex>,
    ) -> f64 {
        if k == pairing.len() {
            let a = c1.coeff[lin(&idx[..n1], d)];
            if a == 0.0 {
                return 0.0;
            }
            let b = match c2 {
                Some(v) => v.coeff[lin(&idx[n1..], d)],
                None => 1.0,
            };
            return w * a * b;
        }
        let (i, j) = pairing[k];
        let mut acc = 0.0;
        for a in 0..d {
            for b in 0..d {
                let gab = g_inv[a * d + b];
                if gab == 0.0 {
                    continue;
                }
                idx[i] = a;
                idx[j] = b;
                acc += rec(k + 1, w * gab, idx, pairing, g_inv, d, n1, c1, c2);
            }
        }
        acc
    }

    rec(0, 1.0, &mut idx, pairing, g_inv, d, n1, c1, c2)
}

fn check_dims(vs: &[&Vertex], geom: &PointGeometry) -> Result<(), WickError> {
    for v in vs {
        if v.dim != geom.dim {
            return Err(WickError::InvalidVertex {
                label: v.label.clone(),
                message: format!("dimension {} but geometry has {}", v.dim, geom.dim),
            });
        }
    }
    Ok(())
}

/// ⟨A_v⟩ under the free measure, exact in the counters.
pub fn expect_first_order(
    v: &Vertex,
    p: &PeriodicPropagator,
    geom: &PointGeometry,
) -> Result<ExpectationValue, WickError> {
    check_dims(&[v], geom)?;
    let n = v.rank();
    if n > MAX_SLOTS {
        return Err(WickError::TooManySlots(n));
    }
    if n % 2 == 1 || v.is_zero() {
        return Ok(ExpectationValue::zero(p.m));
    }
    let mut total = Term::zero();
    for pairing in pairings(n) {
        let mut t = Term::one();
        for &(a, b) in &pairing {
            t = t.mul(&equal_time_pair(v.slots[a], v.slots[b], p))?;
        }
        if t.is_zero() {
            continue;
        }
        let c = contract(v, None, &pairing, &geom.g_inv);
        if c != 0.0 {
            total = total.add(&t.scale(c));
        }
    }
    let total = total.mul(&prefactor_term(v.prefactor, p.beta))?.scale(p.beta);
    Ok(ExpectationValue {
        counter_poly: total.closed,
        closed_form: true,
        at_cutoff: total.at_m,
        cutoff: p.m,
        numeric_m_series: Vec::new(),
        limit: total.closed.constant,
        limit_error: 0.0,
    })
}

/// Grouped pairing structure of a vertex pair: which equal-time pairs and
/// which cross-time derivative pattern, with the contracted coefficient.
struct Topology {
    self_pairs: Vec<(u8, u8)>,
    cross: Vec<u8>,
    sign: f64,
    coeff: f64,
}

fn topologies(v1: &Vertex, v2: &Vertex, g_inv: &[f64]) -> Vec<Topology> {
    let n1 = v1.rank();
    let slots: Vec<u8> = v1.slots.iter().chain(v2.slots.iter()).copied().collect();
    let mut groups: BTreeMap<(Vec<(u8, u8)>, Vec<u8>, i8), f64> = BTreeMap::new();
    for pairing in pairings(slots.len()) {
        let mut self_pairs = Vec::new();
        let mut cross = Vec::new();
        let mut sign = 1i8;
        for &(a, b) in &pairing {
            let (da, db) = (slots[a], slots[b]);
            match (a < n1, b < n1) {
                (true, true) | (false, false) => self_pairs.push((da.min(db), da.max(db))),
                _ => {
                    // the second-vertex slot's derivative acts on τ′
                    let dp = if a < n1 { db } else { da };
                    if dp % 2 == 1 {
                        sign = -sign;
                    }
                    cross.push(da + db);
                }
            }
        }
        if cross.is_empty() {
            continue; // disconnected
        }
        // a single cross pair integrates a zero-mode-free function to zero
        if cross.len() == 1 {
            continue;
        }
        if self_pairs.iter().any(|&(a, b)| a != b) {
            continue; // ⟨ξ ξ̇⟩ at equal times vanishes
        }
        if cross.iter().map(|&c| c as u32).sum::<u32>() % 2 == 1 {
            continue; // odd integrand
        }
        let c = contract(v1, Some(v2), &pairing, g_inv);
        if c == 0.0 {
            continue;
        }
        self_pairs.sort();
        cross.sort();
        *groups.entry((self_pairs, cross, sign)).or_insert(0.0) += c;
    }
    groups
        .into_iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|((self_pairs, cross, sign), coeff)| Topology { self_pairs, cross, sign: sign as f64, coeff })
        .collect()
}

/// Polynomial product helpers on [0, β).
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_integral(c: &[f64], beta: f64) -> f64 {
    c.iter().enumerate().map(|(k, a)| a * beta.powi(k as i32 + 1) / (k as f64 + 1.0)).sum()
}

/// β∫₀^β Π Δ′^{(n_i)} for an integrand that is an ordinary function plus at
/// most one δ from a lone second derivative; `None` otherwise.
fn closed_polynomial_integral(orders: &[u8], beta: f64) -> Option<f64> {
    let twos = orders.iter().filter(|&&n| n == 2).count();
    let ones = orders.iter().filter(|&&n| n == 1).count();
    if orders.iter().any(|&n| n > 2) || twos > 1 || (twos == 1 && ones > 0) {
        return None;
    }
    let mut prod = vec![1.0];
    for &n in orders {
        let f = match n {
            0 => vec![beta / 12.0, -0.5, 0.5 / beta],
            1 => vec![-0.5, 1.0 / beta],
            _ => vec![1.0 / beta],
        };
        prod = poly_mul(&prod, &f);
    }
    let mut v = poly_integral(&prod, beta);
    if twos == 1 {
        // Δ′″ = 1/β − δ
        v -= (beta / 12.0).powi(orders.len() as i32 - 1);
    }
    Some(beta * v)
}

/// Truncated Σ_{0<|m|≤M} ω_m^{−p} and its M → ∞ value (p = 2, 4).
fn inverse_power_sum(beta: f64, m: usize, p: i32) -> (f64, f64) {
    let s: f64 = (1..=m).rev().map(|k| 2.0 / (2.0 * PI * k as f64 / beta).powi(p)).sum();
    let closed = match p {
        2 => beta * beta / 12.0,
        4 => beta.powi(4) / 720.0,
        _ => f64::NAN,
    };
    (s, closed)
}

/// Δ′_M^{(n)} on the grid x_j = jβ/N.
fn grid_derivative(beta: f64, m: usize, n: u8, npts: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf = vec![Complex::new(0.0, 0.0); npts];
    for k in 1..=m {
        let w = 2.0 * PI * k as f64 / beta;
        // (−iω)^n / (βω²) for +m and its conjugate for −m
        let c = Complex::new(0.0, -w).powi(n as i32) / (beta * w * w);
        buf[k] += c;
        buf[npts - k] += c.conj();
    }
    planner.plan_fft_forward(npts).process(&mut buf);
    buf.into_iter().map(|z| z.re).collect()
}

/// β∫₀^β Π Δ′_M^{(n_i)} on an exact trapezoid grid.
pub fn mode_integral(orders: &[u8], beta: f64, m: usize) -> f64 {
    let npts = orders.len().max(2) * m + 1;
    let mut planner = FftPlanner::new();
    let mut prod = vec![1.0; npts];
    for &n in orders {
        let f = grid_derivative(beta, m, n, npts, &mut planner);
        for (p, v) in prod.iter_mut().zip(f) {
            *p *= v;
        }
    }
    beta * beta * prod.iter().sum::<f64>() / npts as f64
}

/// Sign-stripped cross integral β∫₀^β Π Δ′^{(n_i)} as a Term at cutoff M.
fn cross_integral(orders: &[u8], p: &PeriodicPropagator, scheme: Scheme) -> Result<Term, WickError> {
    let beta = p.beta;
    let m = p.m;
    let total: u32 = orders.iter().map(|&n| n as u32).sum();
    if orders.len() < 2 || total % 2 == 1 {
        return Ok(Term::zero());
    }
    if orders.len() == 2 {
        let (a, b) = (orders[0] as i32, orders[1] as i32);
        let s = (a + b) / 2;
        let sign = if (a + s) % 2 == 0 { 1.0 } else { -1.0 };
        return Ok(match s {
            2 => Term::same(CounterPolynomial::nprop(1.0)),
            _ => {
                let (at_m, closed) = inverse_power_sum(beta, m, 4 - 2 * s);
                Term::exact(CounterPolynomial::constant(sign * closed), CounterPolynomial::constant(sign * at_m))
            }
        });
    }
    if let Some(closed) = closed_polynomial_integral(orders, beta) {
        let at_m = mode_integral(orders, beta, m);
        return Ok(Term::exact(CounterPolynomial::constant(closed), CounterPolynomial::constant(at_m)));
    }
    let g_m = p.delta0_modes();
    match (orders, scheme) {
        // (β²/12)δ(0) − β/24 with δ(0) = N_all/β, the same δ(0) as the measure
        ([0, 2, 2], Scheme::DistributionCalculus) => Ok(Term::exact(
            CounterPolynomial { constant: -beta / 24.0, coeff_nprop: 0.0, coeff_nall: beta / 12.0 },
            CounterPolynomial { constant: -0.5 * g_m, coeff_nprop: 0.0, coeff_nall: g_m },
        )),
        ([1, 1, 2], Scheme::DistributionCalculus) => Ok(Term::exact(
            CounterPolynomial::constant(-beta / 24.0),
            CounterPolynomial::constant(-0.5 * g_m),
        )),
        ([0, 2, 2], Scheme::ModeCutoff) => {
            let v = mode_integral(orders, beta, m);
            let counters = CounterPolynomial::nprop(g_m);
            let at_m = CounterPolynomial::constant(v - counters.value_at(m)) + counters;
            let closed = CounterPolynomial { constant: at_m.constant, coeff_nprop: beta / 12.0, coeff_nall: 0.0 };
            Ok(Term { closed, closed_exact: false, at_m })
        }
        ([1, 1, 2], Scheme::ModeCutoff) => {
            let v = mode_integral(orders, beta, m);
            let c = CounterPolynomial::constant(v);
            Ok(Term { closed: c, closed_exact: false, at_m: c })
        }
        _ => Err(WickError::UnsupportedIntegral(orders.to_vec())),
    }
}

fn second_order_at(
    v1: &Vertex,
    v2: &Vertex,
    tops: &[Topology],
    p: &PeriodicPropagator,
    scheme: Scheme,
) -> Result<Term, WickError> {
    let mut total = Term::zero();
    for t in tops {
        let mut term = cross_integral(&t.cross, p, scheme)?;
        for &(a, b) in &t.self_pairs {
            term = term.mul(&equal_time_pair(a, b, p))?;
        }
        total = total.add(&term.scale(t.sign * t.coeff));
    }
    total
        .mul(&prefactor_term(v1.prefactor, p.beta))?
        .mul(&prefactor_term(v2.prefactor, p.beta))
}

/// ⟨A_{v1} A_{v2}⟩ − ⟨A_{v1}⟩⟨A_{v2}⟩ with its M-series over
/// M, M/2, …, M/2^{levels−1} and the Richardson limit of the constant part.
pub fn expect_second_order_connected(
    v1: &Vertex,
    v2: &Vertex,
    p: &PeriodicPropagator,
    geom: &PointGeometry,
    opts: SecondOrderOptions,
) -> Result<ExpectationValue, WickError> {
    check_dims(&[v1, v2], geom)?;
    let n = v1.rank() + v2.rank();
    if n > MAX_SLOTS {
        return Err(WickError::TooManySlots(n));
    }
    let levels = opts.levels.max(1);
    if p.m >> (levels - 1) == 0 {
        return Err(WickError::CutoffTooSmall { m: p.m, levels });
    }
    if n % 2 == 1 || v1.is_zero() || v2.is_zero() {
        return Ok(ExpectationValue::zero(p.m));
    }
    let tops = topologies(v1, v2, &geom.g_inv);
    let ms: Vec<usize> = (0..levels).rev().map(|j| p.m >> j).collect();
    let terms: Vec<Term> = ms
        .par_iter()
        .map(|&m| {
            let pm = PeriodicPropagator::new(p.beta, m)?;
            second_order_at(v1, v2, &tops, &pm, opts.scheme)
        })
        .collect::<Result<_, _>>()?;
    let series: Vec<(usize, f64)> = ms.iter().zip(&terms).map(|(&m, t)| (m, t.at_m.constant)).collect();
    let ex = richardson(&series);
    let last = *terms.last().unwrap();
    let mut counter_poly = last.closed;
    if !last.closed_exact {
        counter_poly.constant = ex.limit;
    }
    Ok(ExpectationValue {
        counter_poly,
        closed_form: last.closed_exact,
        at_cutoff: last.at_m,
        cutoff: p.m,
        numeric_m_series: series,
        limit: ex.limit,
        limit_error: ex.error,
    })
}

fn sym2(d: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            out[a * d + b] = 0.5 * (f(a, b) + f(b, a));
        }
    }
    out
}

/// The truncated interaction vertices of each route at order β.
///
/// covariant: A_int4 = ⅙R_{μλνσ}ξ̇^μξ^λξ̇^νξ^σ, A_meas = ⅙δ(0)R_{μν}ξ^μξ^ν,
/// A_FP = (1/3β)R_{μν}ξ^μξ^ν.
/// eta: A_cubic = ½∂_σg_{μν}η^σ η̇^μη̇^ν, A_int4 = ¼∂_σ∂_τg_{μν}η^ση^τ η̇^μη̇^ν,
/// A_meas = −½δ(0)∂_σΓ^μ_{τμ}η^ση^τ, A_FP = (1/2β)T_{στ}η^ση^τ.
/// sphere (embedding chart at the origin): A_int4 = ½(q·q̇)², A_J = −½δ(0)q²,
/// A_FP = (D/2β)q².
pub fn vertex_catalog(geom: &PointGeometry, beta: f64, route: Route) -> Result<Vec<Vertex>, WickError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PropagatorError::InvalidBeta(beta).into());
    }
    let d = geom.dim;
    let mut out = Vec::new();
    match route {
        Route::Covariant => {
            let mut c4 = vec![0.0; d.pow(4)];
            for mu in 0..d {
                for l1 in 0..d {
                    for nu in 0..d {
                        for l2 in 0..d {
                            c4[((mu * d + l1) * d + nu) * d + l2] = geom.riemann_lower(mu, l1, nu, l2) / 6.0;
                        }
                    }
                }
            }
            let ric = sym2(d, |a, b| geom.ricci_at(a, b));
            out.push(Vertex::new("A_int4", Prefactor::Plain, d, vec![1, 0, 1, 0], c4)?);
            out.push(Vertex::new("A_meas", Prefactor::MeasureDelta, d, vec![0, 0], ric.iter().map(|r| r / 6.0).collect())?);
            out.push(Vertex::new("A_FP", Prefactor::InverseBeta, d, vec![0, 0], ric.iter().map(|r| r / 3.0).collect())?);
        }
        Route::Eta => {
            let mut c3 = vec![0.0; d.pow(3)];
            let mut c4 = vec![0.0; d.pow(4)];
            for s in 0..d {
                for mu in 0..d {
                    for nu in 0..d {
                        c3[(s * d + mu) * d + nu] = 0.5 * geom.dmetric(mu, nu, s);
                        for t in 0..d {
                            c4[((s * d + t) * d + mu) * d + nu] = 0.25 * geom.d2metric(mu, nu, s, t);
                        }
                    }
                }
            }
            let meas = sym2(d, |s, t| -0.5 * (0..d).map(|mu| geom.dgam(mu, t, mu, s)).sum::<f64>());
            let fp = sym2(d, |s, t| 0.5 * geom.t[s * d + t]);
            out.push(Vertex::new("A_cubic", Prefactor::Plain, d, vec![0, 1, 1], c3)?);
            out.push(Vertex::new("A_int4", Prefactor::Plain, d, vec![0, 0, 1, 1], c4)?);
            out.push(Vertex::new("A_meas", Prefactor::MeasureDelta, d, vec![0, 0], meas)?);
            out.push(Vertex::new("A_FP", Prefactor::InverseBeta, d, vec![0, 0], fp)?);
        }
        Route::Sphere => {
            let tol = 1e-12;
            let at_origin = geom.q0.iter().all(|x| x.abs() <= tol)
                && (0..d).all(|a| (0..d).all(|b| (geom.g[a * d + b] - if a == b { 1.0 } else { 0.0 }).abs() <= tol))
                && geom.gamma.iter().all(|x| x.abs() <= tol)
                && (geom.r - (d * d.saturating_sub(1)) as f64).abs() <= 1e-9 * (1.0 + geom.r.abs());
            if !at_origin {
                return Err(WickError::RouteMismatch {
                    route,
                    message: "needs the embedding-chart sphere at q0 = 0".into(),
                });
            }
            let mut c4 = vec![0.0; d.pow(4)];
            for a in 0..d {
                for b in 0..d {
                    c4[((a * d + a) * d + b) * d + b] = 0.5;
                }
            }
            let delta = |s: f64| sym2(d, |a, b| if a == b { s } else { 0.0 });
            out.push(Vertex::new("A_int4", Prefactor::Plain, d, vec![0, 1, 0, 1], c4)?);
            out.push(Vertex::new("A_J", Prefactor::MeasureDelta, d, vec![0, 0], delta(-0.5))?);
            out.push(Vertex::new("A_FP", Prefactor::InverseBeta, d, vec![0, 0], delta(0.5 * d as f64))?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub route: Route,
    /// Coefficient of δ(0) in the first-order contribution to B.
    pub first_order_delta_coefficient: f64,
    /// Coefficient of δ(0) in the second-order contribution to B.
    pub second_order_delta_coefficient: f64,
    /// Closed form of the first-order coefficient, −(β²/24)·g^{στ}(…).
    pub closed_form_first_order_coefficient: f64,
    pub residual: f64,
    /// Total order-β contribution to B at several cutoffs.
    pub samples: Vec<(usize, f64)>,
    pub slope: f64,
    pub cancelled: bool,
}

/// Checks that the M-divergent parts of the order-β contribution to B cancel.
pub fn check_divergence_cancellation(
    route: Route,
    geom: &PointGeometry,
    p: &PeriodicPropagator,
) -> Result<DivergenceReport, WickError> {
    let beta = p.beta;
    let vertices = vertex_catalog(geom, beta, route)?;
    let mut first = CounterPolynomial::ZERO;
    let mut second = CounterPolynomial::ZERO;
    let mut scale = 0.0f64;
    for v in &vertices {
        let e = expect_first_order(v, p, geom)?;
        scale = scale.max(e.counter_poly.coeff_nprop.abs()).max(e.counter_poly.coeff_nall.abs());
        first = first - e.counter_poly;
    }
    if route == Route::Eta {
        let cubic = vertices.iter().find(|v| v.label == "A_cubic").expect("cubic vertex in eta catalog");
        let opts = SecondOrderOptions { scheme: Scheme::DistributionCalculus, levels: 1 };
        let e = expect_second_order_connected(cubic, cubic, p, geom, opts)?;
        second = e.counter_poly.scale(0.5);
        scale = scale.max(second.coeff_nprop.abs()).max(second.coeff_nall.abs());
    }
    let total = first + second;
    let samples: Vec<(usize, f64)> = [1usize, 2, 5, 50].iter().map(|&m| (m, total.value_at(m))).collect();
    let slope = samples
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0) as f64)
        .fold(0.0f64, |a, s| if s.abs() > a.abs() { s } else { a });
    // δ(0) = N/β, so a counter coefficient c on N is β·c on δ(0)
    let c1 = beta * first.divergent_coefficient();
    let c2 = beta * second.divergent_coefficient();
    let residual = c1 + c2;
    let cancelled = slope.abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE);
    Ok(DivergenceReport {
        route,
        first_order_delta_coefficient: c1,
        second_order_delta_coefficient: c2,
        closed_form_first_order_coefficient: -beta * beta / 24.0 * geom.delta_counter_combination(),
        residual,
        samples,
        slope,
        cancelled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_factorial_counts() {
        assert_eq!(pairings(2).len(), 1);
        assert_eq!(pairings(4).len(), 3);
        assert_eq!(pairings(6).len(), 15);
        assert_eq!(pairings(8).len(), 105);
        assert!(pairings(3).is_empty());
    }

    #[test]
    fn richardson_removes_two_orders() {
        let f = |m: usize| 1.5 + 0.3 / m as f64 - 0.7 / (m * m) as f64;
        let s: Vec<(usize, f64)> = [8, 16, 32, 64].iter().map(|&m| (m, f(m))).collect();
        let e = richardson(&s);
        assert!((e.limit - 1.5).abs() < 1e-12);
        assert!(e.error < 1e-12);
    }

    #[test]
    fn polynomial_integrals() {
        let b = 0.7;
        // β∫f³ from the mode sums at large M
        let closed = closed_polynomial_integral(&[0, 0, 0], b).unwrap();
        assert!((closed - mode_integral(&[0, 0, 0], b, 2000)).abs() < 1e-9);
        let closed = closed_polynomial_integral(&[0, 1, 1], b).unwrap();
        assert!((closed - mode_integral(&[0, 1, 1], b, 2000)).abs() < 1e-6);
        let closed = closed_polynomial_integral(&[0, 0, 2], b).unwrap();
        assert!((closed - mode_integral(&[0, 0, 2], b, 2000)).abs() < 1e-5);
        assert!(closed_polynomial_integral(&[0, 2, 2], b).is_none());
    }

    #[test]
    fn master_values_are_stable_in_mode_cutoff() {
        // ∫f′²f″ has no δ-strength at finite M: f′³ is periodic
        for m in [4, 16, 64] {
            assert!(mode_integral(&[1, 1, 2], 1.0, m).abs() < 1e-12);
        }
    }
}
