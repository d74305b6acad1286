//! Effective classical Boltzmann factor B(q₀) = 1 − c₁β + O(β²) by three
//! routes, the heat-kernel density conventions, and the partition function.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PointGeometry};
use crate::metricspec::{self, MetricError, MetricSpec};
use crate::propagator::{PeriodicPropagator, PropagatorError};
use crate::wick_engine::{
    self, expect_first_order, expect_second_order_connected, ExpectationValue, Route, SecondOrderOptions,
    WickError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EcpError {
    #[error(transparent)]
    Wick(#[from] WickError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Propagator(#[from] PropagatorError),
    #[error("divergent parts do not cancel: net counter coefficient {0:e}")]
    Divergent(f64),
    #[error("extrapolation did not converge (error {error:e}); series {series:?}")]
    Extrapolation { error: f64, series: Vec<(usize, f64)> },
    #[error("quadrature did not converge: {coarse} vs {fine}")]
    Quadrature { coarse: f64, fine: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub route: Route,
    pub q0: Vec<f64>,
    pub beta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub include_fp: bool,
    #[serde(rename = "R")]
    pub r: f64,
    /// Contributions to 1 − B, keyed by vertex label.
    pub pieces: BTreeMap<String, ExpectationValue>,
    pub total: ExpectationValue,
    #[serde(rename = "B_coefficient")]
    pub b_coefficient: f64,
    #[serde(rename = "B_coefficient_error")]
    pub b_coefficient_error: f64,
    #[serde(rename = "B_value")]
    pub b_value: f64,
    pub covariant_expected: f64,
    /// R/24 − B_coefficient: the extra term of B per unit β relative to the
    /// covariant result.
    pub discrepancy: f64,
    pub v_eff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaOptions {
    pub include_fp: bool,
    pub second_order: SecondOrderOptions,
    /// Convergence threshold on the extrapolation error of B_coefficient.
    pub tol: f64,
}

impl Default for EtaOptions {
    fn default() -> Self {
        Self { include_fp: true, second_order: SecondOrderOptions::default(), tol: 1e-6 }
    }
}

fn assemble(
    route: Route,
    geom: &PointGeometry,
    beta: f64,
    m: usize,
    include_fp: bool,
    pieces: BTreeMap<String, ExpectationValue>,
    tol: f64,
) -> Result<ExpansionReport, EcpError> {
    let total = ExpectationValue::sum(pieces.values());
    let scale = pieces
        .values()
        .map(|e| e.counter_poly.coeff_nprop.abs().max(e.counter_poly.coeff_nall.abs()))
        .fold(0.0f64, f64::max);
    let div = total.counter_poly.divergent_coefficient();
    if div.abs() > 1e-9 * scale.max(1e-300) {
        return Err(EcpError::Divergent(div));
    }
    // N_all − N_prop = 1 once the divergent parts cancel
    let finite = total.limit + total.counter_poly.coeff_nall;
    let b_coefficient = finite / beta;
    let b_coefficient_error = total.limit_error / beta;
    if b_coefficient_error > tol {
        return Err(EcpError::Extrapolation { error: b_coefficient_error, series: total.numeric_m_series });
    }
    let b_value = 1.0 - b_coefficient * beta;
    let covariant_expected = geom.r / 24.0;
    Ok(ExpansionReport {
        route,
        q0: geom.q0.clone(),
        beta,
        m,
        include_fp,
        r: geom.r,
        pieces,
        total,
        b_coefficient,
        b_coefficient_error,
        b_value,
        covariant_expected,
        discrepancy: covariant_expected - b_coefficient,
        v_eff: -b_value.ln() / beta,
    })
}

fn first_order_pieces(
    geom: &PointGeometry,
    p: &PeriodicPropagator,
    route: Route,
    include_fp: bool,
) -> Result<(BTreeMap<String, ExpectationValue>, Vec<wick_engine::Vertex>), EcpError> {
    let vertices = wick_engine::vertex_catalog(geom, p.beta, route)?;
    let mut pieces = BTreeMap::new();
    for v in &vertices {
        if v.label == "A_FP" && !include_fp {
            continue;
        }
        if v.rank() % 2 == 1 {
            continue;
        }
        pieces.insert(v.label.clone(), expect_first_order(v, p, geom)?);
    }
    Ok((pieces, vertices))
}

/// Geodesic-coordinate route: quartic curvature vertex, measure vertex and
/// the Faddeev-Popov action.
pub fn boltzmann_covariant(geom: &PointGeometry, beta: f64, m: usize) -> Result<ExpansionReport, EcpError> {
    let p = PeriodicPropagator::new(beta, m)?;
    let (pieces, _) = first_order_pieces(geom, &p, Route::Covariant, true)?;
    assemble(Route::Covariant, geom, beta, m, true, pieces, f64::INFINITY)
}

/// Expansion in the chart displacement η = q − q₀. The second-order piece is
/// −½⟨A_cubic²⟩_c; its constant part is extrapolated from the M-series.
pub fn boltzmann_eta(
    geom: &PointGeometry,
    beta: f64,
    m: usize,
    opts: EtaOptions,
) -> Result<ExpansionReport, EcpError> {
    let p = PeriodicPropagator::new(beta, m)?;
    let (mut pieces, vertices) = first_order_pieces(geom, &p, Route::Eta, opts.include_fp)?;
    let cubic = vertices.iter().find(|v| v.label == "A_cubic").expect("eta catalog has a cubic vertex");
    let second = expect_second_order_connected(cubic, cubic, &p, geom, opts.second_order)?;
    pieces.insert("A_second_order".into(), second.scale(-0.5));
    assemble(Route::Eta, geom, beta, m, opts.include_fp, pieces, opts.tol)
}

/// Unit D-sphere in the embedding chart at the pole.
pub fn boltzmann_sphere(dim: usize, beta: f64, m: usize) -> Result<ExpansionReport, EcpError> {
    let spec = metricspec::builtin("sphere", dim, &BTreeMap::new())?;
    let geom = crate::geometry::point_geometry(&spec, &vec![0.0; dim])?;
    let p = PeriodicPropagator::new(beta, m)?;
    let (pieces, _) = first_order_pieces(&geom, &p, Route::Sphere, true)?;
    assemble(Route::Sphere, &geom, beta, m, true, pieces, f64::INFINITY)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// 1 − Rβ/24
    PathIntegral,
    /// 1 + Rβ/12
    DewittSeeley,
}

/// Partition-function density to first order in β.
pub fn seeley_density(geom: &PointGeometry, beta: f64, convention: Convention) -> f64 {
    let bracket = match convention {
        Convention::PathIntegral => 1.0 - geom.r * beta / 24.0,
        Convention::DewittSeeley => 1.0 + geom.r * beta / 12.0,
    };
    (2.0 * PI * beta).powf(-(geom.dim as f64) / 2.0) * bracket
}

/// Ratio factor between the two conventions, exp[∫₀^β R/8] at constant R.
pub fn seeley_correction_factor(geom: &PointGeometry, beta: f64) -> f64 {
    (geom.r * beta / 8.0).exp()
}

/// Gauss-Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// Tensor-product Gauss-Legendre over a coordinate box; the node count is
    /// doubled once to check convergence against `tol` (relative).
    Box { lower: Vec<f64>, upper: Vec<f64>, nodes: usize, tol: f64 },
    /// Homogeneous sphere: B at one point times the surface of the unit
    /// D-sphere, 2π^{(D+1)/2}/Γ((D+1)/2).
    SphereArea,
}

/// ∫_box d^Dq f(q) with `n` nodes per axis.
pub fn integrate_box(
    lower: &[f64],
    upper: &[f64],
    n: usize,
    f: &(dyn Fn(&[f64]) -> Result<f64, EcpError> + Sync),
) -> Result<f64, EcpError> {
    use rayon::prelude::*;
    let d = lower.len();
    let (x, w) = gauss_legendre(n);
    let total = n.pow(d as u32);
    let vals: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|mut lin| {
            let mut q = vec![0.0; d];
            let mut weight = 1.0;
            for k in (0..d).rev() {
                let j = lin % n;
                lin /= n;
                let half = 0.5 * (upper[k] - lower[k]);
                q[k] = lower[k] + half * (x[j] + 1.0);
                weight *= half * w[j];
            }
            f(&q).map(|v| v * weight)
        })
        .collect::<Result<_, _>>()?;
    Ok(vals.iter().sum())
}

/// Surface of the unit sphere S^D embedded in D+1 dimensions.
pub fn sphere_area(dim: usize) -> f64 {
    let a = (dim as f64 + 1.0) / 2.0;
    2.0 * PI.powf(a) / statrs::function::gamma::gamma(a)
}

/// Z = ∫ d^Dq₀ √g(q₀) B(q₀) / (2πβ)^{D/2} with the covariant B.
pub fn partition_function(spec: &MetricSpec, beta: f64, grid: &Quadrature) -> Result<f64, EcpError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PropagatorError::InvalidBeta(beta).into());
    }
    let d = spec.dim();
    let norm = (2.0 * PI * beta).powf(-(d as f64) / 2.0);
    match grid {
        Quadrature::SphereArea => {
            if spec.builtin_kind() != Some(metricspec::Builtin::Sphere) {
                return Err(EcpError::Invalid("sphere-area quadrature needs the sphere builtin".into()));
            }
            let geom = crate::geometry::point_geometry(spec, &vec![0.0; d])?;
            let b = boltzmann_covariant(&geom, beta, 1)?.b_value;
            Ok(sphere_area(d) * b * norm)
        }
        Quadrature::Box { lower, upper, nodes, tol } => {
            if lower.len() != d || upper.len() != d {
                return Err(EcpError::Invalid(format!("box must have {d} bounds per side")));
            }
            let f = |q: &[f64]| -> Result<f64, EcpError> {
                let geom = crate::geometry::point_geometry(spec, q)?;
                let b = boltzmann_covariant(&geom, beta, 1)?.b_value;
                Ok(geom.sqrt_g * b * norm)
            };
            let coarse = integrate_box(lower, upper, *nodes, &f)?;
            let fine = integrate_box(lower, upper, 2 * nodes, &f)?;
            if (fine - coarse).abs() > tol * fine.abs().max(f64::MIN_POSITIVE) {
                return Err(EcpError::Quadrature { coarse, fine });
            }
            Ok(fine)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exactness() {
        for n in 1..8 {
            let (x, w) = gauss_legendre(n);
            for k in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn areas() {
        assert!((sphere_area(1) - 2.0 * PI).abs() < 1e-13);
        assert!((sphere_area(2) - 4.0 * PI).abs() < 1e-13);
        assert!((sphere_area(3) - 2.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn counter_poly_is_linear() {
        use crate::propagator::CounterPolynomial;
        let a = CounterPolynomial::nprop(2.0) + CounterPolynomial::nall(-2.0);
        assert_eq!(a.finite_part(0.0), Some(-2.0));
    }
}
