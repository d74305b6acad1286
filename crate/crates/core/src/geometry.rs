//! Tensor bundle at a point: Christoffels, curvature, and the noncovariant
//! tensor T_{στ}.
//!
//! Curvature convention. Internally the Riemann tensor is
//!
//! ```text
//! Rm^ρ_{σμν} = ∂_μ Γ^ρ_{νσ} − ∂_ν Γ^ρ_{μσ} + Γ^ρ_{μλ} Γ^λ_{νσ} − Γ^ρ_{νλ} Γ^λ_{μσ}
//! ```
//!
//! with Ricci R_{σν} = Rm^ρ_{σρν}, so the unit sphere has R = +D(D−1).
//! The object R_{στκ}{}^μ used throughout the path-integral formulas is
//! exposed by [`PointGeometry::riemann`] as `R_{στκ}^μ = Rm^μ_{σκτ}`. With
//! this placement the normal-coordinate metric is g = δ + ⅓ R_{μλνσ} ξ^λ ξ^σ,
//! ∂_κΓ^μ_{τσ} = −⅓(R_{τκσ}^μ + R_{σκτ}^μ) in normal coordinates, and
//! R_{σμτ}{}^μ = −R_{στ}.

use thiserror::Error;

use crate::jet::Jet3;
use crate::linalg::{self, FactorError};
use crate::metricspec::{Chart, MetricError, MetricSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("metric is not positive definite at {point:?} (pivot {pivot:e} in row {index})")]
    NotPositiveDefinite { point: Vec<f64>, index: usize, pivot: f64 },
    #[error("metric is singular at {point:?} (pivot {pivot:e} in row {index})")]
    Singular { point: Vec<f64>, index: usize, pivot: f64 },
    #[error("finite-difference step {0:e} underflows")]
    StepUnderflow(f64),
    #[error("finite-difference step {0:e} overflows")]
    StepOverflow(f64),
}

#[derive(Clone, Debug)]
pub struct PointGeometry {
    pub dim: usize,
    pub q0: Vec<f64>,
    pub g: Vec<f64>,
    pub g_inv: Vec<f64>,
    pub sqrt_g: f64,
    /// ∂_k g_{ij} at `(i·D + j)·D + k`.
    pub dg: Vec<f64>,
    /// ∂_k ∂_l g_{ij} at `((i·D + j)·D + k)·D + l`.
    pub d2g: Vec<f64>,
    /// Γ^μ_{στ} at `(μ·D + σ)·D + τ`.
    pub gamma: Vec<f64>,
    /// ∂_κ Γ^μ_{στ} at `((μ·D + σ)·D + τ)·D + κ`.
    pub dgamma: Vec<f64>,
    /// ∇_κ Γ_{στ}{}^μ = ∂_κΓ^μ_{στ} − 2Γ^ν_{κσ}Γ^μ_{ντ}, same layout as `dgamma`.
    pub gamma_cov: Vec<f64>,
    /// Rm^ρ_{σμν} at `((ρ·D + σ)·D + μ)·D + ν` (see module docs).
    pub riemann_std: Vec<f64>,
    pub ricci: Vec<f64>,
    pub r: f64,
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    /// ∇_μ V^μ evaluated from the jets.
    pub div_v: f64,
}

impl PointGeometry {
    pub fn from_chart(chart: &dyn Chart, q0: &[f64]) -> Result<Self, GeometryError> {
        let d = chart.dim();
        if q0.len() != d {
            return Err(MetricError::DimensionMismatch(format!(
                "point has {} coordinates, chart has {d}",
                q0.len()
            ))
            .into());
        }
        let jets = chart.metric_jets(&Jet3::seed(q0))?;
        Self::from_jets(q0, &jets)
    }

    pub fn from_jets(q0: &[f64], jets: &[Jet3]) -> Result<Self, GeometryError> {
        let d = q0.len();
        let g: Vec<f64> = jets.iter().map(Jet3::value).collect();
        let l = linalg::cholesky(&g, d).map_err(|e| match e {
            FactorError::Indefinite { index, pivot } => {
                GeometryError::NotPositiveDefinite { point: q0.to_vec(), index, pivot }
            }
            FactorError::Singular { index, pivot } => {
                GeometryError::Singular { point: q0.to_vec(), index, pivot }
            }
        })?;
        let g_inv = linalg::spd_inverse(&l, d);
        let sqrt_g = linalg::cholesky_det(&l, d).sqrt();

        let mut dg = vec![0.0; d * d * d];
        let mut d2g = vec![0.0; d * d * d * d];
        for i in 0..d {
            for j in 0..d {
                let jet = &jets[i * d + j];
                for k in 0..d {
                    dg[(i * d + j) * d + k] = jet.d1(k);
                    for m in 0..d {
                        d2g[((i * d + j) * d + k) * d + m] = jet.d2(k, m);
                    }
                }
            }
        }
        let i3 = |a: usize, b: usize, c: usize| (a * d + b) * d + c;
        let i4 = |a: usize, b: usize, c: usize, e: usize| ((a * d + b) * d + c) * d + e;

        // first-kind symbols Γ_{ν,στ} and their derivatives
        let mut g1 = vec![0.0; d * d * d];
        let mut dg1 = vec![0.0; d * d * d * d];
        for nu in 0..d {
            for s in 0..d {
                for t in 0..d {
                    g1[i3(nu, s, t)] =
                        0.5 * (dg[i3(nu, t, s)] + dg[i3(nu, s, t)] - dg[i3(s, t, nu)]);
                    for k in 0..d {
                        dg1[i4(nu, s, t, k)] = 0.5
                            * (d2g[i4(nu, t, s, k)] + d2g[i4(nu, s, t, k)] - d2g[i4(s, t, nu, k)]);
                    }
                }
            }
        }
        // ∂_k g^{μν} = −g^{μa} ∂_k g_{ab} g^{bν}
        let mut dginv = vec![0.0; d * d * d];
        for mu in 0..d {
            for nu in 0..d {
                for k in 0..d {
                    let mut s = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            s -= g_inv[mu * d + a] * dg[i3(a, b, k)] * g_inv[b * d + nu];
                        }
                    }
                    dginv[i3(mu, nu, k)] = s;
                }
            }
        }
        let mut gamma = vec![0.0; d * d * d];
        let mut dgamma = vec![0.0; d * d * d * d];
        for mu in 0..d {
            for s in 0..d {
                for t in 0..d {
                    let mut acc = 0.0;
                    for nu in 0..d {
                        acc += g_inv[mu * d + nu] * g1[i3(nu, s, t)];
                    }
                    gamma[i3(mu, s, t)] = acc;
                    for k in 0..d {
                        let mut acc = 0.0;
                        for nu in 0..d {
                            acc += dginv[i3(mu, nu, k)] * g1[i3(nu, s, t)]
                                + g_inv[mu * d + nu] * dg1[i4(nu, s, t, k)];
                        }
                        dgamma[i4(mu, s, t, k)] = acc;
                    }
                }
            }
        }
        let mut gamma_cov = vec![0.0; d * d * d * d];
        for mu in 0..d {
            for s in 0..d {
                for t in 0..d {
                    for k in 0..d {
                        let mut acc = dgamma[i4(mu, s, t, k)];
                        for nu in 0..d {
                            acc -= 2.0 * gamma[i3(nu, k, s)] * gamma[i3(mu, nu, t)];
                        }
                        gamma_cov[i4(mu, s, t, k)] = acc;
                    }
                }
            }
        }
        let mut riemann_std = vec![0.0; d * d * d * d];
        for rho in 0..d {
            for sg in 0..d {
                for mu in 0..d {
                    for nu in 0..d {
                        let mut acc = dgamma[i4(rho, nu, sg, mu)] - dgamma[i4(rho, mu, sg, nu)];
                        for lam in 0..d {
                            acc += gamma[i3(rho, mu, lam)] * gamma[i3(lam, nu, sg)]
                                - gamma[i3(rho, nu, lam)] * gamma[i3(lam, mu, sg)];
                        }
                        riemann_std[i4(rho, sg, mu, nu)] = acc;
                    }
                }
            }
        }
        let mut ricci = vec![0.0; d * d];
        for s in 0..d {
            for n in 0..d {
                ricci[s * d + n] = (0..d).map(|rho| riemann_std[i4(rho, s, rho, n)]).sum();
            }
        }
        let r = (0..d * d).map(|k| g_inv[k] * ricci[k]).sum();

        let mut t = vec![0.0; d * d];
        for s in 0..d {
            for tau in 0..d {
                let mut acc = 0.0;
                for mu in 0..d {
                    acc += dgamma[i4(mu, s, tau, mu)];
                    for k in 0..d {
                        acc += -2.0 * gamma[i3(mu, s, k)] * gamma[i3(k, mu, tau)]
                            + gamma[i3(mu, k, mu)] * gamma[i3(k, s, tau)];
                    }
                }
                t[s * d + tau] = acc;
            }
        }
        let mut v = vec![0.0; d];
        let mut dv_trace = 0.0;
        for mu in 0..d {
            for s in 0..d {
                for tau in 0..d {
                    v[mu] += g_inv[s * d + tau] * gamma[i3(mu, s, tau)];
                    dv_trace += dginv[i3(s, tau, mu)] * gamma[i3(mu, s, tau)]
                        + g_inv[s * d + tau] * dgamma[i4(mu, s, tau, mu)];
                }
            }
        }
        let mut div_v = dv_trace;
        for mu in 0..d {
            for nu in 0..d {
                div_v += gamma[i3(nu, nu, mu)] * v[mu];
            }
        }

        Ok(Self {
            dim: d,
            q0: q0.to_vec(),
            g,
            g_inv,
            sqrt_g,
            dg,
            d2g,
            gamma,
            dgamma,
            gamma_cov,
            riemann_std,
            ricci,
            r,
            t,
            v,
            div_v,
        })
    }

    fn i3(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dim + b) * self.dim + c
    }

    fn i4(&self, a: usize, b: usize, c: usize, e: usize) -> usize {
        ((a * self.dim + b) * self.dim + c) * self.dim + e
    }

    /// Γ^μ_{στ}
    pub fn gam(&self, mu: usize, s: usize, t: usize) -> f64 {
        self.gamma[self.i3(mu, s, t)]
    }

    /// ∂_κ Γ^μ_{στ}
    pub fn dgam(&self, mu: usize, s: usize, t: usize, k: usize) -> f64 {
        self.dgamma[self.i4(mu, s, t, k)]
    }

    /// ∇_κ Γ_{στ}{}^μ
    pub fn gam_cov(&self, s: usize, t: usize, k: usize, mu: usize) -> f64 {
        self.gamma_cov[self.i4(mu, s, t, k)]
    }

    /// ∂_k g_{ij}
    pub fn dmetric(&self, i: usize, j: usize, k: usize) -> f64 {
        self.dg[self.i3(i, j, k)]
    }

    /// ∂_k ∂_l g_{ij}
    pub fn d2metric(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.d2g[self.i4(i, j, k, l)]
    }

    /// R_{στκ}{}^μ in the placement used by the expansion formulas.
    pub fn riemann(&self, s: usize, t: usize, k: usize, mu: usize) -> f64 {
        self.riemann_std[self.i4(mu, s, k, t)]
    }

    /// R_{μλνσ} = g_{σρ} R_{μλν}{}^ρ.
    pub fn riemann_lower(&self, mu: usize, l: usize, n: usize, s: usize) -> f64 {
        (0..self.dim).map(|rho| self.g[s * self.dim + rho] * self.riemann(mu, l, n, rho)).sum()
    }

    pub fn ricci_at(&self, s: usize, t: usize) -> f64 {
        self.ricci[s * self.dim + t]
    }

    /// g^{στ} T_{στ}
    pub fn trace_t(&self) -> f64 {
        (0..self.dim * self.dim).map(|k| self.g_inv[k] * self.t[k]).sum()
    }

    /// g^{στ}(g^{μν} Γ_{τμ,κ} Γ^κ_{σν} + Γ^ν_{τμ} Γ^μ_{σν}) with Γ_{τμ,κ} = g_{κλ}Γ^λ_{τμ}:
    /// the combination multiplying δ(0) in the noncovariant expansion.
    pub fn delta_counter_combination(&self) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        for s in 0..d {
            for t in 0..d {
                let gst = self.g_inv[s * d + t];
                if gst == 0.0 {
                    continue;
                }
                for mu in 0..d {
                    for nu in 0..d {
                        let gmn = self.g_inv[mu * d + nu];
                        for k in 0..d {
                            let lowered: f64 =
                                (0..d).map(|l| self.g[k * d + l] * self.gam(l, t, mu)).sum();
                            acc += gst * gmn * lowered * self.gam(k, s, nu);
                        }
                    }
                    for nu in 0..d {
                        acc += gst * self.gam(nu, t, mu) * self.gam(mu, s, nu);
                    }
                }
            }
        }
        acc
    }
}

pub fn point_geometry(spec: &MetricSpec, q0: &[f64]) -> Result<PointGeometry, GeometryError> {
    PointGeometry::from_chart(spec, q0)
}

/// |g^{στ}T_{στ} − (1/√g) ∂_μ(√g V^μ)| with fourth-order central differences
/// of √g V^μ at step `h`.
pub fn divergence_identity_residual(
    chart: &dyn Chart,
    q0: &[f64],
    h: f64,
) -> Result<f64, GeometryError> {
    let scale = q0.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if !(h > 0.0) || h < 1e-9 * scale {
        return Err(GeometryError::StepUnderflow(h));
    }
    if !h.is_finite() || h > 0.25 * scale {
        return Err(GeometryError::StepOverflow(h));
    }
    let center = PointGeometry::from_chart(chart, q0)?;
    let d = q0.len();
    let density = |q: &[f64], mu: usize| -> Result<f64, GeometryError> {
        let pg = PointGeometry::from_chart(chart, q)?;
        Ok(pg.sqrt_g * pg.v[mu])
    };
    let mut div = 0.0;
    for mu in 0..d {
        let shifted = |k: f64| {
            let mut q = q0.to_vec();
            q[mu] += k * h;
            q
        };
        let fp2 = density(&shifted(2.0), mu)?;
        let fp1 = density(&shifted(1.0), mu)?;
        let fm1 = density(&shifted(-1.0), mu)?;
        let fm2 = density(&shifted(-2.0), mu)?;
        div += (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
    }
    Ok((center.trace_t() - div / center.sqrt_g).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metricspec::builtin;
    use std::collections::BTreeMap;

    #[test]
    fn flat_vanishes() {
        let spec = builtin("flat", 3, &BTreeMap::new()).unwrap();
        let pg = point_geometry(&spec, &[0.1, -2.0, 5.0]).unwrap();
        assert!(pg.gamma.iter().chain(&pg.riemann_std).chain(&pg.t).chain(&pg.v).all(|&x| x == 0.0));
        assert_eq!(pg.r, 0.0);
        assert_eq!(divergence_identity_residual(&spec, &[0.1, -2.0, 5.0], 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn sphere_scalar_curvature() {
        for d in 1..=5 {
            let spec = builtin("sphere", d, &BTreeMap::new()).unwrap();
            let pg = point_geometry(&spec, &vec![0.0; d]).unwrap();
            assert!((pg.r - (d * (d - 1)) as f64).abs() < 1e-12, "D={d}: {}", pg.r);
        }
    }

    #[test]
    fn step_guard() {
        let spec = builtin("sphere", 2, &BTreeMap::new()).unwrap();
        assert!(matches!(
            divergence_identity_residual(&spec, &[0.1, 0.0], 0.0),
            Err(GeometryError::StepUnderflow(_))
        ));
        assert!(matches!(
            divergence_identity_residual(&spec, &[0.1, 0.0], 1.0),
            Err(GeometryError::StepOverflow(_))
        ));
    }

    #[test]
    fn indefinite_metric_rejected() {
        let spec = crate::metricspec::parse_metric(
            r#"{"name":"m","dim":2,"coords":["t","x"],"g":[["-1","0"],["0","1"]]}"#,
        )
        .unwrap();
        assert!(matches!(point_geometry(&spec, &[0.0, 0.0]), Err(GeometryError::NotPositiveDefinite { .. })));
    }
}
