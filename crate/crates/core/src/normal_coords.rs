//! Geodesic (Riemann normal) coordinate maps around an expansion point q₀.
//!
//! All maps are truncated polynomials: cubic in the fluctuation for
//! η(q₀,ξ) and ξ(q₀,η), quadratic for Q and the two trace-logs.

use crate::geometry::{GeometryError, PointGeometry};
use crate::jet::Jet3;
use crate::metricspec::{Chart, MetricError};

#[derive(Clone, Debug)]
pub struct NormalExpansion {
    pub geom: PointGeometry,
    /// Γ_{(στκ)}{}^μ at `((μ·D + σ)·D + τ)·D + κ`, cyclic average.
    pub eta_cubic: Vec<f64>,
    /// Γ̃_{(στκ)}{}^μ, cyclic average of ∂_κΓ^μ_{στ} + Γ^ν_{κσ}Γ^μ_{ντ}.
    pub xi_cubic: Vec<f64>,
}

fn cyclic_average(d: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; d * d * d * d];
    for mu in 0..d {
        for s in 0..d {
            for t in 0..d {
                for k in 0..d {
                    out[((mu * d + s) * d + t) * d + k] =
                        (f(mu, s, t, k) + f(mu, t, k, s) + f(mu, k, s, t)) / 3.0;
                }
            }
        }
    }
    out
}

/// Minimal arithmetic shared by plain numbers and jets.
trait Ring: Clone {
    fn zero_like(&self) -> Self;
    fn one_like(&self) -> Self;
    fn plus(&self, o: &Self) -> Self;
    fn times(&self, o: &Self) -> Self;
    fn scaled(&self, a: f64) -> Self;
}

impl Ring for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn one_like(&self) -> Self {
        1.0
    }
    fn plus(&self, o: &Self) -> Self {
        self + o
    }
    fn times(&self, o: &Self) -> Self {
        self * o
    }
    fn scaled(&self, a: f64) -> Self {
        a * self
    }
}

impl Ring for Jet3 {
    fn zero_like(&self) -> Self {
        self.constant_like(0.0)
    }
    fn one_like(&self) -> Self {
        self.constant_like(1.0)
    }
    fn plus(&self, o: &Self) -> Self {
        self + o
    }
    fn times(&self, o: &Self) -> Self {
        self * o
    }
    fn scaled(&self, a: f64) -> Self {
        self.scale(a)
    }
}

impl NormalExpansion {
    pub fn new(geom: PointGeometry) -> Self {
        let d = geom.dim;
        let eta_cubic = cyclic_average(d, |mu, s, t, k| geom.gam_cov(s, t, k, mu));
        let xi_cubic = cyclic_average(d, |mu, s, t, k| {
            let mut acc = geom.dgam(mu, s, t, k);
            for nu in 0..d {
                acc += geom.gam(nu, k, s) * geom.gam(mu, nu, t);
            }
            acc
        });
        Self { geom, eta_cubic, xi_cubic }
    }

    pub fn at(chart: &dyn Chart, q0: &[f64]) -> Result<Self, GeometryError> {
        Ok(Self::new(PointGeometry::from_chart(chart, q0)?))
    }

    pub fn dim(&self) -> usize {
        self.geom.dim
    }

    fn c3(&self, table: &[f64], mu: usize, s: usize, t: usize, k: usize) -> f64 {
        let d = self.dim();
        table[((mu * d + s) * d + t) * d + k]
    }

    /// x + a·Γx x + b·C x x x
    fn cubic_map<T: Ring>(&self, x: &[T], a: f64, cubic: &[f64], b: f64) -> Vec<T> {
        let d = self.dim();
        let mut out: Vec<T> = x.to_vec();
        for mu in 0..d {
            let mut acc = x[0].zero_like();
            for s in 0..d {
                for t in 0..d {
                    let xx = x[s].times(&x[t]);
                    let gm = self.geom.gam(mu, s, t);
                    if gm != 0.0 {
                        acc = acc.plus(&xx.scaled(a * gm));
                    }
                    for k in 0..d {
                        let c = self.c3(cubic, mu, s, t, k);
                        if c != 0.0 {
                            acc = acc.plus(&xx.times(&x[k]).scaled(b * c));
                        }
                    }
                }
            }
            out[mu] = out[mu].plus(&acc);
        }
        out
    }

    /// η^μ = ξ^μ − ½Γ_{(στ)}{}^μ ξ^σξ^τ − (1/6)Γ_{(στκ)}{}^μ ξ^σξ^τξ^κ
    pub fn eta_of_xi(&self, xi: &[f64]) -> Vec<f64> {
        self.cubic_map(xi, -0.5, &self.eta_cubic, -1.0 / 6.0)
    }

    /// ξ^μ = η^μ + ½Γ̃_{(στ)}{}^μ η^ση^τ + (1/6)Γ̃_{(στκ)}{}^μ η^ση^τη^κ
    pub fn xi_of_eta(&self, eta: &[f64]) -> Vec<f64> {
        self.cubic_map(eta, 0.5, &self.xi_cubic, 1.0 / 6.0)
    }

    /// Least-squares slope of log‖ξ(η(rξ̂)) − rξ̂‖ against log r.
    pub fn roundtrip_exponent(&self, dir: &[f64], radii: &[f64]) -> f64 {
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pts: Vec<(f64, f64)> = radii
            .iter()
            .map(|&r| {
                let xi: Vec<f64> = dir.iter().map(|x| r * x / norm).collect();
                let back = self.xi_of_eta(&self.eta_of_xi(&xi));
                let err = back.iter().zip(&xi).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                (r.ln(), err.ln())
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    fn eta_of_xi_jets(&self, xi: &[Jet3]) -> Vec<Jet3> {
        self.cubic_map(xi, -0.5, &self.eta_cubic, -1.0 / 6.0)
    }

    /// Exact Jacobian ∂η^μ/∂ξ^ν of the cubic map, row μ.
    fn jacobian_of<T: Ring>(&self, xi: &[T]) -> Vec<T> {
        let d = self.dim();
        let zero = xi[0].zero_like();
        let mut out = vec![zero.clone(); d * d];
        for mu in 0..d {
            for nu in 0..d {
                let mut acc = if mu == nu { zero.one_like() } else { zero.clone() };
                for s in 0..d {
                    let gm = self.geom.gam(mu, nu, s);
                    if gm != 0.0 {
                        acc = acc.plus(&xi[s].scaled(-gm));
                    }
                    for t in 0..d {
                        let c = self.c3(&self.eta_cubic, mu, nu, s, t)
                            + self.c3(&self.eta_cubic, mu, s, nu, t)
                            + self.c3(&self.eta_cubic, mu, s, t, nu);
                        if c != 0.0 {
                            acc = acc.plus(&xi[s].times(&xi[t]).scaled(-c / 6.0));
                        }
                    }
                }
                out[mu * d + nu] = acc;
            }
        }
        out
    }

    /// ∂η^μ/∂ξ^ν (row-major, row μ), the exact derivative of [`Self::eta_of_xi`].
    pub fn deta_dxi(&self, xi: &[f64]) -> Vec<f64> {
        self.jacobian_of(xi)
    }

    /// Quadratic truncation of ∂η/∂ξ:
    /// δ − Γ^μ_{νσ}ξ^σ − ⅓(∂_σΓ^μ_{ντ} + ½∂_νΓ^μ_{στ} − 2Γ^κ_{τν}Γ^μ_{κσ} − Γ^κ_{τσ}Γ^μ_{κν})ξ^σξ^τ.
    pub fn deta_dxi_series(&self, xi: &[f64]) -> Vec<f64> {
        self.matrix_series(xi, -1.0, -1.0 / 3.0, -2.0, -1.0)
    }

    /// Quadratic truncation of the inverse:
    /// δ + Γ^μ_{νσ}ξ^σ + ⅓(∂_σΓ^μ_{ντ} + ½∂_νΓ^μ_{στ} + Γ^κ_{τν}Γ^μ_{κσ} − Γ^κ_{τσ}Γ^μ_{κν})ξ^σξ^τ.
    pub fn deta_dxi_inverse_series(&self, xi: &[f64]) -> Vec<f64> {
        self.matrix_series(xi, 1.0, 1.0 / 3.0, 1.0, -1.0)
    }

    fn matrix_series(&self, xi: &[f64], lin: f64, quad: f64, c_a: f64, c_b: f64) -> Vec<f64> {
        let d = self.dim();
        let g = &self.geom;
        let mut out = vec![0.0; d * d];
        for mu in 0..d {
            for nu in 0..d {
                let mut acc = if mu == nu { 1.0 } else { 0.0 };
                for s in 0..d {
                    acc += lin * g.gam(mu, nu, s) * xi[s];
                    for t in 0..d {
                        let mut c = g.dgam(mu, nu, t, s) + 0.5 * g.dgam(mu, s, t, nu);
                        for k in 0..d {
                            c += c_a * g.gam(k, t, nu) * g.gam(mu, k, s)
                                + c_b * g.gam(k, t, s) * g.gam(mu, k, nu);
                        }
                        acc += quad * c * xi[s] * xi[t];
                    }
                }
                out[mu * d + nu] = acc;
            }
        }
        out
    }

    /// ∂ξ^μ/∂η^ν of the inverse map, evaluated at η.
    pub fn dxi_deta(&self, eta: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let g = &self.geom;
        let mut out = vec![0.0; d * d];
        for mu in 0..d {
            for nu in 0..d {
                let mut acc = if mu == nu { 1.0 } else { 0.0 };
                for s in 0..d {
                    acc += g.gam(mu, nu, s) * eta[s];
                    for t in 0..d {
                        let c = self.c3(&self.xi_cubic, mu, nu, s, t)
                            + self.c3(&self.xi_cubic, mu, s, nu, t)
                            + self.c3(&self.xi_cubic, mu, s, t, nu);
                        acc += c / 6.0 * eta[s] * eta[t];
                    }
                }
                out[mu * d + nu] = acc;
            }
        }
        out
    }

    /// Q^μ_ν = δ^μ_ν + Γ^μ_{νσ}ξ^σ + ⅓R_{σντ}{}^μ ξ^σξ^τ (row μ).
    pub fn connection_q(&self, xi: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let g = &self.geom;
        let mut out = vec![0.0; d * d];
        for mu in 0..d {
            for nu in 0..d {
                let mut acc = if mu == nu { 1.0 } else { 0.0 };
                for s in 0..d {
                    acc += g.gam(mu, nu, s) * xi[s];
                    for t in 0..d {
                        acc += g.riemann(s, nu, t, mu) * xi[s] * xi[t] / 3.0;
                    }
                }
                out[mu * d + nu] = acc;
            }
        }
        out
    }

    /// Linear coefficient −Γ^μ_{μσ} and symmetric quadratic matrix of tr log(∂η/∂ξ).
    pub fn jacobian_trlog_coeffs(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let g = &self.geom;
        let lin = (0..d).map(|s| -(0..d).map(|mu| g.gam(mu, mu, s)).sum::<f64>()).collect();
        let mut quad = vec![0.0; d * d];
        for s in 0..d {
            for t in 0..d {
                let mut c = 0.0;
                for mu in 0..d {
                    for nu in 0..d {
                        c += 0.5 * g.gam(mu, nu, t) * g.gam(nu, mu, s) + g.gam(nu, t, s) * g.gam(mu, nu, mu);
                    }
                    c += -g.dgam(mu, mu, t, s) - 0.5 * g.dgam(mu, s, t, mu);
                }
                quad[s * d + t] += c / 6.0;
                quad[t * d + s] += c / 6.0;
            }
        }
        (lin, quad)
    }

    /// Linear coefficient Γ^μ_{μσ} and symmetric quadratic matrix of ½log(g(q₀+η(ξ))/g(q₀)).
    pub fn measure_trlog_coeffs(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let g = &self.geom;
        let lin = (0..d).map(|s| (0..d).map(|mu| g.gam(mu, mu, s)).sum::<f64>()).collect();
        let mut quad = vec![0.0; d * d];
        for s in 0..d {
            for t in 0..d {
                let mut c = 0.0;
                for mu in 0..d {
                    c += g.dgam(mu, t, mu, s);
                    for nu in 0..d {
                        c -= g.gam(mu, nu, mu) * g.gam(nu, s, t);
                    }
                }
                quad[s * d + t] += 0.25 * c;
                quad[t * d + s] += 0.25 * c;
            }
        }
        (lin, quad)
    }

    /// tr log(∂η/∂ξ) through quadratic order.
    pub fn jacobian_trlog(&self, xi: &[f64]) -> f64 {
        let (lin, quad) = self.jacobian_trlog_coeffs();
        eval_quadratic(&lin, &quad, xi)
    }

    /// ½ log(g(q₀+η(ξ))/g(q₀)) through quadratic order in ξ.
    pub fn measure_trlog(&self, xi: &[f64]) -> f64 {
        let (lin, quad) = self.measure_trlog_coeffs();
        eval_quadratic(&lin, &quad, xi)
    }

    /// ½ log(g(q₀+η)/g(q₀)) = Γ^μ_{μσ}η^σ + ½∂_σΓ^μ_{τμ}η^ση^τ in the η variables.
    pub fn measure_trlog_eta(&self, eta: &[f64]) -> f64 {
        let d = self.dim();
        let g = &self.geom;
        let mut acc = 0.0;
        for s in 0..d {
            for mu in 0..d {
                acc += g.gam(mu, mu, s) * eta[s];
                for t in 0..d {
                    acc += 0.5 * g.dgam(mu, t, mu, s) * eta[s] * eta[t];
                }
            }
        }
        acc
    }

    /// Bracket of the compensation identity,
    /// [Q^κ_ν ∂η^μ/∂ξ^κ − ∂η^μ/∂q₀^ν]; `deta_dq0` is row μ, column ν.
    pub fn compensation_matrix(&self, xi: &[f64], deta_dq0: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let q = self.connection_q(xi);
        let j = self.deta_dxi(xi);
        let mut out = vec![0.0; d * d];
        for mu in 0..d {
            for nu in 0..d {
                let mut acc = -deta_dq0[mu * d + nu];
                for k in 0..d {
                    acc += q[k * d + nu] * j[mu * d + k];
                }
                out[mu * d + nu] = acc;
            }
        }
        out
    }
}

fn eval_quadratic(lin: &[f64], quad: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for s in 0..d {
        acc += lin[s] * x[s];
        for t in 0..d {
            acc += quad[s * d + t] * x[s] * x[t];
        }
    }
    acc
}

/// ∂η^μ/∂q₀^ν at fixed ξ by central differences over q₀ (row μ, column ν).
pub fn deta_dq0(chart: &dyn Chart, q0: &[f64], xi: &[f64], h: f64) -> Result<Vec<f64>, GeometryError> {
    let d = q0.len();
    let mut out = vec![0.0; d * d];
    for nu in 0..d {
        let step = h * q0[nu].abs().max(1.0);
        let mut qp = q0.to_vec();
        let mut qm = q0.to_vec();
        qp[nu] += step;
        qm[nu] -= step;
        let ep = NormalExpansion::at(chart, &qp)?.eta_of_xi(xi);
        let em = NormalExpansion::at(chart, &qm)?.eta_of_xi(xi);
        for mu in 0..d {
            out[mu * d + nu] = (ep[mu] - em[mu]) / (2.0 * step);
        }
    }
    Ok(out)
}

/// A chart geodesic at q₀: the base chart composed with η(q₀,ξ).
///
/// The pulled-back metric is exact through second order in ξ, which is
/// all that its Christoffels and curvature at ξ = 0 depend on.
pub struct NormalChart<'a> {
    base: &'a dyn Chart,
    expansion: NormalExpansion,
}

impl<'a> NormalChart<'a> {
    pub fn new(base: &'a dyn Chart, q0: &[f64]) -> Result<Self, GeometryError> {
        Ok(Self { base, expansion: NormalExpansion::at(base, q0)? })
    }

    pub fn expansion(&self) -> &NormalExpansion {
        &self.expansion
    }
}

impl Chart for NormalChart<'_> {
    fn dim(&self) -> usize {
        self.expansion.dim()
    }

    fn label(&self) -> String {
        format!("normal({}) at {:?}", self.base.label(), self.expansion.geom.q0)
    }

    fn metric_jets(&self, xi: &[Jet3]) -> Result<Vec<Jet3>, MetricError> {
        let d = self.dim();
        let eta = self.expansion.eta_of_xi_jets(xi);
        let q: Vec<Jet3> = eta
            .iter()
            .zip(&self.expansion.geom.q0)
            .map(|(e, &x)| e + x)
            .collect();
        let g = self.base.metric_jets(&q)?;
        let j = self.expansion.jacobian_of(xi);
        let mut out = Vec::with_capacity(d * d);
        for a in 0..d {
            for b in 0..d {
                let mut acc = xi[0].constant_like(0.0);
                for mu in 0..d {
                    let left = &j[mu * d + a];
                    for nu in 0..d {
                        acc += &(&(left * &j[nu * d + b]) * &g[mu * d + nu]);
                    }
                }
                out.push(acc);
            }
        }
        Ok(out)
    }
}

/// Max-norm residual of ∂_κΓ^μ_{τσ} = −⅓(R_{τκσ}{}^μ + R_{σκτ}{}^μ) in the
/// normal chart built at q₀, together with |Γ(0)|. Derivatives of Γ are
/// fourth-order central differences.
pub fn normal_curvature_check(chart: &dyn Chart, q0: &[f64]) -> Result<f64, GeometryError> {
    let normal = NormalChart::new(chart, q0)?;
    let d = q0.len();
    let origin = vec![0.0; d];
    let at0 = PointGeometry::from_chart(&normal, &origin)?;
    let scale = at0.riemann_std.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let h = 1e-3 / scale.sqrt();
    let mut residual = at0.gamma.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gamma_at = |k: usize, s: f64| -> Result<Vec<f64>, GeometryError> {
        let mut x = origin.clone();
        x[k] = s * h;
        PointGeometry::from_chart(&normal, &x).map(|p| p.gamma)
    };
    for k in 0..d {
        let (p2, p1, m1, m2) = (gamma_at(k, 2.0)?, gamma_at(k, 1.0)?, gamma_at(k, -1.0)?, gamma_at(k, -2.0)?);
        for mu in 0..d {
            for t in 0..d {
                for s in 0..d {
                    let idx = (mu * d + t) * d + s;
                    let dk = (-p2[idx] + 8.0 * p1[idx] - 8.0 * m1[idx] + m2[idx]) / (12.0 * h);
                    let rhs = -(at0.riemann(t, k, s, mu) + at0.riemann(s, k, t, mu)) / 3.0;
                    residual = residual.max((dk - rhs).abs());
                }
            }
        }
    }
    Ok(residual)
}
