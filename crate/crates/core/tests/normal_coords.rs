use curvepath_core::geometry::point_geometry;
use curvepath_core::metricspec::{builtin_from_tag, MetricSpec};
use curvepath_core::normal_coords::{deta_dq0, normal_curvature_check, NormalExpansion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

const CATALOG: [&str; 6] = ["sphere:2", "sphere:3", "sphere-stereographic:2", "hyperbolic-ball:2", "hyperbolic-ball:3", "conformal2d:2"];

fn random_points(dim: usize, n: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-radius..radius)).collect();
            if p.iter().map(|x| x * x).sum::<f64>() < radius * radius {
                break p;
            }
        })
        .collect()
}

fn unit(dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|a| 0.8 - 0.5 * a as f64).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Least-squares slope of log err against log r.
fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|(r, e)| (r.ln(), e.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn inverse(m: &[f64], d: usize) -> Vec<f64> {
    let inv = DMatrix::from_row_slice(d, d, m).try_inverse().unwrap();
    (0..d * d).map(|k| inv[(k / d, k % d)]).collect()
}

/// Geodesic q̈ = −Γ q̇ q̇ from q₀ with velocity v, integrated to t = 1 by RK4.
fn geodesic_endpoint(spec: &MetricSpec, q0: &[f64], v: &[f64], steps: usize) -> Vec<f64> {
    let d = q0.len();
    let rhs = |q: &[f64], u: &[f64]| -> Vec<f64> {
        let g = point_geometry(spec, q).unwrap();
        (0..d)
            .map(|m| {
                let mut a = 0.0;
                for s in 0..d {
                    for t in 0..d {
                        a -= g.gam(m, s, t) * u[s] * u[t];
                    }
                }
                a
            })
            .collect()
    };
    let mut q = q0.to_vec();
    let mut u = v.to_vec();
    let h = 1.0 / steps as f64;
    let axpy = |x: &[f64], a: f64, y: &[f64]| x.iter().zip(y).map(|(x, y)| x + a * y).collect::<Vec<f64>>();
    for _ in 0..steps {
        let k1q = u.clone();
        let k1u = rhs(&q, &u);
        let k2q = axpy(&u, 0.5 * h, &k1u);
        let k2u = rhs(&axpy(&q, 0.5 * h, &k1q), &k2q);
        let k3q = axpy(&u, 0.5 * h, &k2u);
        let k3u = rhs(&axpy(&q, 0.5 * h, &k2q), &k3q);
        let k4q = axpy(&u, h, &k3u);
        let k4u = rhs(&axpy(&q, h, &k3q), &k4q);
        for a in 0..d {
            q[a] += h / 6.0 * (k1q[a] + 2.0 * k2q[a] + 2.0 * k3q[a] + k4q[a]);
            u[a] += h / 6.0 * (k1u[a] + 2.0 * k2u[a] + 2.0 * k3u[a] + k4u[a]);
        }
    }
    q
}

#[test]
fn cubic_map_follows_geodesics() {
    for (tag, q0) in [("sphere:2", vec![0.3, 0.1]), ("hyperbolic-ball:2", vec![0.2, -0.3]), ("conformal2d:2", vec![0.1, 0.4])] {
        let spec = builtin_from_tag(tag).unwrap();
        let ne = NormalExpansion::at(&spec, &q0).unwrap();
        let dir = unit(2);
        let pts: Vec<(f64, f64)> = [0.08, 0.04, 0.02, 0.01]
            .iter()
            .map(|&r| {
                let xi: Vec<f64> = dir.iter().map(|x| r * x).collect();
                let end = geodesic_endpoint(&spec, &q0, &xi, 64);
                let eta = ne.eta_of_xi(&xi);
                let approx: Vec<f64> = q0.iter().zip(&eta).map(|(a, b)| a + b).collect();
                (r, max_diff(&end, &approx))
            })
            .collect();
        let s = slope(&pts);
        assert!(s > 3.7, "{tag}: geodesic agreement exponent {s} ({pts:?})");
    }
}

#[test]
fn roundtrip_is_fourth_order() {
    for tag in CATALOG {
        let spec = builtin_from_tag(tag).unwrap();
        for q0 in random_points(spec.dim(), 3, 0.5, 4) {
            let ne = NormalExpansion::at(&spec, &q0).unwrap();
            let e = ne.roundtrip_exponent(&unit(spec.dim()), &[1e-2, 5e-3, 2.5e-3, 1.25e-3]);
            assert!(e >= 3.7, "{tag} at {q0:?}: exponent {e}");
        }
    }
    let spec = builtin_from_tag("sphere:2").unwrap();
    let ne = NormalExpansion::at(&spec, &[0.3, 0.1]).unwrap();
    let e = ne.roundtrip_exponent(&unit(2), &[1e-2, 3e-3, 1e-3, 3e-4, 1e-4]);
    assert!((e - 4.0).abs() <= 0.2, "exponent {e}");
}

#[test]
fn trivial_cases() {
    let spec = builtin_from_tag("sphere:2").unwrap();
    let ne = NormalExpansion::at(&spec, &[0.3, 0.1]).unwrap();
    assert_eq!(ne.eta_of_xi(&[0.0, 0.0]), vec![0.0, 0.0]);
    assert_eq!(ne.xi_of_eta(&[0.0, 0.0]), vec![0.0, 0.0]);
    assert_eq!(ne.connection_q(&[0.0, 0.0]), vec![1.0, 0.0, 0.0, 1.0]);
    let flat = builtin_from_tag("flat:2").unwrap();
    let nf = NormalExpansion::at(&flat, &[0.5, -1.0]).unwrap();
    let xi = [0.3, -0.7];
    assert_eq!(nf.connection_q(&xi), vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!(nf.jacobian_trlog(&xi), 0.0);
    assert_eq!(nf.measure_trlog(&xi), 0.0);
    assert_eq!(normal_curvature_check(&flat, &[0.5, -1.0]).unwrap(), 0.0);
}

#[test]
fn jacobian_series_are_consistent() {
    for tag in CATALOG {
        let spec = builtin_from_tag(tag).unwrap();
        let d = spec.dim();
        let q0 = random_points(d, 1, 0.5, 8).remove(0);
        let ne = NormalExpansion::at(&spec, &q0).unwrap();
        let dir = unit(d);
        let mut series = Vec::new();
        let mut inverse_series = Vec::new();
        let mut inverse_map = Vec::new();
        for r in [0.04, 0.02, 0.01, 0.005] {
            let xi: Vec<f64> = dir.iter().map(|x| r * x).collect();
            let j = ne.deta_dxi(&xi);
            let jinv = inverse(&j, d);
            series.push((r, max_diff(&ne.deta_dxi_series(&xi), &j)));
            inverse_series.push((r, max_diff(&ne.deta_dxi_inverse_series(&xi), &jinv)));
            inverse_map.push((r, max_diff(&ne.dxi_deta(&ne.eta_of_xi(&xi)), &jinv)));
        }
        for (name, pts) in [("Jacobian series", &series), ("inverse series", &inverse_series), ("inverse map", &inverse_map)] {
            // agreement to rounding means the truncations coincide exactly
            if pts.iter().all(|p| p.1 < 1e-13) {
                continue;
            }
            let s = slope(pts);
            assert!(s > 2.7, "{tag} {name}: exponent {s} ({pts:?})");
        }
    }
}

#[test]
fn compensation_identity() {
    for tag in CATALOG {
        let spec = builtin_from_tag(tag).unwrap();
        let d = spec.dim();
        let q0 = random_points(d, 1, 0.5, 12).remove(0);
        let ne = NormalExpansion::at(&spec, &q0).unwrap();
        let eye: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
        let pts: Vec<(f64, f64)> = [0.08, 0.04, 0.02, 0.01]
            .iter()
            .map(|&r| {
                let xi: Vec<f64> = unit(d).iter().map(|x| r * x).collect();
                let dq = deta_dq0(&spec, &q0, &xi, 1e-5).unwrap();
                (r, max_diff(&ne.compensation_matrix(&xi, &dq), &eye))
            })
            .collect();
        let s = slope(&pts);
        assert!(s > 2.7, "{tag}: exponent {s} ({pts:?})");
    }
}

#[test]
fn trace_logs_match_determinant_oracles() {
    for tag in CATALOG {
        let spec = builtin_from_tag(tag).unwrap();
        let d = spec.dim();
        let q0 = random_points(d, 1, 0.4, 21).remove(0);
        let ne = NormalExpansion::at(&spec, &q0).unwrap();
        let g0 = DMatrix::from_row_slice(d, d, &spec.eval(&q0).unwrap()).determinant();
        let mut jac = Vec::new();
        let mut meas = Vec::new();
        for r in [0.04, 0.02, 0.01, 0.005] {
            let xi: Vec<f64> = unit(d).iter().map(|x| r * x).collect();
            let logdet = DMatrix::from_row_slice(d, d, &ne.deta_dxi(&xi)).determinant().ln();
            jac.push((r, (ne.jacobian_trlog(&xi) - logdet).abs()));
            let q: Vec<f64> = q0.iter().zip(ne.eta_of_xi(&xi)).map(|(a, b)| a + b).collect();
            let g = DMatrix::from_row_slice(d, d, &spec.eval(&q).unwrap()).determinant();
            meas.push((r, (ne.measure_trlog(&xi) - 0.5 * (g / g0).ln()).abs()));
        }
        assert!(slope(&jac) > 2.7, "{tag} Jacobian: {jac:?}");
        assert!(slope(&meas) > 2.7, "{tag} measure: {meas:?}");
    }
}

#[test]
fn line_jacobian_quadratic_coefficient() {
    // D = 1 sphere: Γ(0) = 0 and ∂Γ(0) = 1, so tr log(∂η/∂ξ) = −ξ²/2 + O(ξ³)
    let spec = builtin_from_tag("sphere:1").unwrap();
    let ne = NormalExpansion::at(&spec, &[0.0]).unwrap();
    let (lin, quad) = ne.jacobian_trlog_coeffs();
    assert_eq!(lin, vec![0.0]);
    for x in [1e-2, 1e-3] {
        let logdet = ne.deta_dxi(&[x])[0].ln();
        assert!((quad[0] * x * x - logdet).abs() < x.powi(3), "{} vs {logdet}", quad[0] * x * x);
    }
    assert!((quad[0] + 0.5).abs() < 1e-12);
}

#[test]
fn measure_plus_jacobian_is_minus_ricci_over_six() {
    for tag in ["sphere:2", "sphere:3", "conformal2d:2", "hyperbolic-ball:2"] {
        let spec = builtin_from_tag(tag).unwrap();
        let d = spec.dim();
        for q0 in random_points(d, 10, 0.6, 30) {
            let g = point_geometry(&spec, &q0).unwrap();
            let ne = NormalExpansion::new(g.clone());
            let (lj, qj) = ne.jacobian_trlog_coeffs();
            let (lm, qm) = ne.measure_trlog_coeffs();
            for k in 0..d {
                assert!((lj[k] + lm[k]).abs() < 1e-12);
                for l in 0..d {
                    let sum = qj[k * d + l] + qm[k * d + l];
                    assert!((sum + g.ricci[k * d + l] / 6.0).abs() < 1e-8, "{tag} {q0:?}");
                }
            }
        }
    }
}

#[test]
fn normal_chart_connection_derivative() {
    for (tag, q0) in [("sphere:2", vec![0.0, 0.0]), ("sphere:2", vec![0.3, 0.2]), ("hyperbolic-ball:2", vec![0.1, 0.2]), ("conformal2d:2", vec![0.2, 0.3]), ("sphere:3", vec![0.1, 0.2, 0.3])] {
        let spec = builtin_from_tag(tag).unwrap();
        let r = normal_curvature_check(&spec, &q0).unwrap();
        assert!(r <= 1e-5, "{tag} {q0:?}: {r}");
    }
}
