use curvepath_core::geometry::{divergence_identity_residual, point_geometry, PointGeometry};
use curvepath_core::metricspec::{self, builtin_from_tag, sphere_to_stereographic, MetricSpec};
use rand::{Rng, SeedableRng};

const CATALOG: [&str; 7] =
    ["flat:2", "sphere:2", "sphere:3", "sphere-stereographic:2", "sphere-stereographic:3", "hyperbolic-ball:2", "conformal2d:2"];

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

/// Γ^ρ_{στ} at a shifted point, from an independent evaluation.
fn gamma_at(spec: &MetricSpec, q: &[f64], k: usize, h: f64) -> Vec<f64> {
    let mut p = q.to_vec();
    p[k] += h;
    point_geometry(spec, &p).unwrap().gamma
}

/// Rm^ρ_{σμν} = ∂_μΓ^ρ_{νσ} − ∂_νΓ^ρ_{μσ} + Γ^ρ_{μλ}Γ^λ_{νσ} − Γ^ρ_{νλ}Γ^λ_{μσ}
/// with ∂Γ from 4th-order central differences.
fn riemann_by_differences(spec: &MetricSpec, q: &[f64]) -> Vec<f64> {
    let d = q.len();
    let h = 1e-3;
    let g0 = point_geometry(spec, q).unwrap().gamma;
    let dgam: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let (p2, p1, m1, m2) = (gamma_at(spec, q, k, 2.0 * h), gamma_at(spec, q, k, h), gamma_at(spec, q, k, -h), gamma_at(spec, q, k, -2.0 * h));
            (0..d * d * d).map(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h)).collect()
        })
        .collect();
    let gm = |r: usize, s: usize, t: usize| g0[(r * d + s) * d + t];
    let dg = |r: usize, s: usize, t: usize, k: usize| dgam[k][(r * d + s) * d + t];
    let mut out = vec![0.0; d * d * d * d];
    for r in 0..d {
        for s in 0..d {
            for m in 0..d {
                for n in 0..d {
                    let mut v = dg(r, n, s, m) - dg(r, m, s, n);
                    for l in 0..d {
                        v += gm(r, m, l) * gm(l, n, s) - gm(r, n, l) * gm(l, m, s);
                    }
                    out[((r * d + s) * d + m) * d + n] = v;
                }
            }
        }
    }
    out
}

#[test]
fn riemann_matches_commutator_by_differences() {
    for tag in CATALOG {
        let spec = builtin_from_tag(tag).unwrap();
        for q in random_points(spec.dim(), 5, 0.6, 1) {
            let g = point_geometry(&spec, &q).unwrap();
            let fd = riemann_by_differences(&spec, &q);
            for (a, b) in g.riemann_std.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{tag} at {q:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn sphere_curvature_is_constant() {
    for d in 1..=5 {
        let spec = builtin_from_tag(&format!("sphere:{d}")).unwrap();
        for q in random_points(d, 20, 0.8, d as u64) {
            let g = point_geometry(&spec, &q).unwrap();
            assert!((g.r - (d * (d - 1)) as f64).abs() < 1e-9, "sphere:{d} at {q:?}: R = {}", g.r);
        }
    }
    let origin = point_geometry(&builtin_from_tag("sphere:2").unwrap(), &[0.0, 0.0]).unwrap();
    assert_eq!(origin.g, vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!(origin.sqrt_g, 1.0);
    assert!((origin.r - 2.0).abs() < 1e-12);
    let h = point_geometry(&builtin_from_tag("hyperbolic-ball:3").unwrap(), &[0.1, -0.2, 0.3]).unwrap();
    assert!((h.r + 6.0).abs() < 1e-9);
}

#[test]
fn chart_change_preserves_scalar_curvature() {
    for d in 2..=4 {
        let emb = builtin_from_tag(&format!("sphere:{d}")).unwrap();
        let st = builtin_from_tag(&format!("sphere-stereographic:{d}")).unwrap();
        for q in random_points(d, 20, 0.9, 7) {
            let a = point_geometry(&emb, &q).unwrap();
            let b = point_geometry(&st, &sphere_to_stereographic(&q)).unwrap();
            assert!((a.r - b.r).abs() < 1e-9);
            // g^{στ}T_{στ} is not a scalar: it generally changes between charts
            assert!(a.trace_t().is_finite() && b.trace_t().is_finite());
        }
    }
}

#[test]
fn divergence_identity_on_catalog() {
    for tag in CATALOG {
        let spec = builtin_from_tag(tag).unwrap();
        for q in random_points(spec.dim(), 20, 0.7, 3) {
            let r = divergence_identity_residual(&spec, &q, 1e-3).unwrap();
            assert!(r <= 1e-7, "{tag} at {q:?}: residual {r}");
        }
    }
    let flat = builtin_from_tag("flat:3").unwrap();
    assert_eq!(divergence_identity_residual(&flat, &[0.2, 0.4, -0.1], 1e-3).unwrap(), 0.0);
}

#[test]
fn divergence_identity_on_expression_metric() {
    let src = r#"{"name":"warped","dim":2,"coords":["x","y"],
        "g":[["exp(x*y/2) + y^2","x/3"],[null,"1 + sin(x)^2"]]}"#;
    let spec = metricspec::parse_metric(src).unwrap();
    for q in random_points(2, 20, 0.6, 9) {
        let r = divergence_identity_residual(&spec, &q, 1e-3).unwrap();
        assert!(r <= 1e-7, "{q:?}: {r}");
    }
}

#[test]
fn flat_tensors_vanish() {
    let g: PointGeometry = point_geometry(&builtin_from_tag("flat:3").unwrap(), &[1.0, -2.0, 0.5]).unwrap();
    assert_eq!(g.r, 0.0);
    assert!(g.t.iter().chain(&g.v).chain(&g.gamma).chain(&g.riemann_std).all(|x| *x == 0.0));
    assert_eq!(g.trace_t(), 0.0);
}

#[test]
fn index_placements_agree() {
    // R_{στκ}^μ = Rm^μ_{σκτ}, R_{σμτ}^μ = −R_{στ} and g^{λσ}g^{μν}R_{μλνσ} = −R
    let spec = builtin_from_tag("conformal2d:2").unwrap();
    let g = point_geometry(&spec, &[0.3, -0.2]).unwrap();
    let d = 2;
    for s in 0..d {
        for t in 0..d {
            let tr: f64 = (0..d).map(|m| g.riemann(s, m, t, m)).sum();
            assert!((tr + g.ricci_at(s, t)).abs() < 1e-12);
        }
    }
    let mut full = 0.0;
    for l in 0..d {
        for s in 0..d {
            for m in 0..d {
                for n in 0..d {
                    full += g.g_inv[l * d + s] * g.g_inv[m * d + n] * g.riemann_lower(m, l, n, s);
                }
            }
        }
    }
    assert!((full + g.r).abs() < 1e-12);
}
