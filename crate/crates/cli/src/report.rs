use curvepath_core::geometry::PointGeometry;
use curvepath_core::metricspec::MetricSpec;
use serde_json::{json, Value};

fn matrix(v: &[f64], d: usize) -> Value {
    json!(v.chunks(d).collect::<Vec<_>>())
}

/// Rank-3 tensor at `(a·D + b)·D + c` as nested arrays.
fn rank3(v: &[f64], d: usize) -> Value {
    json!(v.chunks(d * d).map(|m| m.chunks(d).collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn rank4(v: &[f64], d: usize) -> Value {
    json!(v.chunks(d * d * d).map(|t| rank3(t, d)).collect::<Vec<_>>())
}

pub fn geometry(spec: &MetricSpec, g: &PointGeometry, divergence_residual: f64) -> Value {
    let d = g.dim;
    let trace_t: f64 = g.trace_t();
    json!({
        "metric": spec.name(),
        "dim": d,
        "coords": spec.coords(),
        "params": spec.params(),
        "q0": g.q0,
        "g": matrix(&g.g, d),
        "g_inv": matrix(&g.g_inv, d),
        "sqrt_g": g.sqrt_g,
        "christoffel": rank3(&g.gamma, d),
        "riemann": rank4(&g.riemann_std, d),
        "ricci": matrix(&g.ricci, d),
        "R": g.r,
        "T": matrix(&g.t, d),
        "trace_T": trace_t,
        "V": g.v,
        "div_V": g.div_v,
        "divergence_identity_residual": divergence_residual,
    })
}
