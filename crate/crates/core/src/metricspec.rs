//! Charts: metric files, the builtin catalog, and jet evaluation of g_{μν}.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

use crate::expr::{EvalError, Expr, ParseError};
use crate::jet::Jet3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("metric file syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("g[{row}][{col}] syntax error at column {}: {}", .error.column, .error.message)]
    Expression { row: usize, col: usize, error: ParseError },
    #[error("g[{row}][{col}] uses unknown identifier `{name}`")]
    UnknownIdentifier { row: usize, col: usize, name: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("components g[{row}][{col}] and g[{col}][{row}] differ")]
    NotSymmetric { row: usize, col: usize },
    #[error("unknown builtin metric `{0}`")]
    UnknownBuiltin(String),
    #[error("builtin `{name}` does not exist in dimension {dim}")]
    InvalidDimension { name: String, dim: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("point {point:?} lies outside the domain of chart `{chart}`")]
    DomainViolation { chart: String, point: Vec<f64> },
    #[error("evaluating g[{row}][{col}]: {error}")]
    Evaluation { row: usize, col: usize, error: EvalError },
}

/// Anything that yields metric jets from jet-valued coordinates.
///
/// Taking jets as input lets charts be composed: feeding the jets of a
/// coordinate map produces the pulled-back metric with all derivatives.
pub trait Chart: Send + Sync {
    fn dim(&self) -> usize;
    fn label(&self) -> String;
    /// Row-major D×D metric jets at the point described by `q`.
    fn metric_jets(&self, q: &[Jet3]) -> Result<Vec<Jet3>, MetricError>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Builtin {
    Flat,
    /// Unit D-sphere in the embedding chart, g = δ + qq/(1−q²).
    Sphere,
    /// Unit D-sphere, stereographic chart, g = 4δ/(1+u²)².
    SphereStereographic,
    /// Poincaré ball, g = 4δ/(1−u²)², R = −D(D−1).
    HyperbolicBall,
    /// g = e^{2σ}δ with σ = a·q1² + b·sin q2 + c·q1·q2 (D = 2).
    Conformal2d { a: f64, b: f64, c: f64 },
}

impl Builtin {
    pub const NAMES: [&'static str; 5] =
        ["flat", "sphere", "sphere-stereographic", "hyperbolic-ball", "conformal2d"];
}

#[derive(Clone, Debug, PartialEq)]
enum Components {
    Builtin(Builtin),
    Expressions(Vec<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSpec {
    name: String,
    dim: usize,
    coords: Vec<String>,
    params: BTreeMap<String, f64>,
    components: Components,
}

impl MetricSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn builtin_kind(&self) -> Option<Builtin> {
        match &self.components {
            Components::Builtin(b) => Some(*b),
            Components::Expressions(_) => None,
        }
    }

    /// Expression for entry (μ,ν); `None` for builtin charts.
    pub fn expression(&self, mu: usize, nu: usize) -> Option<&Expr> {
        match &self.components {
            Components::Expressions(e) => Some(&e[mu * self.dim + nu]),
            Components::Builtin(_) => None,
        }
    }

    /// Builds a spec from row-major component expressions.
    pub fn from_expressions(
        name: &str,
        coords: Vec<String>,
        params: BTreeMap<String, f64>,
        g: Vec<Expr>,
    ) -> Result<Self, MetricError> {
        let dim = coords.len();
        if dim == 0 {
            return Err(MetricError::DimensionMismatch("at least one coordinate is required".into()));
        }
        if g.len() != dim * dim {
            return Err(MetricError::DimensionMismatch(format!(
                "{} components for {dim} coordinates",
                g.len()
            )));
        }
        for (i, c) in coords.iter().enumerate() {
            if coords[..i].contains(c) {
                return Err(MetricError::DimensionMismatch(format!("coordinate `{c}` declared twice")));
            }
            if params.contains_key(c) {
                return Err(MetricError::InvalidParameter(format!("`{c}` is both a coordinate and a parameter")));
            }
        }
        for (k, v) in &params {
            if !v.is_finite() {
                return Err(MetricError::InvalidParameter(format!("`{k}` is not finite")));
            }
        }
        for row in 0..dim {
            for col in 0..dim {
                let e = &g[row * dim + col];
                if let Some(name) = e
                    .identifiers()
                    .into_iter()
                    .find(|v| !coords.contains(v) && !params.contains_key(v))
                {
                    return Err(MetricError::UnknownIdentifier { row, col, name });
                }
                if col > row && g[col * dim + row] != *e {
                    return Err(MetricError::NotSymmetric { row, col });
                }
            }
        }
        Ok(Self { name: name.to_string(), dim, coords, params, components: Components::Expressions(g) })
    }

    /// Jet evaluation at a plain point.
    pub fn eval_jets_at(&self, q: &[f64]) -> Result<Vec<Jet3>, MetricError> {
        if q.len() != self.dim {
            return Err(MetricError::DimensionMismatch(format!(
                "point has {} coordinates, chart has {}",
                q.len(),
                self.dim
            )));
        }
        self.metric_jets(&Jet3::seed(q))
    }

    /// Metric values only.
    pub fn eval(&self, q: &[f64]) -> Result<Vec<f64>, MetricError> {
        let zero: Vec<Jet3> = q.iter().map(|&x| Jet3::constant(0, x)).collect();
        if q.len() != self.dim {
            return Err(MetricError::DimensionMismatch(format!(
                "point has {} coordinates, chart has {}",
                q.len(),
                self.dim
            )));
        }
        Ok(self.metric_jets(&zero)?.iter().map(Jet3::value).collect())
    }
}

/// g_{μν}(q) and its first three partials, row-major.
pub fn eval_metric_jet(spec: &MetricSpec, q: &[f64]) -> Result<Vec<Jet3>, MetricError> {
    spec.eval_jets_at(q)
}

impl Chart for MetricSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn label(&self) -> String {
        self.name.clone()
    }

    fn metric_jets(&self, q: &[Jet3]) -> Result<Vec<Jet3>, MetricError> {
        let d = self.dim;
        if q.len() != d {
            return Err(MetricError::DimensionMismatch(format!(
                "point has {} coordinates, chart has {d}",
                q.len()
            )));
        }
        let jd = q[0].dim();
        let point = || q.iter().map(Jet3::value).collect::<Vec<_>>();
        match &self.components {
            Components::Builtin(b) => builtin_jets(*b, &self.name, q, point),
            Components::Expressions(g) => {
                let lookup = |name: &str| -> Option<Jet3> {
                    if let Some(i) = self.coords.iter().position(|c| c == name) {
                        return Some(q[i].clone());
                    }
                    self.params.get(name).map(|&v| Jet3::constant(jd, v))
                };
                let mut out: Vec<Option<Jet3>> = vec![None; d * d];
                for row in 0..d {
                    for col in row..d {
                        let j = g[row * d + col]
                            .eval_jet(jd, &lookup)
                            .map_err(|error| MetricError::Evaluation { row, col, error })?;
                        out[col * d + row] = Some(j.clone());
                        out[row * d + col] = Some(j);
                    }
                }
                Ok(out.into_iter().map(|j| j.expect("filled above")).collect())
            }
        }
    }
}

fn norm2(q: &[Jet3]) -> Jet3 {
    let mut s = q[0].constant_like(0.0);
    for x in q {
        s += &(x * x);
    }
    s
}

fn diagonal(factor: &Jet3, d: usize) -> Vec<Jet3> {
    let zero = factor.constant_like(0.0);
    (0..d * d).map(|k| if k / d == k % d { factor.clone() } else { zero.clone() }).collect()
}

fn builtin_jets(
    b: Builtin,
    name: &str,
    q: &[Jet3],
    point: impl Fn() -> Vec<f64>,
) -> Result<Vec<Jet3>, MetricError> {
    let d = q.len();
    let outside = || MetricError::DomainViolation { chart: name.to_string(), point: point() };
    match b {
        Builtin::Flat => Ok(diagonal(&q[0].constant_like(1.0), d)),
        Builtin::Sphere => {
            let w = norm2(q).scale(-1.0) + 1.0;
            if !(w.value() > 0.0) {
                return Err(outside());
            }
            let inv = w.recip();
            let mut g = Vec::with_capacity(d * d);
            for mu in 0..d {
                for nu in 0..d {
                    let mut e = &(&q[mu] * &q[nu]) * &inv;
                    if mu == nu {
                        e = e + 1.0;
                    }
                    g.push(e);
                }
            }
            Ok(g)
        }
        Builtin::SphereStereographic => {
            let s = norm2(q) + 1.0;
            let f = s.powi(-2).scale(4.0);
            Ok(diagonal(&f, d))
        }
        Builtin::HyperbolicBall => {
            let w = norm2(q).scale(-1.0) + 1.0;
            if !(w.value() > 0.0) {
                return Err(outside());
            }
            let f = w.powi(-2).scale(4.0);
            Ok(diagonal(&f, d))
        }
        Builtin::Conformal2d { a, b, c } => {
            let sigma = (&q[0] * &q[0]).scale(a) + q[1].sin().scale(b) + (&q[0] * &q[1]).scale(c);
            Ok(diagonal(&sigma.scale(2.0).exp(), d))
        }
    }
}

/// The builtin catalog.
pub fn builtin(name: &str, dim: usize, params: &BTreeMap<String, f64>) -> Result<MetricSpec, MetricError> {
    if dim == 0 {
        return Err(MetricError::InvalidDimension { name: name.to_string(), dim });
    }
    let allowed: &[&str] = if name == "conformal2d" { &["a", "b", "c"] } else { &[] };
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(MetricError::InvalidParameter(format!("`{k}` is not a parameter of `{name}`")));
    }
    if let Some((k, _)) = params.iter().find(|(_, v)| !v.is_finite()) {
        return Err(MetricError::InvalidParameter(format!("`{k}` is not finite")));
    }
    let kind = match name {
        "flat" => Builtin::Flat,
        "sphere" => Builtin::Sphere,
        "sphere-stereographic" => Builtin::SphereStereographic,
        "hyperbolic-ball" => Builtin::HyperbolicBall,
        "conformal2d" => {
            if dim != 2 {
                return Err(MetricError::InvalidDimension { name: name.to_string(), dim });
            }
            Builtin::Conformal2d {
                a: params.get("a").copied().unwrap_or(0.3),
                b: params.get("b").copied().unwrap_or(0.5),
                c: params.get("c").copied().unwrap_or(0.2),
            }
        }
        _ => return Err(MetricError::UnknownBuiltin(name.to_string())),
    };
    let mut stored = params.clone();
    if let Builtin::Conformal2d { a, b, c } = kind {
        stored = BTreeMap::from([("a".into(), a), ("b".into(), b), ("c".into(), c)]);
    }
    Ok(MetricSpec {
        name: format!("{name}:{dim}"),
        dim,
        coords: (1..=dim).map(|i| format!("q{i}")).collect(),
        params: stored,
        components: Components::Builtin(kind),
    })
}

/// Parses `name:D`, e.g. `sphere:2`.
pub fn builtin_from_tag(tag: &str) -> Result<MetricSpec, MetricError> {
    let (name, dim) = tag
        .split_once(':')
        .ok_or_else(|| MetricError::UnknownBuiltin(format!("{tag} (expected name:D)")))?;
    let dim: usize = dim
        .trim()
        .parse()
        .map_err(|_| MetricError::UnknownBuiltin(format!("{tag} (dimension is not an integer)")))?;
    builtin(name.trim(), dim, &BTreeMap::new())
}

/// Embedding-chart point q of the unit sphere to the stereographic point u.
pub fn sphere_to_stereographic(q: &[f64]) -> Vec<f64> {
    let r2: f64 = q.iter().map(|x| x * x).sum();
    let s = 1.0 + (1.0 - r2).sqrt();
    q.iter().map(|x| x / s).collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricFile {
    name: String,
    dim: usize,
    coords: Vec<String>,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    g: Vec<Vec<Option<serde_json::Value>>>,
}

/// Parses a JSON metric file.
///
/// Rows of `g` may be complete, or describe one triangle only: an upper
/// triangle has row lengths D, D−1, …, 1; a lower triangle 1, 2, …, D.
/// Individual entries may also be `null`, in which case the mirrored entry
/// is used. Entries are strings in the expression grammar or numbers.
pub fn parse_metric(source: &str) -> Result<MetricSpec, MetricError> {
    let file: MetricFile = serde_json::from_str(source).map_err(|e| MetricError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let d = file.dim;
    if d == 0 || file.coords.len() != d {
        return Err(MetricError::DimensionMismatch(format!(
            "dim is {d} but {} coordinates are declared",
            file.coords.len()
        )));
    }
    if file.g.len() != d {
        return Err(MetricError::DimensionMismatch(format!("g has {} rows, expected {d}", file.g.len())));
    }
    let lens: Vec<usize> = file.g.iter().map(Vec::len).collect();
    let full = lens.iter().all(|&l| l == d);
    let upper = lens.iter().enumerate().all(|(i, &l)| l == d - i);
    let lower = lens.iter().enumerate().all(|(i, &l)| l == i + 1);
    let mut cells: Vec<Option<Expr>> = vec![None; d * d];
    let mut raw: Vec<Option<String>> = vec![None; d * d];
    for (row, entries) in file.g.iter().enumerate() {
        for (k, entry) in entries.iter().enumerate() {
            let col = if full {
                k
            } else if upper {
                row + k
            } else if lower {
                k
            } else {
                return Err(MetricError::DimensionMismatch(format!(
                    "row {row} of g has {} entries; rows must all have {d} entries or form a triangle",
                    entries.len()
                )));
            };
            let text = match entry {
                None => continue,
                Some(serde_json::Value::String(s)) => s.clone(),
                Some(serde_json::Value::Number(n)) => n.to_string(),
                Some(other) => {
                    return Err(MetricError::Expression {
                        row,
                        col,
                        error: ParseError { column: 1, message: format!("expected a string or number, found {other}") },
                    })
                }
            };
            let e = Expr::parse(&text).map_err(|error| MetricError::Expression { row, col, error })?;
            cells[row * d + col] = Some(e);
            raw[row * d + col] = Some(text);
        }
    }
    let mut g = Vec::with_capacity(d * d);
    for row in 0..d {
        for col in 0..d {
            let here = &cells[row * d + col];
            let there = &cells[col * d + row];
            let e = match (here, there) {
                (Some(a), Some(b)) => {
                    if a != b {
                        let (r, c) = (row.min(col), row.max(col));
                        return Err(MetricError::NotSymmetric { row: r, col: c });
                    }
                    a.clone()
                }
                (Some(a), None) | (None, Some(a)) => a.clone(),
                (None, None) => {
                    return Err(MetricError::DimensionMismatch(format!("g[{row}][{col}] is missing")))
                }
            };
            g.push(e);
        }
    }
    MetricSpec::from_expressions(&file.name, file.coords, file.params, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_line() {
        let spec = parse_metric(r#"{"name":"line","dim":1,"coords":["x"],"g":[["1"]]}"#).unwrap();
        assert_eq!(spec.dim(), 1);
        let j = spec.eval_jets_at(&[0.4]).unwrap();
        assert_eq!(j[0].value(), 1.0);
        assert_eq!(j[0].d1(0), 0.0);
    }

    #[test]
    fn sphere_values() {
        let s = builtin("sphere", 2, &BTreeMap::new()).unwrap();
        let g = s.eval(&[0.6, 0.0]).unwrap();
        assert!((g[0] - 1.5625).abs() < 1e-15);
        let det = g[0] * g[3] - g[1] * g[2];
        assert!((det - 1.5625).abs() < 1e-14);
        assert!(matches!(s.eval(&[0.8, 0.6]), Err(MetricError::DomainViolation { .. })));
    }

    #[test]
    fn triangles_and_symmetry() {
        let upper = r#"{"name":"u","dim":2,"coords":["x","y"],"g":[["1","x"],["2"]]}"#;
        let lower = r#"{"name":"l","dim":2,"coords":["x","y"],"g":[["1"],["x","2"]]}"#;
        let nulls = r#"{"name":"n","dim":2,"coords":["x","y"],"g":[["1",null],["x",2]]}"#;
        let a = parse_metric(upper).unwrap();
        let b = parse_metric(lower).unwrap();
        let c = parse_metric(nulls).unwrap();
        assert_eq!(a.eval(&[0.5, 0.0]).unwrap(), vec![1.0, 0.5, 0.5, 2.0]);
        assert_eq!(b.eval(&[0.5, 0.0]).unwrap(), vec![1.0, 0.5, 0.5, 2.0]);
        assert_eq!(c.eval(&[0.5, 0.0]).unwrap(), vec![1.0, 0.5, 0.5, 2.0]);
        let bad = r#"{"name":"b","dim":2,"coords":["x","y"],"g":[["1","x"],["y","2"]]}"#;
        assert_eq!(parse_metric(bad), Err(MetricError::NotSymmetric { row: 0, col: 1 }));
    }

    #[test]
    fn located_errors() {
        let e = parse_metric(r#"{"name":"x","dim":1,"coords":["x"],"g":[["1 + * x"]]}"#).unwrap_err();
        match e {
            MetricError::Expression { row: 0, col: 0, error } => assert_eq!(error.column, 5),
            other => panic!("{other:?}"),
        }
        let e = parse_metric("{\"name\": \"x\",\n \"dim\": }").unwrap_err();
        assert!(matches!(e, MetricError::Syntax { line: 2, .. }));
        let e = parse_metric(r#"{"name":"x","dim":1,"coords":["x"],"g":[["k*x"]]}"#).unwrap_err();
        assert!(matches!(e, MetricError::UnknownIdentifier { .. }));
        let e = parse_metric(r#"{"name":"x","dim":2,"coords":["x"],"g":[["1"]]}"#).unwrap_err();
        assert!(matches!(e, MetricError::DimensionMismatch(_)));
    }

    #[test]
    fn catalog_errors() {
        assert!(matches!(builtin("torus", 2, &BTreeMap::new()), Err(MetricError::UnknownBuiltin(_))));
        assert!(matches!(builtin("conformal2d", 3, &BTreeMap::new()), Err(MetricError::InvalidDimension { .. })));
        assert!(matches!(builtin("sphere", 0, &BTreeMap::new()), Err(MetricError::InvalidDimension { .. })));
    }
}
