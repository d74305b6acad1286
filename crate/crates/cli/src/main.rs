mod report;
mod verify;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curvepath_core::ecp::{self, Convention, EtaOptions};
use curvepath_core::geometry::{self, PointGeometry};
use curvepath_core::metricspec::{self, MetricSpec};
use curvepath_core::montecarlo::{self, ActionModel, McConfig};
use curvepath_core::propagator::PeriodicPropagator;
use curvepath_core::wick_engine::{self, Route, Scheme, SecondOrderOptions};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser, Debug, Serialize)]
#[command(name = "curvepath", version, about = "Effective classical potential in curved space")]
struct Cli {
    /// Worker threads (default: CURVEPATH_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Tensor bundle of a metric at a point.
    Geometry(GeometryArgs),
    /// Periodic Green function values.
    Propagator(PropagatorArgs),
    /// Boltzmann factor B(q0) to first order in beta.
    Ecp(EcpCmd),
    /// Monte Carlo estimate of B(q0) or of a vertex expectation.
    Mc(McArgs),
    /// Run invariant suites and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct MetricArgs {
    /// Metric file (JSON).
    #[arg(long, conflicts_with = "builtin")]
    metric: Option<PathBuf>,
    /// Built-in metric as name:D, e.g. sphere:2.
    #[arg(long)]
    builtin: Option<String>,
    /// Metric parameter name=value (repeatable; overrides a file's declared value).
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, f64)>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct GeometryArgs {
    #[command(flatten)]
    metric: MetricArgs,
    /// Comma-separated point, e.g. 0.3,0.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    point: Vec<f64>,
    /// Step for the divergence-identity residual.
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct PropagatorArgs {
    #[arg(long)]
    beta: f64,
    #[arg(long = "M", default_value_t = 1000)]
    m: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    tau: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    taup: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum RouteArg {
    Covariant,
    Eta,
    Sphere,
}

impl From<RouteArg> for Route {
    fn from(r: RouteArg) -> Self {
        match r {
            RouteArg::Covariant => Route::Covariant,
            RouteArg::Eta => Route::Eta,
            RouteArg::Sphere => Route::Sphere,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SchemeArg {
    Distribution,
    ModeCutoff,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ConventionArg {
    PathIntegral,
    DewittSeeley,
}

#[derive(Args, Debug, Serialize)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct EcpCmd {
    #[command(subcommand)]
    sweep: Option<EcpSub>,
    #[command(flatten)]
    args: EcpArgs,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum EcpSub {
    /// CSV over several points and temperatures.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct EcpOptions {
    #[arg(long, value_enum, default_value = "covariant")]
    route: RouteArg,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long = "M", default_value_t = 1024)]
    m: usize,
    /// Drop the Faddeev-Popov action (eta route).
    #[arg(long)]
    no_fp: bool,
    /// Sphere dimension (sphere route).
    #[arg(long = "D")]
    dim: Option<usize>,
    #[arg(long, value_enum, default_value = "distribution")]
    scheme: SchemeArg,
    /// Cutoffs in the eta-route M-series.
    #[arg(long, default_value_t = 5)]
    levels: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct EcpArgs {
    #[command(flatten)]
    opts: EcpOptions,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Density convention reported alongside B.
    #[arg(long, value_enum, default_value = "path-integral")]
    convention: ConventionArg,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    opts: EcpOptions,
    /// Point (repeatable).
    #[arg(long = "point", value_parser = parse_point, allow_hyphen_values = true)]
    points: Vec<Vec<f64>>,
    /// Comma-separated temperatures.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    beta: Vec<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelArg {
    Exact,
    Truncated,
}

#[derive(Args, Debug, Clone, Serialize)]
struct McArgs {
    #[arg(long, value_enum, default_value = "sphere")]
    route: RouteArg,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Vec<f64>,
    /// Sphere dimension (sphere route).
    #[arg(long = "D")]
    dim: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long = "M", default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
    /// Interaction model for B (exact is sphere-only).
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Estimate ⟨A_v⟩ for this catalog vertex instead of B.
    #[arg(long)]
    vertex: Option<String>,
    /// Stream per-batch partial results as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    All,
    Geometry,
    Propagator,
    NormalCoords,
    Wick,
    Ecp,
    Mc,
}

#[derive(Args, Debug, Clone, Serialize)]
struct VerifyArgs {
    #[arg(value_enum, default_value = "all")]
    suite: Suite,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got {s:?}"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("{v:?}: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_point(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"))).collect()
}

/// Failure classes: bad input is a usage error (exit 2), everything the
/// numerics reject is exit 1 with a diagnostic document.
enum Failure {
    Usage(String),
    Numerical { kind: &'static str, message: String, detail: Value },
}

fn numerical<E: std::fmt::Display>(kind: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure::Numerical { kind, message: e.to_string(), detail: Value::Null }
}

fn load_metric(m: &MetricArgs) -> Result<MetricSpec, Failure> {
    match (&m.metric, &m.builtin) {
        (Some(path), None) => {
            let mut src = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            if !m.params.is_empty() {
                // --param overrides values the file declares
                let mut doc: Value = serde_json::from_str(&src)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                for (k, v) in &m.params {
                    match doc.get_mut("params").and_then(|p| p.get_mut(k)) {
                        Some(slot) => *slot = json!(v),
                        None => return Err(Failure::Usage(format!("{} declares no parameter {k:?}", path.display()))),
                    }
                }
                src = doc.to_string();
            }
            metricspec::parse_metric(&src).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
        }
        (None, Some(tag)) => {
            let (name, dim) = tag
                .split_once(':')
                .ok_or_else(|| Failure::Usage(format!("--builtin expects name:D, got {tag:?}")))?;
            let dim: usize = dim.parse().map_err(|_| Failure::Usage(format!("bad dimension in {tag:?}")))?;
            let params: BTreeMap<String, f64> = m.params.iter().cloned().collect();
            metricspec::builtin(name, dim, &params).map_err(|e| Failure::Usage(e.to_string()))
        }
        (None, None) => Err(Failure::Usage("one of --metric or --builtin is required".into())),
        (Some(_), Some(_)) => Err(Failure::Usage("--metric and --builtin are exclusive".into())),
    }
}

fn geometry_at(spec: &MetricSpec, point: &[f64]) -> Result<PointGeometry, Failure> {
    if point.len() != spec.dim() {
        return Err(Failure::Usage(format!("point has {} coordinates, metric has dimension {}", point.len(), spec.dim())));
    }
    geometry::point_geometry(spec, point).map_err(numerical("geometry"))
}

fn run_geometry(a: &GeometryArgs) -> Result<Value, Failure> {
    let spec = load_metric(&a.metric)?;
    let geom = geometry_at(&spec, &a.point)?;
    let residual = geometry::divergence_identity_residual(&spec, &a.point, a.h).map_err(numerical("geometry"))?;
    Ok(report::geometry(&spec, &geom, residual))
}

fn run_propagator(a: &PropagatorArgs) -> Result<Value, Failure> {
    let p = PeriodicPropagator::new(a.beta, a.m).map_err(|e| Failure::Usage(e.to_string()))?;
    let x = a.tau - a.taup;
    Ok(json!({
        "beta": a.beta,
        "M": a.m,
        "tau": a.tau,
        "taup": a.taup,
        "green_closed": p.green_closed(a.tau, a.taup),
        "green_modes": p.green_modes(a.tau, a.taup),
        "derivatives_closed": (0..3).map(|n| p.closed_derivative(n, x)).collect::<Vec<_>>(),
        "derivatives_modes": (0..3).map(|n| p.modes_derivative(n, x)).collect::<Vec<_>>(),
        "equal_time_table": p.equal_time_table(),
    }))
}

fn sphere_dim(dim: Option<usize>, metric: &MetricArgs) -> Result<usize, Failure> {
    if let Some(d) = dim {
        return Ok(d);
    }
    if metric.builtin.is_some() || metric.metric.is_some() {
        let spec = load_metric(metric)?;
        if spec.builtin_kind() == Some(metricspec::Builtin::Sphere) {
            return Ok(spec.dim());
        }
        return Err(Failure::Usage("sphere route needs --D or the sphere builtin".into()));
    }
    Err(Failure::Usage("sphere route needs --D".into()))
}

fn ecp_report(o: &EcpOptions, spec: Option<&MetricSpec>, point: &[f64], beta: f64) -> Result<ecp::ExpansionReport, Failure> {
    let ecp_err = |e: ecp::EcpError| {
        let detail = match &e {
            ecp::EcpError::Extrapolation { series, .. } => json!({ "M_series": series }),
            _ => Value::Null,
        };
        Failure::Numerical { kind: "ecp", message: e.to_string(), detail }
    };
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Failure::Usage(format!("beta must be positive, got {beta}")));
    }
    match o.route {
        RouteArg::Sphere => {
            let d = sphere_dim(o.dim, &o.metric)?;
            ecp::boltzmann_sphere(d, beta, o.m).map_err(ecp_err)
        }
        RouteArg::Covariant | RouteArg::Eta => {
            let spec = spec.ok_or_else(|| Failure::Usage("--metric or --builtin is required".into()))?;
            let geom = geometry_at(spec, point)?;
            if o.route == RouteArg::Covariant {
                ecp::boltzmann_covariant(&geom, beta, o.m).map_err(ecp_err)
            } else {
                let scheme = match o.scheme {
                    SchemeArg::Distribution => Scheme::DistributionCalculus,
                    SchemeArg::ModeCutoff => Scheme::ModeCutoff,
                };
                let opts = EtaOptions {
                    include_fp: !o.no_fp,
                    second_order: SecondOrderOptions { scheme, levels: o.levels },
                    ..EtaOptions::default()
                };
                ecp::boltzmann_eta(&geom, beta, o.m, opts).map_err(ecp_err)
            }
        }
    }
}

fn run_ecp(a: &EcpArgs) -> Result<Value, Failure> {
    let o = &a.opts;
    let spec = if o.route == RouteArg::Sphere { None } else { Some(load_metric(&o.metric)?) };
    let report = ecp_report(o, spec.as_ref(), &a.point, a.beta)?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    let geom = match &spec {
        Some(s) => geometry_at(s, &a.point)?,
        None => {
            let d = report.q0.len();
            let s = metricspec::builtin("sphere", d, &BTreeMap::new()).map_err(|e| Failure::Usage(e.to_string()))?;
            geometry_at(&s, &report.q0)?
        }
    };
    let convention = match a.convention {
        ConventionArg::PathIntegral => Convention::PathIntegral,
        ConventionArg::DewittSeeley => Convention::DewittSeeley,
    };
    v["density"] = json!({
        "convention": a.convention,
        "value": ecp::seeley_density(&geom, a.beta, convention),
        "path_integral": ecp::seeley_density(&geom, a.beta, Convention::PathIntegral),
        "dewitt_seeley": ecp::seeley_density(&geom, a.beta, Convention::DewittSeeley),
        "correction_factor": ecp::seeley_correction_factor(&geom, a.beta),
    });
    if o.route != RouteArg::Sphere {
        let p = PeriodicPropagator::new(a.beta, o.m).map_err(|e| Failure::Usage(e.to_string()))?;
        let d = wick_engine::check_divergence_cancellation(report.route, &geom, &p).map_err(numerical("wick"))?;
        v["divergence"] = serde_json::to_value(d).expect("report serializes");
    }
    v["trace_T_over_24"] = json!(geom.trace_t() / 24.0);
    Ok(v)
}

fn run_sweep(a: &SweepArgs) -> Result<String, Failure> {
    let o = &a.opts;
    let spec = if o.route == RouteArg::Sphere { None } else { Some(load_metric(&o.metric)?) };
    let dim = match (&spec, o.route) {
        (Some(s), _) => s.dim(),
        (None, _) => sphere_dim(o.dim, &o.metric)?,
    };
    let points: Vec<Vec<f64>> = if a.points.is_empty() { vec![vec![0.0; dim]] } else { a.points.clone() };
    let jobs: Vec<(usize, &Vec<f64>, f64)> = points
        .iter()
        .flat_map(|p| a.beta.iter().map(move |&b| (p, b)))
        .enumerate()
        .map(|(i, (p, b))| (i, p, b))
        .collect();
    let rows: Vec<ecp::ExpansionReport> =
        jobs.par_iter().map(|&(_, p, b)| ecp_report(o, spec.as_ref(), p, b)).collect::<Result<_, _>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=dim).map(|k| format!("q0_{k}")).collect();
    header.extend(["beta", "route", "B_coefficient", "discrepancy"].map(String::from));
    w.write_record(&header).expect("csv header");
    for r in &rows {
        let mut rec: Vec<String> = r.q0.iter().map(|x| x.to_string()).collect();
        let route = serde_json::to_value(r.route).expect("route").as_str().unwrap_or_default().to_string();
        rec.extend([r.beta.to_string(), route, r.b_coefficient.to_string(), r.discrepancy.to_string()]);
        w.write_record(&rec).expect("csv row");
    }
    Ok(String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8"))
}

enum McOutput {
    Json(Value),
    Csv(String),
}

fn run_mc(a: &McArgs) -> Result<McOutput, Failure> {
    let route: Route = a.route.into();
    let geom = if a.route == RouteArg::Sphere {
        let d = sphere_dim(a.dim, &a.metric)?;
        let s = metricspec::builtin("sphere", d, &BTreeMap::new()).map_err(|e| Failure::Usage(e.to_string()))?;
        geometry_at(&s, &vec![0.0; d])?
    } else {
        let spec = load_metric(&a.metric)?;
        geometry_at(&spec, &a.point)?
    };
    let mut cfg = McConfig::new(a.beta, a.m, a.samples, a.seed);
    cfg.batch_size = a.batch_size;
    let mc_err = |e: montecarlo::McError| Failure::Numerical { kind: "montecarlo", message: e.to_string(), detail: Value::Null };
    let (run, extra) = match &a.vertex {
        Some(label) => {
            let vertices = wick_engine::vertex_catalog(&geom, a.beta, route).map_err(numerical("wick"))?;
            let v = vertices
                .iter()
                .find(|v| &v.label == label)
                .ok_or_else(|| Failure::Usage(format!("no vertex {label:?} in the {:?} catalog", a.route)))?;
            let run = montecarlo::mc_vertex_run(v, &geom, &cfg).map_err(mc_err)?;
            let p = PeriodicPropagator::new(a.beta, a.m).map_err(|e| Failure::Usage(e.to_string()))?;
            let exact = wick_engine::expect_first_order(v, &p, &geom).map_err(numerical("wick"))?;
            (run, json!({ "vertex": label, "analytic_at_M": exact.value_at_cutoff() }))
        }
        None => {
            let model = match a.model {
                Some(ModelArg::Exact) => ActionModel::Exact,
                Some(ModelArg::Truncated) => ActionModel::Truncated,
                None if route == Route::Sphere => ActionModel::Exact,
                None => ActionModel::Truncated,
            };
            let run = montecarlo::mc_boltzmann_run(route, &geom, &cfg, model).map_err(mc_err)?;
            let expected = 1.0 - a.beta * geom.r / 24.0;
            let extra = json!({ "model": model, "first_order_expected": expected, "action": run.action, "rejected": run.rejected });
            (run, extra)
        }
    };
    if a.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["batch", "n", "mean", "stderr", "cumulative_n", "cumulative_mean", "cumulative_stderr"])
            .expect("csv header");
        let mut acc = montecarlo::Moments::default();
        for b in &run.batches {
            acc = acc.combine(&b.moments);
            let e = b.moments.estimate(a.seed);
            let c = acc.estimate(a.seed);
            w.write_record([
                b.batch.to_string(),
                e.n_samples.to_string(),
                e.mean.to_string(),
                e.stderr.to_string(),
                c.n_samples.to_string(),
                c.mean.to_string(),
                c.stderr.to_string(),
            ])
            .expect("csv row");
        }
        return Ok(McOutput::Csv(String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")));
    }
    let mut v = serde_json::to_value(run.estimate).expect("estimate serializes");
    for (k, x) in extra.as_object().expect("object") {
        v[k] = x.clone();
    }
    v["route"] = json!(a.route);
    v["batches"] = json!(run.batches.len());
    Ok(McOutput::Json(v))
}

fn config_echo(cli: &Cli) -> Value {
    let (name, args) = match &cli.command {
        Command::Geometry(a) => ("geometry", serde_json::to_value(a)),
        Command::Propagator(a) => ("propagator", serde_json::to_value(a)),
        Command::Ecp(EcpCmd { sweep: Some(EcpSub::Sweep(a)), .. }) => ("ecp sweep", serde_json::to_value(a)),
        Command::Ecp(a) => ("ecp", serde_json::to_value(&a.args)),
        Command::Mc(a) => ("mc", serde_json::to_value(a)),
        Command::Verify(a) => ("verify", serde_json::to_value(a)),
    };
    json!({
        "schema": "curvepath/v1",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": name,
        "threads": cli.threads,
        "args": args.expect("arguments serialize"),
    })
}

fn emit(doc: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(doc).expect("json"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("CURVEPATH_THREADS").ok().and_then(|s| s.parse().ok()));
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: thread count must be positive");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = config_echo(&cli);
    let result: Result<Value, Failure> = match &cli.command {
        Command::Geometry(a) => run_geometry(a),
        Command::Propagator(a) => run_propagator(a),
        Command::Ecp(EcpCmd { sweep: Some(EcpSub::Sweep(a)), .. }) => match run_sweep(a) {
            Ok(csv) => {
                print!("{csv}");
                return ExitCode::SUCCESS;
            }
            Err(e) => Err(e),
        },
        Command::Ecp(a) => run_ecp(&a.args),
        Command::Mc(a) => match run_mc(a) {
            Ok(McOutput::Csv(csv)) => {
                print!("{csv}");
                return ExitCode::SUCCESS;
            }
            Ok(McOutput::Json(v)) => Ok(v),
            Err(e) => Err(e),
        },
        Command::Verify(a) => {
            let table = verify::run(a.suite);
            let ok = table.passed;
            emit(&json!({ "config": config, "result": table }));
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match result {
        Ok(v) => {
            emit(&json!({ "config": config, "result": v }));
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical { kind, message, detail }) => {
            emit(&json!({ "config": config, "error": { "kind": kind, "message": message, "detail": detail } }));
            ExitCode::from(1)
        }
    }
}
