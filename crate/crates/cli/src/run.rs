//! Mode drivers. Each writes its files into the output directory and
//! returns a one-line summary for stdout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use nlflux::continuation::{multiplicity_scan, solve_limiting, tail_slope, BranchPoint, BranchTracer, Diagram};
use nlflux::nonlinearity::{analyze, bootstrap_exponents, Direction, HypothesisReport};
use nlflux::oracle_radial::{disk_mu1, interpolate_radial, radial_lambda};
use nlflux::{solve_steklov_first, Discretization, NonlinearitySpec, SteklovPair};

use crate::config::{Mode, RunConfig};
use crate::error::CliError;

pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn io(&self, name: &str, source: std::io::Error) -> CliError {
        CliError::Io { path: self.path(name).display().to_string(), source }
    }

    pub fn json(&self, name: &str, value: &Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
        text.push('\n');
        fs::write(self.path(name), text).map_err(|e| self.io(name, e))
    }

    pub fn field(&self, name: &str, values: &[f64]) -> Result<(), CliError> {
        let mut text = String::with_capacity(values.len() * 24);
        for v in values {
            text.push_str(&v.to_string());
            text.push('\n');
        }
        fs::write(self.path(name), text).map_err(|e| self.io(name, e))
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let csv_err = |e: csv::Error| self.io(name, e.into());
        let mut w = csv::Writer::from_path(self.path(name)).map_err(csv_err)?;
        for row in rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| self.io(name, e))
    }

    /// Record of a failed run, written next to whatever partial output exists.
    pub fn failure(&self, mode: Mode, err: &CliError) -> Result<(), CliError> {
        self.json(
            "failure.json",
            &json!({ "mode": mode.to_string(), "exit_code": err.exit_code(), "error": err.to_string() }),
        )
    }
}

#[derive(Serialize)]
struct DiagramRow {
    arclength: f64,
    lambda: f64,
    sup_norm: f64,
    h1_norm: f64,
    rescaled: bool,
    newton_iters: usize,
}

impl From<&BranchPoint> for DiagramRow {
    fn from(p: &BranchPoint) -> Self {
        Self {
            arclength: p.arclength,
            lambda: p.lambda,
            sup_norm: p.sup_norm,
            h1_norm: p.h1_norm,
            rescaled: p.rescaled,
            newton_iters: p.newton_iters,
        }
    }
}

#[derive(Serialize)]
struct OracleRow {
    arclength: f64,
    t: f64,
    lambda_fem: f64,
    lambda_exact: f64,
    rel_dev: f64,
}

pub fn run(cfg: &RunConfig, out: &Output) -> Result<String, CliError> {
    match cfg.mode {
        Mode::Steklov => steklov(cfg, out),
        Mode::Analyze => analyze_mode(cfg, out),
        Mode::Branch => branch(cfg, out),
        Mode::Limiting => limiting(cfg, out),
        Mode::OracleCompare => oracle_compare(cfg, out),
        Mode::Bootstrap => bootstrap(cfg, out),
    }
}

fn nonlinearity(cfg: &RunConfig) -> &NonlinearitySpec {
    cfg.f.as_ref().expect("validated: mode needs a nonlinearity")
}

fn setup(cfg: &RunConfig) -> Result<(Discretization, SteklovPair), CliError> {
    let mesh = cfg.mesh.as_ref().expect("validated: mode needs a mesh").build()?;
    let disc = Discretization::new(mesh).map_err(CliError::numerical)?;
    let pair = solve_steklov_first(disc.interior_form(), disc.boundary_mass(), cfg.tol).map_err(CliError::numerical)?;
    Ok((disc, pair))
}

fn exact_mu1(cfg: &RunConfig) -> Option<f64> {
    cfg.mesh.as_ref().and_then(|m| m.disk_radius()).and_then(|r| disk_mu1(r).ok())
}

fn steklov(cfg: &RunConfig, out: &Output) -> Result<String, CliError> {
    let (disc, pair) = setup(cfg)?;
    let exact = exact_mu1(cfg);
    out.field("field_phi1.txt", &pair.phi1)?;
    out.json(
        "summary.json",
        &json!({
            "mode": "steklov",
            "mesh": disc.mesh().describe(),
            "num_vertices": disc.num_dofs(),
            "num_boundary_vertices": disc.mesh().boundary_vertices().len(),
            "mu1": pair.mu1,
            "residual_norm": pair.residual_norm,
            "iterations": pair.iterations,
            "exact_mu1": exact,
            "relative_error": exact.map(|m| (pair.mu1 - m).abs() / m),
        }),
    )?;
    Ok(format!("mu1 = {}", pair.mu1))
}

fn shape_note(direction: Direction, report: &HypothesisReport) -> &'static str {
    match direction {
        Direction::Subcritical => {
            "subcritical bifurcation: the branch leaves (μ₁/f′(0), 0) towards smaller λ and grows without bound as λ → 0"
        }
        Direction::Supercritical => {
            "supercritical bifurcation: the branch leaves (μ₁/f′(0), 0) towards larger λ, turns back at a fold and grows without bound as λ → 0"
        }
        Direction::Inconclusive if !report.satisfies_h0 => "no bifurcation from the trivial branch: f′(0) = 0",
        Direction::Inconclusive => "bifurcation direction undetermined: the remainder changes sign near 0",
    }
}

fn report_notes(report: &HypothesisReport) -> Vec<String> {
    let mut notes = Vec::new();
    if !report.satisfies_linear_lower_bound {
        notes.push("fails the linear lower bound f(s) ≥ K·s for s > 0 (K = 0): no nonexistence bound".to_string());
    }
    if !report.satisfies_hinf {
        notes.push(format!(
            "growth at infinity is not superlinear and subcritical for N = {} (p = {})",
            report.dimension, report.p
        ));
    }
    if !report.satisfies_h0 {
        notes.push("f′(0) = 0: no bifurcation from the trivial branch".to_string());
    }
    notes
}

fn analyze_mode(cfg: &RunConfig, out: &Output) -> Result<String, CliError> {
    let f = nonlinearity(cfg);
    let report = analyze(f, cfg.dimension);
    let direction = report.analytic_direction();
    let mut value = serde_json::to_value(&report).expect("report serializes");
    let extra = json!({
        "mode": "analyze",
        "nonlinearity": f.to_string(),
        "direction": direction,
        "shape": shape_note(direction, &report),
        "nonexistence_bound_over_mu1": (report.k > 0.0).then(|| 1.0 / report.k),
        "notes": report_notes(&report),
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut value, extra) {
        m.extend(e);
    }
    out.json("report.json", &value)?;
    Ok(format!(
        "{f}: H∞ {}, H0 {}, K = {}, direction {direction:?}",
        report.satisfies_hinf, report.satisfies_h0, report.k
    ))
}

/// Traces the branch from the trivial solution when `f′(0) > 0`, otherwise
/// from a small-amplitude guess.
fn trace(
    cfg: &RunConfig,
    disc: &Discretization,
    tracer: &BranchTracer<'_>,
    pair: &SteklovPair,
) -> Result<Diagram, (CliError, Option<Box<Diagram>>)> {
    let f = nonlinearity(cfg);
    let result = if f.fprime0() > 0.0 {
        tracer.trace_from_trivial(cfg.eps, &cfg.continuation)
    } else {
        let t = cfg.start_amplitude;
        let u0 = match cfg.mesh.as_ref().and_then(|m| m.disk_radius()) {
            Some(r) => interpolate_radial(disc.mesh(), r, t).map_err(|e| (CliError::numerical(e), None))?,
            None => pair.phi1.iter().map(|v| t * v).collect(),
        };
        let lambda0 = pair.mu1 * t / f.eval(t).map_err(|e| (CliError::numerical(e), None))?;
        let start = tracer.start_from_guess(&u0, lambda0).map_err(|e| (CliError::numerical(e), None))?;
        tracer.continue_branch(&start, &cfg.continuation)
    };
    result.map_err(|e| {
        let err = CliError::numerical(&e);
        (err, Some(e.partial))
    })
}

fn branch_summary(cfg: &RunConfig, d: &Diagram, certificate: Option<f64>, complete: bool) -> Value {
    let mu1 = d.metadata.mu1;
    let max_lambda = if d.points.is_empty() { 0.0 } else { d.max_lambda() };
    let m = cfg.multiplicity_points;
    let multiplicity: Vec<Value> = (1..=m)
        .map(|k| {
            let lambda = 1.2 * max_lambda * k as f64 / m as f64;
            json!({ "lambda": lambda, "count": multiplicity_scan(d, lambda) })
        })
        .collect();
    let folds: Vec<Value> = d
        .folds
        .iter()
        .map(|f| json!({ "index": f.index, "lambda_bar": f.lambda_bar, "lambda_bar_over_mu1": f.lambda_bar / mu1 }))
        .collect();
    json!({
        "mode": cfg.mode.to_string(),
        "complete": complete,
        "mesh": d.metadata.mesh,
        "nonlinearity": d.metadata.nonlinearity,
        "mu1": mu1,
        "lambda_star": d.bifurcation_from_zero.map(|b| b.predicted),
        "first_lambda": d.bifurcation_from_zero.map(|b| b.lambda_star),
        "direction": d.direction,
        "direction_check": d.direction_check,
        "folds": folds,
        "nonexistence_bound": d.nonexistence_bound,
        "max_lambda": max_lambda,
        "multiplicity": multiplicity,
        "tail_slope": tail_slope(d),
        "points": d.points.len(),
        "termination": d.metadata.termination,
        "corrector_failures": d.metadata.corrector_failures,
        "switch_index": d.metadata.switch_index,
        "switch_roundtrip_error": d.metadata.switch_roundtrip_error,
        "max_rescaled_sup": d.metadata.max_rescaled_sup,
        "residual_certificate": certificate,
        "newton_tol": d.metadata.newton_tol,
    })
}

fn write_diagram(out: &Output, d: &Diagram) -> Result<(), CliError> {
    out.csv("diagram.csv", d.points.iter().map(DiagramRow::from))
}

/// Shared by `branch` and `oracle-compare`: traces, writes the diagram and
/// summary, and on failure the partial diagram.
fn traced(cfg: &RunConfig, out: &Output, disc: &Discretization, pair: &SteklovPair) -> Result<Diagram, CliError> {
    let f = nonlinearity(cfg);
    let mut tracer = BranchTracer::new(disc, f.clone(), pair);
    tracer.newton = cfg.newton();
    match trace(cfg, disc, &tracer, pair) {
        Ok(d) => {
            let certificate = tracer.verify(&d).map_err(CliError::numerical)?;
            write_diagram(out, &d)?;
            if let Some(last) = d.points.last() {
                out.field("field_final.txt", &last.physical_u(f.p()))?;
            }
            out.json("summary.json", &branch_summary(cfg, &d, Some(certificate), true))?;
            Ok(d)
        }
        Err((err, partial)) => {
            if let Some(d) = partial {
                write_diagram(out, &d)?;
                out.json("summary.json", &branch_summary(cfg, &d, None, false))?;
            }
            Err(err)
        }
    }
}

fn branch(cfg: &RunConfig, out: &Output) -> Result<String, CliError> {
    let (disc, pair) = setup(cfg)?;
    let d = traced(cfg, out, &disc, &pair)?;
    let folds: Vec<String> = d.folds.iter().map(|f| format!("{:.6}", f.lambda_bar / pair.mu1)).collect();
    Ok(format!(
        "{} points, direction {:?}, folds at λ/μ₁ = [{}], termination {:?}",
        d.points.len(),
        d.direction,
        folds.join(", "),
        d.metadata.termination
    ))
}

fn limiting(cfg: &RunConfig, out: &Output) -> Result<String, CliError> {
    let f = nonlinearity(cfg);
    let (b, p) = (f.b(), f.p());
    if !(p > 1.0 && b > 0.0) {
        return Err(CliError::Config(format!("limiting problem needs p > 1 and b > 0, got p = {p}, b = {b}")));
    }
    let (disc, pair) = setup(cfg)?;
    let w = solve_limiting(&disc, &pair, b, p, None, &cfg.newton()).map_err(CliError::numerical)?;
    let t_star = exact_mu1(cfg).map(|m| (m / b).powf(1.0 / (p - 1.0)));
    let sup = w.u.sup_norm();
    out.field("field_w0.txt", &w.u)?;
    out.json(
        "summary.json",
        &json!({
            "mode": "limiting",
            "mesh": disc.mesh().describe(),
            "b": b,
            "p": p,
            "mu1": pair.mu1,
            "sup_norm": sup,
            "h1_norm": disc.h1_norm(&w.u),
            "min": w.u.min(),
            "newton_iters": w.iterations,
            "residual": w.residual,
            "radial_t_star": t_star,
            "relative_deviation": t_star.map(|t| (sup / t - 1.0).abs()),
        }),
    )?;
    Ok(format!("‖w₀‖∞ = {sup}"))
}

fn oracle_compare(cfg: &RunConfig, out: &Output) -> Result<String, CliError> {
    let Some(radius) = cfg.mesh.as_ref().and_then(|m| m.disk_radius()) else {
        return Err(CliError::Config("oracle-compare needs a disk mesh".into()));
    };
    let f = nonlinearity(cfg);
    let mu1 = disk_mu1(radius).map_err(|e| CliError::Config(e.to_string()))?;
    let (disc, pair) = setup(cfg)?;
    let d = traced(cfg, out, &disc, &pair)?;
    let mut rows = Vec::with_capacity(d.points.len());
    for pt in &d.points {
        let t = pt.sup_norm;
        let exact = radial_lambda(f, mu1, t).map_err(CliError::numerical)?;
        rows.push(OracleRow {
            arclength: pt.arclength,
            t,
            lambda_fem: pt.lambda,
            lambda_exact: exact,
            rel_dev: (pt.lambda - exact).abs() / exact,
        });
    }
    let worst = rows.iter().max_by(|a, b| a.rel_dev.total_cmp(&b.rel_dev));
    let (max_dev, worst_t) = worst.map_or((0.0, None), |r| (r.rel_dev, Some(r.t)));
    out.json(
        "oracle.json",
        &json!({
            "mode": "oracle-compare",
            "mesh": disc.mesh().describe(),
            "nonlinearity": f.to_string(),
            "mu1_exact": mu1,
            "mu1_discrete": pair.mu1,
            "points": rows.len(),
            "max_rel_deviation": max_dev,
            "worst_t": worst_t,
        }),
    )?;
    out.csv("oracle.csv", rows)?;
    Ok(format!("{} points, max relative deviation {max_dev:e}", d.points.len()))
}

fn bootstrap(cfg: &RunConfig, out: &Output) -> Result<String, CliError> {
    let p = nonlinearity(cfg).p();
    if !(p > 1.0) {
        return Err(CliError::Config(format!("bootstrap needs p > 1, got {p}")));
    }
    let trace = bootstrap_exponents(cfg.dimension, p, cfg.bootstrap_steps);
    let line = trace.summary_line();
    let mut value = serde_json::to_value(&trace).expect("trace serializes");
    if let Value::Object(m) = &mut value {
        m.insert("mode".into(), json!("bootstrap"));
        m.insert("summary".into(), json!(line));
        m.insert("critical_p".into(), json!(cfg.dimension as f64 / (cfg.dimension as f64 - 2.0)));
    }
    out.json("report.json", &value)?;
    Ok(line)
}
