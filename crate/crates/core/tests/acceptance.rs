//! End-to-end acceptance checks against the radial disk oracle.
//!
//! Runs without the libtest harness so that every criterion prints exactly
//! one PASS/FAIL line; the process exits nonzero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlflux::assembly::{assemble_boundary_mass, assemble_interior_form, jacobian, residual};
use nlflux::continuation::{
    multiplicity_scan, newton_solve, small_amplitude_ratio, solve_limiting, tail_slope, BranchTracer,
    ContinuationOptions, Diagram, NewtonOptions,
};
use nlflux::nonlinearity::{analyze, bootstrap_exponents, Direction};
use nlflux::oracle_radial::{disk_mu1, interpolate_radial};
use nlflux::{
    generate_disk_mesh, generate_rectangle_mesh, solve_steklov_first, Discretization, MeshGeometry, NonlinearitySpec,
    SteklovPair,
};

const LEVEL: u32 = 4;
const EPS: f64 = 1e-3;
/// Nonlinearities with `f′(0) > 0` and a superlinear term.
const CORPUS_H0: [&str; 4] = ["s + s^2", "s - s^2 + s^3", "s + s^3", "2*s + s^2"];
const CORPUS_POWER: [&str; 2] = ["s^2", "s^3"];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Context {
    disc: Discretization,
    pair: SteklovPair,
    mu1: f64,
    /// Long runs from the trivial solution, one per `CORPUS_H0` entry.
    branches: Vec<(NonlinearitySpec, Diagram)>,
}

fn spec(s: &str) -> NonlinearitySpec {
    s.parse().expect("corpus entry parses")
}

fn long_run() -> ContinuationOptions {
    ContinuationOptions { lambda_min: Some(0.0), ..ContinuationOptions::default() }
}

impl Context {
    fn build() -> Result<Self, String> {
        let disc = Discretization::new(generate_disk_mesh(1.0, LEVEL).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let pair = solve_steklov_first(disc.interior_form(), disc.boundary_mass(), 1e-10).map_err(|e| e.to_string())?;
        let mu1 = disk_mu1(1.0).map_err(|e| e.to_string())?;
        let mut branches = Vec::new();
        for s in CORPUS_H0 {
            let f = spec(s);
            let tracer = BranchTracer::new(&disc, f.clone(), &pair);
            let d = tracer.trace_from_trivial(EPS, &long_run()).map_err(|e| format!("{s}: {e}"))?;
            branches.push((f, d));
        }
        Ok(Self { disc, pair, mu1, branches })
    }

    fn branch(&self, s: &str) -> &Diagram {
        let f = spec(s);
        &self.branches.iter().find(|(g, _)| *g == f).expect("branch traced").1
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let exact = disk_mu1(1.0).unwrap();
    let mut errs = Vec::new();
    for level in 2..=5 {
        let mesh = generate_disk_mesh(1.0, level).unwrap();
        let a = assemble_interior_form(&mesh).unwrap();
        let b = assemble_boundary_mass(&mesh);
        match solve_steklov_first(&a, &b, 1e-10) {
            Ok(p) => errs.push((p.mu1 - exact).abs() / exact),
            Err(e) => return Outcome::new(false, format!("level {level}: {e}")),
        }
    }
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let secs = start.elapsed().as_secs_f64();
    let min_order = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    let last = *errs.last().unwrap();
    Outcome::new(
        min_order >= 1.8 && last <= 5e-3 && secs <= 30.0,
        format!("orders {orders:.3?}, final rel. error {last:.2e}, {secs:.1} s"),
    )
}

fn criterion_2(ctx: &Context) -> Outcome {
    let mut worst: f64 = 0.0;
    for s in ["s + s^2", "s - s^2 + s^3", "s + s^3"] {
        let f = spec(s);
        let tracer = BranchTracer::new(&ctx.disc, f.clone(), &ctx.pair);
        match tracer.branch_from_trivial(EPS) {
            Ok(p) => worst = worst.max((p.lambda / (ctx.mu1 / f.fprime0()) - 1.0).abs()),
            Err(e) => return Outcome::new(false, format!("{s}: {e}")),
        }
    }
    Outcome::new(worst <= 0.01, format!("max |λ₀/λ* − 1| = {worst:.2e} (λ* from the exact μ₁)"))
}

fn criterion_3(ctx: &Context) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (f, d) in &ctx.branches {
        let v = d.direction_check.expect("traced from the trivial solution");
        pass &= v.consistent && v.numeric != Direction::Inconclusive;
        notes.push(format!("{f}: {:?}/{:?}", v.analytic, v.numeric));
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_4(ctx: &Context) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for s in ["s - s^2 + s^3", "2*s + s^2"] {
        let f = spec(s);
        let d = ctx.branch(s);
        let last = d.points.last().unwrap();
        let lambda_star = ctx.pair.mu1 / f.fprime0();
        let slope = tail_slope(d).unwrap_or(f64::NAN);
        let expect = -1.0 / (f.p() - 1.0);
        let ok = last.lambda <= 1e-3 * lambda_star && last.sup_norm >= 1e3 && (slope / expect - 1.0).abs() <= 0.05;
        pass &= ok;
        notes.push(format!(
            "{s}: λ_end/λ* = {:.1e}, sup = {:.1e}, slope {slope:.4} vs {expect:.4}",
            last.lambda / lambda_star,
            last.sup_norm
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_5(ctx: &Context) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for s in CORPUS_POWER {
        let f = spec(s);
        let (p, b) = (f.p(), f.b());
        let tracer = BranchTracer::new(&ctx.disc, f.clone(), &ctx.pair);
        let t = 0.1;
        let u0 = interpolate_radial(ctx.disc.mesh(), 1.0, t).unwrap();
        let lambda0 = ctx.mu1 * t.powf(1.0 - p) / b;
        let d = match tracer.start_from_guess(&u0, lambda0).and_then(|st| {
            tracer
                .continue_branch(&st, &ContinuationOptions::default())
                .map_err(|e| nlflux::continuation::SolveError::Hypothesis(e.to_string()))
        }) {
            Ok(d) => d,
            Err(e) => return Outcome::new(false, format!("{s}: {e}")),
        };
        let target = ctx.mu1 / b;
        let worst =
            d.points.iter().map(|pt| (pt.lambda * pt.sup_norm.powf(p - 1.0) / target - 1.0).abs()).fold(0.0, f64::max);
        pass &= worst <= 0.02;
        let (lo, hi) = (d.points.first().unwrap().sup_norm, d.points.last().unwrap().sup_norm);
        notes.push(format!("{s}: {} points, sup {lo:.2}..{hi:.1e}, max dev {worst:.2e}", d.points.len()));
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_6(ctx: &Context) -> Outcome {
    let s = "s - s^2 + s^3";
    let d = ctx.branch(s);
    let mu1 = ctx.mu1;
    let k = analyze(&spec(s), 2).k;
    if d.folds.len() != 1 {
        return Outcome::new(false, format!("{} folds detected", d.folds.len()));
    }
    let lambda_bar = d.folds[0].lambda_bar;
    let fold_err = (lambda_bar / (4.0 / 3.0 * mu1) - 1.0).abs();
    let sweep = |lo: f64, hi: f64| (0..=20).map(move |i| lo + (hi - lo) * (i as f64 + 0.5) / 21.0);
    let two = sweep(1.05 * mu1, 0.98 * lambda_bar).all(|q| multiplicity_scan(d, q) == 2);
    let one = sweep(0.2 * mu1, 0.95 * mu1).all(|q| multiplicity_scan(d, q) == 1);
    let zero = sweep(1.02 * mu1 / k, 3.0 * mu1 / k).all(|q| multiplicity_scan(d, q) == 0);
    Outcome::new(
        fold_err <= 0.02 && two && one && zero,
        format!(
            "λ̄/μ₁ = {:.4} (error {fold_err:.2e}); counts 2/1/0 on the three ranges: {two}/{one}/{zero}",
            lambda_bar / mu1
        ),
    )
}

fn criterion_7(ctx: &Context) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (f, d) in &ctx.branches {
        let report = analyze(f, 2);
        let Some(bound) = report.nonexistence_bound(ctx.mu1) else {
            pass = false;
            notes.push(format!("{f}: K = 0"));
            continue;
        };
        let ratio = d.max_lambda() / bound;
        let lambda = 1.2 * bound;
        let mut found = 0;
        for _ in 0..20 {
            let scale = 10f64.powf(rng.gen_range(-2.0..1.0));
            let u0: Vec<f64> = (0..ctx.disc.num_dofs()).map(|_| scale * rng.gen_range(0.05..1.0)).collect();
            if let Ok(out) = newton_solve(&ctx.disc, &u0, lambda, f, &NewtonOptions::default()) {
                if out.u.min() > 0.0 && out.u.sup_norm() > 1e-8 {
                    found += 1;
                }
            }
        }
        pass &= ratio <= 1.02 && found == 0;
        notes.push(format!("{f}: max λ/(μ₁/K) = {ratio:.4}, positive solutions at 1.2μ₁/K: {found}"));
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_8(ctx: &Context) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for &(b, p) in &[(1.0, 2.0), (2.0, 2.0), (1.0, 3.0)] {
        match solve_limiting(&ctx.disc, &ctx.pair, b, p, None, &NewtonOptions::default()) {
            Ok(w) => {
                let t_star = (ctx.mu1 / b).powf(1.0 / (p - 1.0));
                let dev = (w.u.sup_norm() / t_star - 1.0).abs();
                pass &= dev <= 0.02;
                notes.push(format!("b={b},p={p}: dev {dev:.2e}"));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("b={b},p={p}: {e}"));
            }
        }
    }
    for s in ["s - s^2 + s^3", "2*s + s^2"] {
        let f = spec(s);
        let end = ctx.branch(s).points.last().unwrap();
        let w0 = solve_limiting(&ctx.disc, &ctx.pair, f.b(), f.p(), None, &NewtonOptions::default());
        match (end.rescaled, w0) {
            (true, Ok(w0)) => {
                let dev = (end.u.sup_norm() / w0.u.sup_norm() - 1.0).abs();
                pass &= dev <= 0.05;
                notes.push(format!("{s} endpoint at λ = {:.1e}: dev {dev:.2e}", end.lambda));
            }
            (false, _) => {
                pass = false;
                notes.push(format!("{s}: branch never switched to rescaled form"));
            }
            (_, Err(e)) => {
                pass = false;
                notes.push(format!("{s}: {e}"));
            }
        }
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_9(ctx: &Context) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (f, d) in &ctx.branches {
        match small_amplitude_ratio(d, &analyze(f, 2), &ctx.pair, &ctx.disc) {
            Ok(est) => {
                let dev = (est.numeric / est.analytic - 1.0).abs();
                pass &= dev <= 0.05;
                notes.push(format!("{f}: {:.5} vs {:.5}", est.numeric, est.analytic));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{f}: {e}"));
            }
        }
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_10(ctx: &Context) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (f, d) in &ctx.branches {
        let mut small: Vec<_> = d.points.iter().filter(|p| !p.rescaled).collect();
        small.sort_by(|a, b| a.sup_norm.total_cmp(&b.sup_norm));
        let errs: Vec<f64> = small
            .iter()
            .take(3)
            .map(|p| {
                p.u.iter().zip(ctx.pair.phi1.iter()).map(|(u, phi)| (u / p.sup_norm - phi).abs()).fold(0.0, f64::max)
            })
            .collect();
        let ok = errs.len() == 3 && errs.iter().all(|&e| e <= 0.05) && errs[0] < errs[1] && errs[1] < errs[2];
        pass &= ok;
        notes.push(format!("{f}: {:?}", errs.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>()));
    }
    Outcome::new(pass, notes.join("; "))
}

fn criterion_11() -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    for n in 3..=7u32 {
        let crit = n as f64 / (n as f64 - 2.0);
        // 20 exponents per dimension, half on each side of the critical one
        let ps = (0..20).map(|k| {
            let r = if k < 10 { 0.05 + 0.09 * k as f64 } else { 1.05 + 0.1 * (k - 10) as f64 };
            1.0 + r * (crit - 1.0)
        });
        for p in ps.chain(std::iter::once(crit)) {
            let t = bootstrap_exponents(n, p, 10_000);
            let sub = p < crit;
            let increasing = t.r_seq.windows(2).all(|w| w[1] > w[0]);
            checked += 1;
            if t.terminated != sub || (sub && !increasing) {
                failures.push(format!("N={n},p={p:.4}"));
            }
        }
    }
    Outcome::new(failures.is_empty(), format!("{checked} (N, p) pairs, failures: {failures:?}"))
}

fn random_mesh_checks(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let meshes: Vec<MeshGeometry> = vec![
        generate_disk_mesh(1.0, 2).unwrap(),
        generate_disk_mesh(2.0, 1).unwrap(),
        generate_rectangle_mesh(3.0, 2.0, 5, 4).unwrap(),
    ];
    for mesh in &meshes {
        let a = assemble_interior_form(mesh).map_err(|e| e.to_string())?;
        let b = assemble_boundary_mass(mesh);
        if !a.matrix.is_symmetric() || !b.matrix.is_symmetric() {
            return Err("asymmetric operator".into());
        }
        for _ in 0..20 {
            let v: Vec<f64> = (0..mesh.num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qa = a.matrix.quad_form(&v);
            if qa.is_nan() || qa <= 0.0 || b.matrix.quad_form(&v) < 0.0 {
                return Err("definiteness violated".into());
            }
        }
        let back = MeshGeometry::from_text(&mesh.to_text()).map_err(|e| e.to_string())?;
        if back.vertices() != mesh.vertices()
            || back.triangles() != mesh.triangles()
            || back.boundary_edges() != mesh.boundary_edges()
        {
            return Err("mesh round trip differs".into());
        }
    }
    Ok(())
}

fn jacobian_checks(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mesh = generate_disk_mesh(1.0, 2).unwrap();
    let a = assemble_interior_form(&mesh).unwrap();
    let mut worst: f64 = 0.0;
    for s in CORPUS_H0.iter().chain(&CORPUS_POWER) {
        let f = spec(s);
        let h = f.as_power_sum();
        for _ in 0..20 {
            let u: Vec<f64> = (0..mesh.num_vertices()).map(|_| rng.gen_range(0.01..2.0)).collect();
            let v: Vec<f64> = (0..mesh.num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lambda = rng.gen_range(0.1..2.0);
            let eps = 1e-6;
            let up: Vec<f64> = u.iter().zip(&v).map(|(x, d)| x + eps * d).collect();
            let r0 = residual(&a, &mesh, &u, lambda, h).map_err(|e| e.to_string())?;
            let r1 = residual(&a, &mesh, &up, lambda, h).map_err(|e| e.to_string())?;
            let jv = jacobian(&a, &mesh, &u, lambda, h).map_err(|e| e.to_string())?.mul_vec(&v);
            let num: f64 = r1.iter().zip(r0.iter()).zip(&jv).map(|((x, y), j)| ((x - y) / eps - j).powi(2)).sum();
            let den: f64 = jv.iter().map(|j| j * j).sum();
            worst = worst.max((num / den).sqrt());
        }
    }
    Ok(worst)
}

fn criterion_12(ctx: &Context, suite_start: Instant) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut notes = Vec::new();
    let mut pass = true;
    match random_mesh_checks(&mut rng) {
        Ok(()) => notes.push("assembly symmetry/definiteness and mesh round trip ok".to_string()),
        Err(e) => {
            pass = false;
            notes.push(e);
        }
    }
    match jacobian_checks(&mut rng) {
        Ok(w) => {
            pass &= w <= 1e-5;
            notes.push(format!("Jacobian FD error ≤ {w:.1e}"));
        }
        Err(e) => {
            pass = false;
            notes.push(e);
        }
    }
    let positive = ctx.branches.iter().all(|(_, d)| d.points.iter().all(|p| p.positive && p.u.min() > 0.0));
    pass &= positive;
    notes.push(format!("all branch points positive: {positive}"));
    let f = spec("s - s^2 + s^3");
    let tracer = BranchTracer::new(&ctx.disc, f, &ctx.pair);
    let runs: Vec<Diagram> =
        (0..2).filter_map(|_| tracer.trace_from_trivial(EPS, &ContinuationOptions::default()).ok()).collect();
    let deterministic = runs.len() == 2 && runs[0] == runs[1];
    pass &= deterministic;
    notes.push(format!("repeat run identical: {deterministic}"));
    let cert = ctx
        .branches
        .iter()
        .map(|(f, d)| BranchTracer::new(&ctx.disc, f.clone(), &ctx.pair).verify(d).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    pass &= cert <= 1e-10;
    notes.push(format!("residual certificate {cert:.1e}"));
    let secs = suite_start.elapsed().as_secs_f64();
    pass &= secs <= 300.0;
    notes.push(format!("elapsed {secs:.1} s"));
    Outcome::new(pass, notes.join("; "))
}

fn main() {
    let start = Instant::now();
    let names = [
        "Steklov accuracy",
        "bifurcation point",
        "direction criterion",
        "bifurcation from infinity",
        "pure-power exactness",
        "fold and multiplicity",
        "nonexistence bound",
        "limiting problem",
        "small-amplitude ratio",
        "convergence to φ₁",
        "bootstrap dichotomy",
        "property suites",
    ];
    let mut results: Vec<Outcome> = vec![criterion_1()];
    match Context::build() {
        Ok(ctx) => {
            results.push(criterion_2(&ctx));
            results.push(criterion_3(&ctx));
            results.push(criterion_4(&ctx));
            results.push(criterion_5(&ctx));
            results.push(criterion_6(&ctx));
            results.push(criterion_7(&ctx));
            results.push(criterion_8(&ctx));
            results.push(criterion_9(&ctx));
            results.push(criterion_10(&ctx));
            results.push(criterion_11());
            results.push(criterion_12(&ctx, start));
        }
        Err(e) => {
            for k in 2..=12 {
                results.push(if k == 11 { criterion_11() } else { Outcome::new(false, format!("setup failed: {e}")) });
            }
        }
    }
    let mut failed = 0;
    for (k, (name, r)) in names.iter().zip(&results).enumerate() {
        let tag = if r.pass { "PASS" } else { "FAIL" };
        if !r.pass {
            failed += 1;
        }
        println!("criterion {:>2} [{tag}] {name}: {}", k + 1, r.detail);
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
