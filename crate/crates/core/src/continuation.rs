//! Newton solves and pseudo-arclength continuation of the positive branch.
//!
//! The branch is parametrized by `(u, λ)` until `‖u‖_∞` passes a switch
//! threshold, then by `(w, ln λ)` with `w = λ^{1/(p−1)} u`, which solves
//! `A w = ∫_∂Ω f̃(λ, w) ψ` and stays bounded as `λ → 0`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::assembly::{Discretization, DofVector};
use crate::condensed::LinearSolveError;
use crate::mesh::DomainTag;
use crate::nonlinearity::{Direction, EvalError, HypothesisReport, NonlinearitySpec, PowerSum, PowerTerm};
use crate::oracle_radial;
use crate::sparse::{dot, norm2, sup_norm};
use crate::steklov::SteklovPair;

/// Smallest sup-norm a solution needs to count as nontrivial.
const TRIVIAL_NORM: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("Newton did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("Newton converged to the trivial solution")]
    TrivialSolution,
    #[error("solution is not positive (min {0:e})")]
    NotPositive(f64),
    #[error("linear solve failed: {0}")]
    Linear(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl From<LinearSolveError> for SolveError {
    fn from(e: LinearSolveError) -> Self {
        SolveError::Linear(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 25, max_halvings: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub u: DofVector,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `A u = ∫_∂Ω h(u_h) ψ` from `u0`.
fn newton_fixed(
    disc: &Discretization,
    u0: &[f64],
    h: &PowerSum,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome, SolveError> {
    if !(opts.tol > 0.0) {
        return Err(SolveError::InvalidParameter(format!("tol = {}", opts.tol)));
    }
    let a = disc.interior_form();
    let mut x = u0.to_vec();
    let mut r = disc.residual(&x, h)?;
    let mut rn = norm2(&r);
    for it in 0..=opts.max_iters {
        if rn <= opts.tol * (1.0 + norm2(&a.apply(&x))) {
            return Ok(NewtonOutcome { u: x.into(), iterations: it, residual: rn });
        }
        if it == opts.max_iters {
            break;
        }
        let w = disc.boundary_jacobian_block(&x, h)?;
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = disc.condensed().solve(&w, &neg)?;
        let mut step = 1.0;
        for k in 0..=opts.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + step * d).collect();
            let rt = disc.residual(&trial, h);
            let last = k == opts.max_halvings;
            match rt {
                Ok(rt) if last || norm2(&rt) < rn => {
                    rn = norm2(&rt);
                    r = rt;
                    x = trial;
                    break;
                }
                Err(e) if last => return Err(e.into()),
                _ => step *= 0.5,
            }
        }
    }
    Err(SolveError::NoConvergence { iterations: opts.max_iters, residual: rn })
}

/// Newton solve of `A u = λ ∫_∂Ω f(u_h) ψ` at fixed `λ`.
pub fn newton_solve(
    disc: &Discretization,
    u0: &[f64],
    lambda: f64,
    f: &NonlinearitySpec,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome, SolveError> {
    if !(lambda >= 0.0) {
        return Err(SolveError::InvalidParameter(format!("λ = {lambda}")));
    }
    newton_fixed(disc, u0, &f.as_power_sum().scaled(lambda), opts)
}

/// Nontrivial solution `w₀` of the limiting problem `A w = ∫_∂Ω b|w|^p ψ`.
///
/// Without `w_init` the guess is the radial solution on disks and
/// `(μ₁/b)^{1/(p−1)} φ₁` otherwise.
pub fn solve_limiting(
    disc: &Discretization,
    steklov: &SteklovPair,
    b: f64,
    p: f64,
    w_init: Option<&[f64]>,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome, SolveError> {
    if !(b > 0.0 && p > 1.0) {
        return Err(SolveError::InvalidParameter(format!("b = {b}, p = {p}")));
    }
    let init = match w_init {
        Some(w) => {
            let s = sup_norm(w);
            if !(0.1..=100.0).contains(&s) || w.iter().any(|&v| !(v > 0.0)) {
                return Err(SolveError::InvalidParameter(format!(
                    "initial guess must be positive with sup-norm in [0.1, 100] (got {s})"
                )));
            }
            w.to_vec()
        }
        None => match disc.mesh().domain() {
            DomainTag::Disk { radius } => {
                let mu1 = oracle_radial::disk_mu1(radius).map_err(|e| SolveError::InvalidParameter(e.to_string()))?;
                let t = (mu1 / b).powf(1.0 / (p - 1.0));
                oracle_radial::interpolate_radial(disc.mesh(), radius, t)
                    .map_err(|e| SolveError::InvalidParameter(e.to_string()))?
            }
            _ => {
                let t = (steklov.mu1 / b).powf(1.0 / (p - 1.0));
                steklov.phi1.iter().map(|v| t * v).collect()
            }
        },
    };
    let h = PowerSum::new([PowerTerm { coefficient: b, exponent: p }]);
    let out = newton_fixed(disc, &init, &h, opts)?;
    if out.u.sup_norm() < TRIVIAL_NORM {
        return Err(SolveError::TrivialSolution);
    }
    if !(out.u.min() > 0.0) {
        return Err(SolveError::NotPositive(out.u.min()));
    }
    Ok(out)
}

/// One accepted continuation state. `sup_norm` and `h1_norm` always refer
/// to `u`; for rescaled points `u` stores `w` and the norms are mapped back.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchPoint {
    pub lambda: f64,
    pub u: DofVector,
    pub sup_norm: f64,
    pub h1_norm: f64,
    pub arclength: f64,
    pub newton_iters: usize,
    pub positive: bool,
    pub rescaled: bool,
}

impl BranchPoint {
    /// Nodal values of `u`, undoing the rescaling when needed.
    pub fn physical_u(&self, p: f64) -> Vec<f64> {
        if self.rescaled {
            let s = (-self.lambda.ln() / (p - 1.0)).exp();
            self.u.iter().map(|w| s * w).collect()
        } else {
            self.u.to_vec()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fold {
    pub index: usize,
    pub lambda_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BifurcationFromZero {
    /// `λ` of the first nontrivial point.
    pub lambda_star: f64,
    /// `μ₁/f′(0)`.
    pub predicted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DirectionVerdict {
    pub analytic: Direction,
    pub numeric: Direction,
    pub consistent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    LambdaMin,
    NormMax,
    StepUnderflow,
    MaxPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagramMetadata {
    pub mesh: String,
    pub nonlinearity: String,
    pub newton_tol: f64,
    pub mu1: f64,
    pub lambda_ref: f64,
    pub lambda_min: f64,
    pub norm_max: f64,
    pub termination: Option<Termination>,
    pub corrector_failures: usize,
    /// Index of the first rescaled point.
    pub switch_index: Option<usize>,
    pub switch_roundtrip_error: Option<f64>,
    /// Largest `‖w‖_∞` seen in rescaled mode.
    pub max_rescaled_sup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagram {
    pub points: Vec<BranchPoint>,
    pub folds: Vec<Fold>,
    pub bifurcation_from_zero: Option<BifurcationFromZero>,
    pub direction: Direction,
    pub direction_check: Option<DirectionVerdict>,
    pub nonexistence_bound: Option<f64>,
    pub metadata: DiagramMetadata,
}

impl Diagram {
    pub fn lambda_range(&self) -> (f64, f64) {
        self.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.lambda), hi.max(p.lambda)))
    }

    pub fn max_lambda(&self) -> f64 {
        let sampled = self.lambda_range().1;
        self.folds.iter().map(|f| f.lambda_bar).fold(sampled, f64::max)
    }
}

#[derive(Debug, Error)]
#[error("branch tracing stopped after {} points: {reason}", partial.points.len())]
pub struct BranchError {
    pub reason: String,
    pub partial: Box<Diagram>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuationOptions {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub grow: f64,
    /// Steps grow after convergence in at most this many iterations.
    pub fast_iters: usize,
    pub max_corrector_iters: usize,
    /// Defaults to `1e-3·λ_ref`.
    pub lambda_min: Option<f64>,
    pub norm_max: f64,
    pub switch_norm: f64,
    pub max_points: usize,
    /// Total corrector failures tolerated before giving up.
    pub max_failures: usize,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            initial_step: 1e-3,
            min_step: 1e-5,
            max_step: 0.2,
            grow: 1.3,
            fast_iters: 3,
            max_corrector_iters: 12,
            lambda_min: None,
            norm_max: 1e4,
            switch_norm: 50.0,
            max_points: 20_000,
            max_failures: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    /// Unknowns `(u, λ)`.
    Direct,
    /// Unknowns `(w, ln λ)`.
    Rescaled,
}

/// Linear side condition `row·x + row_p·p = target`.
struct Constraint {
    row: Vec<f64>,
    row_p: f64,
    target: f64,
}

impl Constraint {
    fn value(&self, x: &[f64], p: f64) -> f64 {
        dot(&self.row, x) + self.row_p * p - self.target
    }
}

/// Residual, `∂r/∂param` and the boundary block of `∂r/∂x`.
type Linearization = (Vec<f64>, Vec<f64>, DMatrix<f64>);

/// Traces the positive branch for one nonlinearity on one discretization.
pub struct BranchTracer<'a> {
    disc: &'a Discretization,
    f: NonlinearitySpec,
    report: HypothesisReport,
    steklov: &'a SteklovPair,
    pub newton: NewtonOptions,
}

impl<'a> BranchTracer<'a> {
    pub fn new(disc: &'a Discretization, f: NonlinearitySpec, steklov: &'a SteklovPair) -> Self {
        let report = crate::nonlinearity::analyze(&f, 2);
        Self { disc, f, report, steklov, newton: NewtonOptions::default() }
    }

    pub fn report(&self) -> &HypothesisReport {
        &self.report
    }

    pub fn nonlinearity(&self) -> &NonlinearitySpec {
        &self.f
    }

    /// `μ₁/f′(0)` when `f′(0) > 0`.
    pub fn lambda_star(&self) -> Option<f64> {
        (self.report.fprime0 > 0.0).then(|| self.steklov.mu1 / self.report.fprime0)
    }

    fn terms(&self, mode: Mode, param: f64) -> Result<(PowerSum, PowerSum), EvalError> {
        match mode {
            Mode::Direct => Ok((self.f.as_power_sum().scaled(param), self.f.as_power_sum().clone())),
            Mode::Rescaled => {
                let lambda = param.exp();
                Ok((self.f.rescaled(lambda)?, self.f.rescaled_log_derivative(lambda)?))
            }
        }
    }

    fn physical_lambda(mode: Mode, param: f64) -> f64 {
        match mode {
            Mode::Direct => param,
            Mode::Rescaled => param.exp(),
        }
    }

    fn point(&self, mode: Mode, x: Vec<f64>, param: f64, arclength: f64, newton_iters: usize) -> BranchPoint {
        let lambda = Self::physical_lambda(mode, param);
        let (mut sup, mut h1) = (sup_norm(&x), self.disc.h1_norm(&x));
        if mode == Mode::Rescaled {
            let s = (-param / (self.f.p() - 1.0)).exp();
            sup *= s;
            h1 *= s;
        }
        let positive = x.iter().all(|&v| v > 0.0);
        BranchPoint {
            lambda,
            u: x.into(),
            sup_norm: sup,
            h1_norm: h1,
            arclength,
            newton_iters,
            positive,
            rescaled: mode == Mode::Rescaled,
        }
    }

    /// Residual, its parameter derivative and the boundary Jacobian block.
    fn linearize(&self, mode: Mode, x: &[f64], param: f64) -> Result<Linearization, SolveError> {
        let (h, dh) = self.terms(mode, param)?;
        let r = self.disc.residual(x, &h)?;
        let rp: Vec<f64> = self.disc.load(x, &dh)?.iter().map(|v| -v).collect();
        let w = self.disc.boundary_jacobian_block(x, &h)?;
        Ok((r, rp, w))
    }

    fn residual_norm(&self, mode: Mode, x: &[f64], param: f64) -> Result<(f64, f64), SolveError> {
        let (h, _) = self.terms(mode, param)?;
        let r = self.disc.residual(x, &h)?;
        Ok((norm2(&r), 1.0 + norm2(&self.disc.interior_form().apply(x))))
    }

    /// Newton on the residual augmented by a linear constraint.
    fn newton_bordered(
        &self,
        mode: Mode,
        x0: Vec<f64>,
        p0: f64,
        con: &Constraint,
        max_iters: usize,
    ) -> Result<(Vec<f64>, f64, usize), SolveError> {
        let tol = self.newton.tol;
        let (mut x, mut p) = (x0, p0);
        let con_scale = 1.0 + norm2(&con.row) * sup_norm(&x).max(1.0) + (con.row_p * p).abs();
        let merit = |x: &[f64], p: f64| -> Result<(f64, f64, f64), SolveError> {
            let (rn, scale) = self.residual_norm(mode, x, p)?;
            let c = con.value(x, p).abs();
            Ok((rn / scale + c / con_scale, rn / scale, c / con_scale))
        };
        let (mut m, mut rel, mut crel) = merit(&x, p)?;
        for it in 0..=max_iters {
            if rel <= tol && crel <= tol {
                return Ok((x, p, it));
            }
            if it == max_iters {
                break;
            }
            let (r, rp, w) = self.linearize(mode, &x, p)?;
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            let c = con.value(&x, p);
            let (dx, dp) = self.disc.condensed().solve_bordered(&w, &rp, &con.row, con.row_p, &neg, -c)?;
            let mut step = 1.0;
            for k in 0..=self.newton.max_halvings {
                let tx: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + step * d).collect();
                let tp = p + step * dp;
                let last = k == self.newton.max_halvings;
                let valid = mode == Mode::Rescaled || tp > 0.0;
                match merit(&tx, tp) {
                    Ok(v) if valid && (last || v.0 < m) => {
                        (m, rel, crel) = v;
                        x = tx;
                        p = tp;
                        break;
                    }
                    Err(e) if last => return Err(e),
                    _ if last => return Err(SolveError::InvalidParameter(format!("λ left (0, ∞): {tp}"))),
                    _ => step *= 0.5,
                }
            }
        }
        Err(SolveError::NoConvergence { iterations: max_iters, residual: rel })
    }

    /// First nontrivial point near `(μ₁/f′(0), ε φ₁)`, with the value of `u`
    /// at the maximizer of `φ₁` held at `ε`.
    pub fn branch_from_trivial(&self, eps: f64) -> Result<BranchPoint, SolveError> {
        let lambda_star = self.lambda_star().filter(|_| self.report.satisfies_h0).ok_or_else(|| {
            SolveError::Hypothesis("bifurcation from zero needs f′(0) > 0 and a superlinear term".into())
        })?;
        if !(1e-4..=1e-2).contains(&eps) {
            return Err(SolveError::InvalidParameter(format!("ε = {eps} outside [1e-4, 1e-2]")));
        }
        let phi = &self.steklov.phi1;
        let k = phi.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k).expect("nonempty");
        let mut row = vec![0.0; phi.len()];
        row[k] = 1.0;
        let con = Constraint { row, row_p: 0.0, target: eps * phi[k] };
        let x0: Vec<f64> = phi.iter().map(|v| eps * v).collect();
        let (x, lambda, iters) = self.newton_bordered(Mode::Direct, x0, lambda_star, &con, self.newton.max_iters)?;
        let pt = self.point(Mode::Direct, x, lambda, 0.0, iters);
        if !pt.positive {
            return Err(SolveError::NotPositive(pt.u.min()));
        }
        Ok(pt)
    }

    /// Branch point at fixed `λ` by Newton from `u0`.
    pub fn start_from_guess(&self, u0: &[f64], lambda: f64) -> Result<BranchPoint, SolveError> {
        let out = newton_solve(self.disc, u0, lambda, &self.f, &self.newton)?;
        if out.u.sup_norm() < TRIVIAL_NORM {
            return Err(SolveError::TrivialSolution);
        }
        let pt = self.point(Mode::Direct, out.u.into_inner(), lambda, 0.0, out.iterations);
        if !pt.positive {
            return Err(SolveError::NotPositive(pt.u.min()));
        }
        Ok(pt)
    }

    /// Kickoff from the trivial solution followed by continuation.
    pub fn trace_from_trivial(&self, eps: f64, opts: &ContinuationOptions) -> Result<Diagram, BranchError> {
        let start = self
            .branch_from_trivial(eps)
            .map_err(|e| BranchError { reason: e.to_string(), partial: Box::new(self.empty_diagram(opts, 0.0)) })?;
        let predicted = self.lambda_star().expect("checked by kickoff");
        let mut diagram = self.continue_branch(&start, opts)?;
        diagram.bifurcation_from_zero = Some(BifurcationFromZero { lambda_star: start.lambda, predicted });
        diagram.direction_check = Some(classify_direction(&self.report, &diagram));
        Ok(diagram)
    }

    fn lambda_ref(&self, start_lambda: f64) -> f64 {
        self.lambda_star().unwrap_or(start_lambda)
    }

    fn empty_diagram(&self, opts: &ContinuationOptions, lambda_ref: f64) -> Diagram {
        Diagram {
            points: Vec::new(),
            folds: Vec::new(),
            bifurcation_from_zero: None,
            direction: self.report.analytic_direction(),
            direction_check: None,
            nonexistence_bound: self.report.nonexistence_bound(self.steklov.mu1),
            metadata: DiagramMetadata {
                mesh: self.disc.mesh().describe(),
                nonlinearity: self.f.to_string(),
                newton_tol: self.newton.tol,
                mu1: self.steklov.mu1,
                lambda_ref,
                lambda_min: opts.lambda_min.unwrap_or(1e-3 * lambda_ref),
                norm_max: opts.norm_max,
                termination: None,
                corrector_failures: 0,
                switch_index: None,
                switch_roundtrip_error: None,
                max_rescaled_sup: None,
            },
        }
    }

    /// Metric weights for `x` and the parameter.
    fn weights(&self, mode: Mode, lambda_ref: f64) -> (f64, f64) {
        let wx = 1.0 / (self.disc.num_dofs() as f64).sqrt();
        match mode {
            Mode::Direct => (wx, 1.0 / lambda_ref),
            Mode::Rescaled => (wx, 1.0),
        }
    }

    fn normalize(tx: &mut [f64], tp: &mut f64, (wx, wp): (f64, f64)) {
        let len = ((wx * norm2(tx)).powi(2) + (wp * *tp).powi(2)).sqrt();
        tx.iter_mut().for_each(|v| *v /= len);
        *tp /= len;
    }

    /// Tangent at a converged point, oriented so that `‖x‖` grows.
    fn tangent(&self, mode: Mode, x: &[f64], p: f64, lambda_ref: f64) -> Result<(Vec<f64>, f64), SolveError> {
        let (_, rp, w) = self.linearize(mode, x, p)?;
        let zero = vec![0.0; x.len()];
        let (mut tx, mut tp) = self.disc.condensed().solve_bordered(&w, &rp, x, 0.0, &zero, 1.0)?;
        Self::normalize(&mut tx, &mut tp, self.weights(mode, lambda_ref));
        Ok((tx, tp))
    }

    /// Pseudo-arclength continuation from a converged point.
    pub fn continue_branch(&self, start: &BranchPoint, opts: &ContinuationOptions) -> Result<Diagram, BranchError> {
        let lambda_ref = self.lambda_ref(start.lambda);
        let mut diagram = self.empty_diagram(opts, lambda_ref);
        let lambda_min = diagram.metadata.lambda_min;
        let p_exp = self.f.p();
        let fail = |diagram: Diagram, reason: String| BranchError { reason, partial: Box::new(diagram) };
        if !start.positive || start.sup_norm < TRIVIAL_NORM {
            return Err(fail(diagram, "start point is not a positive nontrivial solution".into()));
        }

        let mut mode = if start.rescaled { Mode::Rescaled } else { Mode::Direct };
        let mut x = start.u.to_vec();
        let mut param = if start.rescaled { start.lambda.ln() } else { start.lambda };
        let (mut tx, mut tp) = match self.tangent(mode, &x, param, lambda_ref) {
            Ok(t) => t,
            Err(e) => return Err(fail(diagram, format!("initial tangent: {e}"))),
        };
        let mut arclength = start.arclength;
        diagram.points.push(start.clone());
        let mut ds = opts.initial_step.clamp(opts.min_step, opts.max_step);
        let mut failures = 0usize;
        let termination = loop {
            if diagram.points.len() >= opts.max_points {
                break Termination::MaxPoints;
            }
            let (wx, wp) = self.weights(mode, lambda_ref);
            let xp: Vec<f64> = x.iter().zip(&tx).map(|(a, t)| a + ds * t).collect();
            let pp = param + ds * tp;
            let row: Vec<f64> = tx.iter().map(|t| wx * wx * t).collect();
            let row_p = wp * wp * tp;
            let target = dot(&row, &xp) + row_p * pp;
            let con = Constraint { row, row_p, target };
            let corrected = self.newton_bordered(mode, xp, pp, &con, opts.max_corrector_iters);
            let accepted = corrected.ok().and_then(|(xn, pn, iters)| {
                if !xn.iter().all(|&v| v > 0.0) {
                    return None;
                }
                let dx: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let dp = pn - param;
                let dist = ((wx * norm2(&dx)).powi(2) + (wp * dp).powi(2)).sqrt();
                if !(dist > 0.0) || dist > 2.0 * ds {
                    return None;
                }
                let cos = (wx * wx * dot(&dx, &tx) + wp * wp * dp * tp) / dist;
                (cos >= 0.5).then_some((xn, pn, iters, dx, dp, dist))
            });
            let Some((xn, pn, iters, mut dx, mut dp, dist)) = accepted else {
                failures += 1;
                diagram.metadata.corrector_failures = failures;
                if failures > opts.max_failures {
                    return Err(fail(diagram, format!("{failures} corrector failures")));
                }
                ds *= 0.5;
                if ds < opts.min_step {
                    break Termination::StepUnderflow;
                }
                continue;
            };
            Self::normalize(&mut dx, &mut dp, (wx, wp));
            (tx, tp) = (dx, dp);
            arclength += dist;
            x = xn;
            param = pn;
            let pt = self.point(mode, x.clone(), param, arclength, iters);
            if mode == Mode::Rescaled {
                let s = sup_norm(&x);
                let m = diagram.metadata.max_rescaled_sup.get_or_insert(s);
                *m = m.max(s);
            }
            let (lambda, sup) = (pt.lambda, pt.sup_norm);
            diagram.points.push(pt);
            if iters <= opts.fast_iters {
                ds = (ds * opts.grow).min(opts.max_step);
            }
            if lambda <= lambda_min {
                break Termination::LambdaMin;
            }
            if sup >= opts.norm_max {
                break Termination::NormMax;
            }
            if mode == Mode::Direct && p_exp > 1.0 && sup > opts.switch_norm {
                // w = λ^{1/(p−1)} u, τ = ln λ; the tangent follows by the chain rule
                let k = 1.0 / (p_exp - 1.0);
                let scale = param.powf(k);
                let w: Vec<f64> = x.iter().map(|u| scale * u).collect();
                let back = param.powf(-k);
                let err = x.iter().zip(&w).map(|(u, w)| (back * w - u).abs()).fold(0.0, f64::max) / sup;
                let dtau = tp / param;
                let mut twx: Vec<f64> = tx.iter().zip(&x).map(|(t, u)| scale * (t + k * u * dtau)).collect();
                let mut twp = dtau;
                Self::normalize(&mut twx, &mut twp, self.weights(Mode::Rescaled, lambda_ref));
                x = w;
                param = param.ln();
                tx = twx;
                tp = twp;
                mode = Mode::Rescaled;
                diagram.metadata.switch_index = Some(diagram.points.len());
                diagram.metadata.switch_roundtrip_error = Some(err);
            }
        };
        diagram.metadata.termination = Some(termination);
        diagram.folds = detect_folds(&diagram);
        Ok(diagram)
    }

    /// Largest relative residual over all points, recomputed from the
    /// stored states.
    pub fn verify(&self, diagram: &Diagram) -> Result<f64, SolveError> {
        let mut worst: f64 = 0.0;
        for pt in &diagram.points {
            let (mode, param) = if pt.rescaled { (Mode::Rescaled, pt.lambda.ln()) } else { (Mode::Direct, pt.lambda) };
            let (rn, scale) = self.residual_norm(mode, &pt.u, param)?;
            worst = worst.max(rn / scale);
        }
        Ok(worst)
    }
}

/// Interior extrema of `λ` along the branch, refined by a parabola in
/// arclength through the extremal sample and its neighbours.
pub fn detect_folds(diagram: &Diagram) -> Vec<Fold> {
    let pts = &diagram.points;
    let mut folds = Vec::new();
    for i in 1..pts.len().saturating_sub(1) {
        let d1 = pts[i].lambda - pts[i - 1].lambda;
        let d2 = pts[i + 1].lambda - pts[i].lambda;
        if d1 * d2 < 0.0 {
            let (s0, s1, s2) = (pts[i - 1].arclength, pts[i].arclength, pts[i + 1].arclength);
            let (l0, l1, l2) = (pts[i - 1].lambda, pts[i].lambda, pts[i + 1].lambda);
            folds.push(Fold { index: i, lambda_bar: parabola_extremum([s0, s1, s2], [l0, l1, l2]) });
        }
    }
    folds
}

fn parabola_extremum(s: [f64; 3], l: [f64; 3]) -> f64 {
    // divided differences: l ≈ l0 + a(s−s0) + c(s−s0)(s−s1)
    let a = (l[1] - l[0]) / (s[1] - s[0]);
    let b = (l[2] - l[1]) / (s[2] - s[1]);
    let c = (b - a) / (s[2] - s[0]);
    if c == 0.0 || !c.is_finite() {
        return l[1];
    }
    // derivative a + c(2s − s0 − s1) = 0
    let sv = 0.5 * (s[0] + s[1] - a / c);
    if !(s[0]..=s[2]).contains(&sv) {
        return l[1];
    }
    l[0] + a * (sv - s[0]) + c * (sv - s[0]) * (sv - s[1])
}

/// Points that count as "near zero" for direction checks.
const NEAR_ZERO_NORM: f64 = 0.05;

/// Compares the analytic direction with the sign of `λ − μ₁/f′(0)` on the
/// near-zero part of the branch.
pub fn classify_direction(report: &HypothesisReport, diagram: &Diagram) -> DirectionVerdict {
    let analytic = report.analytic_direction();
    let numeric = match diagram.bifurcation_from_zero {
        Some(b) => {
            let near: Vec<f64> = diagram
                .points
                .iter()
                .filter(|p| !p.rescaled && p.sup_norm <= NEAR_ZERO_NORM)
                .map(|p| p.lambda - b.predicted)
                .collect();
            if near.len() < 5 {
                Direction::Inconclusive
            } else if near.iter().all(|&d| d < 0.0) {
                Direction::Subcritical
            } else if near.iter().all(|&d| d > 0.0) {
                Direction::Supercritical
            } else {
                Direction::Inconclusive
            }
        }
        None => Direction::Inconclusive,
    };
    DirectionVerdict { analytic, numeric, consistent: analytic == numeric }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticError {
    #[error("only {0} points with sup-norm in [1e-3, 5e-2]")]
    InsufficientPoints(usize),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmallAmplitudeEstimate {
    /// Extrapolation of `(μ₁/f′(0) − λ)/‖u‖_∞^{ν−1}` to `‖u‖_∞ → 0`.
    pub numeric: f64,
    /// `R₀ μ₁/f′(0)² · ∫_∂Ω φ₁^{1+ν} / ∫_∂Ω φ₁²`.
    pub analytic: f64,
    pub points_used: usize,
}

/// Small-amplitude slope of the branch against its asymptotic constant.
pub fn small_amplitude_ratio(
    diagram: &Diagram,
    report: &HypothesisReport,
    steklov: &SteklovPair,
    disc: &Discretization,
) -> Result<SmallAmplitudeEstimate, DiagnosticError> {
    let nu = match (report.satisfies_h0, report.nu) {
        (true, Some(nu)) => nu,
        _ => return Err(DiagnosticError::Hypothesis("needs f′(0) > 0 and ν".into())),
    };
    let lambda_star = steklov.mu1 / report.fprime0;
    let samples: Vec<(f64, f64)> = diagram
        .points
        .iter()
        .filter(|p| !p.rescaled && p.sup_norm >= 1e-3 * (1.0 - 1e-9) && p.sup_norm <= 5e-2)
        .map(|p| (p.sup_norm, (lambda_star - p.lambda) / p.sup_norm.powf(nu - 1.0)))
        .collect();
    if samples.len() < 3 {
        return Err(DiagnosticError::InsufficientPoints(samples.len()));
    }
    let numeric = extrapolate_to_zero(&samples);
    let phi = &steklov.phi1;
    let top = disc.boundary_integral(phi, |s| Ok(s.abs().powf(nu)))?;
    let bottom = disc.boundary_integral(phi, Ok)?;
    let analytic = report.r0_lower * steklov.mu1 / (report.fprime0 * report.fprime0) * top / bottom;
    Ok(SmallAmplitudeEstimate { numeric, analytic, points_used: samples.len() })
}

/// Value at `t = 0` of the least-squares polynomial of degree ≤ 2.
fn extrapolate_to_zero(samples: &[(f64, f64)]) -> f64 {
    let deg = (samples.len() - 1).min(2);
    let scale = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    let v = DMatrix::from_fn(samples.len(), deg + 1, |i, j| (samples[i].0 / scale).powi(j as i32));
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let coef = v.svd(true, true).solve(&y, 1e-14).expect("SVD computed with both factors");
    coef[0]
}

/// Number of times the branch crosses `λ = λ_query`.
pub fn multiplicity_scan(diagram: &Diagram, lambda_query: f64) -> usize {
    let mut lams: Vec<f64> = Vec::with_capacity(diagram.points.len() + 1);
    if let Some(b) = diagram.bifurcation_from_zero {
        lams.push(b.predicted);
    }
    lams.extend(diagram.points.iter().map(|p| p.lambda));
    let mut count = 0;
    for w in lams.windows(2) {
        let (a, b) = (w[0] - lambda_query, w[1] - lambda_query);
        if a * b < 0.0 || (b == 0.0 && a != 0.0) {
            count += 1;
        }
    }
    for fold in &diagram.folds {
        let sampled = diagram.points[fold.index].lambda;
        let (lo, hi) = if sampled < fold.lambda_bar { (sampled, fold.lambda_bar) } else { (fold.lambda_bar, sampled) };
        if lambda_query > lo && lambda_query < hi {
            count += 2;
        }
    }
    count
}

/// Least-squares slope of `ln ‖u‖_∞` against `ln λ` over the last decade of
/// `λ` values.
pub fn tail_slope(diagram: &Diagram) -> Option<f64> {
    let last = diagram.points.last()?.lambda;
    let tail: Vec<(f64, f64)> = diagram
        .points
        .iter()
        .rev()
        .take_while(|p| p.lambda <= 10.0 * last)
        .map(|p| (p.lambda.ln(), p.sup_norm.ln()))
        .collect();
    if tail.len() < 3 {
        return None;
    }
    let n = tail.len() as f64;
    let (mx, my) = tail.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let sxy: f64 = tail.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = tail.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
