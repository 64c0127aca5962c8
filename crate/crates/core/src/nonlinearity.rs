//! Boundary nonlinearities `f(s) = Σ aⱼ s^{eⱼ}` and their hypothesis analysis.
//!
//! All evaluation goes through the even extension `f(|s|)`, so Newton
//! iterates that dip below zero stay meaningful.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Arguments beyond this magnitude are rejected by [`PowerSum::eval`].
pub const EVAL_LIMIT: f64 = 1e150;

const GRID_LO: f64 = 1e-8;
const GRID_HI: f64 = 1e8;
const GRID_PER_DECADE: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("argument {0:e} is outside the evaluation range")]
    ArgumentOverflow(f64),
    #[error("value at argument {0:e} overflows")]
    ResultOverflow(f64),
    #[error("rescaling needs a superlinear leading exponent (p = {0})")]
    NotSuperlinear(f64),
    #[error("negative parameter λ = {0}")]
    NegativeParameter(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlinearityError {
    #[error("nonlinearity has no terms")]
    Empty,
    #[error("leading coefficient {0} must be positive")]
    NegativeLeading(f64),
    #[error("exponent {0} must be finite and at least 1")]
    BadExponent(f64),
    #[error("exponents must be strictly increasing ({0} follows {1})")]
    Unordered(f64, f64),
    #[error("coefficient of s^{0} must be finite and nonzero")]
    BadCoefficient(f64),
    #[error("f takes the negative value {value:e} at s = {at:e}")]
    Negative { at: f64, value: f64 },
    #[error("cannot parse `{0}`: {1}")]
    Parse(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerTerm {
    pub coefficient: f64,
    pub exponent: f64,
}

/// Unvalidated power sum, evaluated through the even extension. Used for
/// `f` itself as well as derived sums such as `λ·f` or `f̃(λ, ·)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowerSum {
    terms: Vec<PowerTerm>,
}

impl PowerSum {
    pub fn new(terms: impl IntoIterator<Item = PowerTerm>) -> Self {
        Self { terms: terms.into_iter().collect() }
    }

    pub fn terms(&self) -> &[PowerTerm] {
        &self.terms
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.terms.iter().map(|t| PowerTerm { coefficient: c * t.coefficient, ..*t }))
    }

    /// `f(|s|)`.
    pub fn eval(&self, s: f64) -> Result<f64, EvalError> {
        let x = s.abs();
        if !(x <= EVAL_LIMIT) {
            return Err(EvalError::ArgumentOverflow(s));
        }
        let v: f64 = self.terms.iter().map(|t| t.coefficient * x.powf(t.exponent)).sum();
        if !v.is_finite() || v.abs() > f64::MAX / 2.0 {
            return Err(EvalError::ResultOverflow(s));
        }
        Ok(v)
    }

    /// `d/ds f(|s|) = sign(s)·f′(|s|)`, with the one-sided `f′(0⁺)` at zero.
    pub fn eval_prime(&self, s: f64) -> Result<f64, EvalError> {
        let x = s.abs();
        if !(x <= EVAL_LIMIT) {
            return Err(EvalError::ArgumentOverflow(s));
        }
        let d: f64 = self.terms.iter().map(|t| t.coefficient * t.exponent * x.powf(t.exponent - 1.0)).sum();
        if !d.is_finite() {
            return Err(EvalError::ResultOverflow(s));
        }
        Ok(if s < 0.0 { -d } else { d })
    }
}

/// Validated boundary nonlinearity: exponents `≥ 1` strictly increasing,
/// positive leading coefficient and `f ≥ 0` on `[0, ∞)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearitySpec {
    sum: PowerSum,
}

impl NonlinearitySpec {
    pub fn new(terms: &[(f64, f64)]) -> Result<Self, NonlinearityError> {
        Self::from_terms(terms.iter().map(|&(coefficient, exponent)| PowerTerm { coefficient, exponent }).collect())
    }

    pub fn from_terms(terms: Vec<PowerTerm>) -> Result<Self, NonlinearityError> {
        let last = *terms.last().ok_or(NonlinearityError::Empty)?;
        for (k, t) in terms.iter().enumerate() {
            if !t.exponent.is_finite() || t.exponent < 1.0 {
                return Err(NonlinearityError::BadExponent(t.exponent));
            }
            if !t.coefficient.is_finite() || t.coefficient == 0.0 {
                return Err(NonlinearityError::BadCoefficient(t.exponent));
            }
            if k > 0 && !(t.exponent > terms[k - 1].exponent) {
                return Err(NonlinearityError::Unordered(t.exponent, terms[k - 1].exponent));
            }
        }
        if last.coefficient <= 0.0 {
            return Err(NonlinearityError::NegativeLeading(last.coefficient));
        }
        let spec = Self { sum: PowerSum::new(terms) };
        spec.check_nonnegative()?;
        Ok(spec)
    }

    fn check_nonnegative(&self) -> Result<(), NonlinearityError> {
        // f(s)/s on a log grid; scale-aware tolerance for touching zeros
        let ratio = |s: f64| self.ratio(s);
        let scale =
            |s: f64| -> f64 { self.sum.terms.iter().map(|t| t.coefficient.abs() * s.powf(t.exponent - 1.0)).sum() };
        let grid = log_grid();
        let values: Vec<f64> = grid.iter().map(|&s| ratio(s)).collect();
        for k in 0..grid.len() {
            if values[k] < -1e-12 * scale(grid[k]) {
                // bracket the first sign change to name a root
                let at =
                    if k > 0 && values[k - 1] >= 0.0 { bisect_root(&ratio, grid[k - 1], grid[k]) } else { grid[k] };
                return Err(NonlinearityError::Negative { at, value: self.sum.eval(grid[k]).unwrap_or(f64::NAN) });
            }
        }
        for k in 1..grid.len() - 1 {
            if values[k] <= values[k - 1] && values[k] <= values[k + 1] {
                let (s, v) = golden_min_log(&ratio, grid[k - 1], grid[k + 1], 1e-12);
                if v < -1e-12 * scale(s) {
                    return Err(NonlinearityError::Negative { at: s, value: v * s });
                }
            }
        }
        Ok(())
    }

    fn ratio(&self, s: f64) -> f64 {
        self.sum.terms.iter().map(|t| t.coefficient * s.powf(t.exponent - 1.0)).sum()
    }

    pub fn terms(&self) -> &[PowerTerm] {
        self.sum.terms()
    }

    pub fn as_power_sum(&self) -> &PowerSum {
        &self.sum
    }

    /// Leading exponent `p`.
    pub fn p(&self) -> f64 {
        self.leading().exponent
    }

    /// Leading coefficient `b`.
    pub fn b(&self) -> f64 {
        self.leading().coefficient
    }

    fn leading(&self) -> PowerTerm {
        *self.sum.terms.last().expect("validated non-empty")
    }

    pub fn fprime0(&self) -> f64 {
        self.sum.terms.iter().find(|t| t.exponent == 1.0).map_or(0.0, |t| t.coefficient)
    }

    /// Smallest exponent above 1, with its coefficient.
    pub fn sub_linear_term(&self) -> Option<PowerTerm> {
        self.sum.terms.iter().find(|t| t.exponent > 1.0).copied()
    }

    pub fn eval(&self, s: f64) -> Result<f64, EvalError> {
        self.sum.eval(s)
    }

    pub fn eval_prime(&self, s: f64) -> Result<f64, EvalError> {
        self.sum.eval_prime(s)
    }

    /// Remainder `𝓡(s) = f(s) − f′(0)s`.
    pub fn remainder(&self, s: f64) -> Result<f64, EvalError> {
        Ok(self.eval(s)? - self.fprime0() * s.abs())
    }

    /// `c·f` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self, NonlinearityError> {
        Self::from_terms(self.sum.scaled(c).terms)
    }

    fn rescale_exponent(&self, t: &PowerTerm) -> f64 {
        (self.p() - t.exponent) / (self.p() - 1.0)
    }

    /// `f̃(λ, ·)` as a power sum: term `aⱼ s^{eⱼ}` becomes
    /// `aⱼ λ^{(p−eⱼ)/(p−1)} s^{eⱼ}`, which equals `λ^{p/(p−1)} f(λ^{−1/(p−1)} s)`
    /// for `λ > 0` and `b s^p` at `λ = 0`.
    pub fn rescaled(&self, lambda: f64) -> Result<PowerSum, EvalError> {
        self.rescaled_with(lambda, |_, c| c)
    }

    /// `∂f̃/∂(ln λ)` as a power sum.
    pub fn rescaled_log_derivative(&self, lambda: f64) -> Result<PowerSum, EvalError> {
        self.rescaled_with(lambda, |k, c| k * c)
    }

    fn rescaled_with(&self, lambda: f64, coeff: impl Fn(f64, f64) -> f64) -> Result<PowerSum, EvalError> {
        let p = self.p();
        if !(p > 1.0) {
            return Err(EvalError::NotSuperlinear(p));
        }
        if !(lambda >= 0.0) {
            return Err(EvalError::NegativeParameter(lambda));
        }
        let ln = lambda.ln();
        Ok(PowerSum::new(self.sum.terms.iter().map(|t| {
            let k = self.rescale_exponent(t);
            let factor = if k == 0.0 {
                1.0
            } else if lambda == 0.0 {
                0.0
            } else {
                (k * ln).exp()
            };
            PowerTerm { coefficient: coeff(k, t.coefficient * factor), exponent: t.exponent }
        })))
    }

    /// Rescaled nonlinearity `f̃(λ, s) = λ^{p/(p−1)} f(λ^{−1/(p−1)}|s|)`,
    /// `f̃(0, s) = b|s|^p`. Evaluated term by term in logarithms so large
    /// inner arguments never materialize.
    pub fn f_tilde(&self, lambda: f64, s: f64) -> Result<f64, EvalError> {
        let p = self.p();
        if !(p > 1.0) {
            return Err(EvalError::NotSuperlinear(p));
        }
        if !(lambda >= 0.0) {
            return Err(EvalError::NegativeParameter(lambda));
        }
        let x = s.abs();
        if x == 0.0 {
            return Ok(0.0);
        }
        let (ln_l, ln_x) = (lambda.ln(), x.ln());
        let mut total = 0.0;
        for t in &self.sum.terms {
            let k = self.rescale_exponent(t);
            if lambda == 0.0 && k > 0.0 {
                continue;
            }
            let k_part = if k == 0.0 { 0.0 } else { k * ln_l };
            total += t.coefficient * (k_part + t.exponent * ln_x).exp();
        }
        if !(total.abs() <= EVAL_LIMIT) {
            return Err(EvalError::ResultOverflow(s));
        }
        Ok(total)
    }

    /// Smallest `C` with `f(s) ≤ C(1 + s^p)` for all `s ≥ 0`, from a log grid
    /// refined by golden section.
    pub fn growth_constant(&self) -> f64 {
        let p = self.p();
        let g = |s: f64| -(self.sum.eval(s).unwrap_or(f64::INFINITY)) / (1.0 + s.powf(p));
        let grid = log_grid();
        let vals: Vec<f64> = grid.iter().map(|&s| g(s)).collect();
        let (k, _) =
            vals.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
        let lo = grid[k.saturating_sub(1)];
        let hi = grid[(k + 1).min(grid.len() - 1)];
        let (_, v) = golden_min_log(&g, lo, hi, 1e-12);
        let sup = (-v).max(-vals[k]).max(self.b());
        sup * (1.0 + 1e-9)
    }
}

impl fmt::Display for NonlinearitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, t) in self.sum.terms.iter().enumerate() {
            let (sign, c) = if t.coefficient < 0.0 { ("-", -t.coefficient) } else { ("+", t.coefficient) };
            match (k, sign) {
                (0, "+") => write!(f, "{c}*s^{}", t.exponent)?,
                (0, _) => write!(f, "-{c}*s^{}", t.exponent)?,
                _ => write!(f, " {sign} {c}*s^{}", t.exponent)?,
            }
        }
        Ok(())
    }
}

impl FromStr for NonlinearitySpec {
    type Err = NonlinearityError;

    /// Parses signed `coeff*s^exponent` terms, e.g. `f = 1*s^1 - 1*s^2 + 1*s^3`.
    /// The coefficient, `*` and `^exponent` parts are optional.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let perr = |m: &str| NonlinearityError::Parse(text.to_string(), m.to_string());
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let body = compact.strip_prefix("f=").unwrap_or(&compact);
        if body.is_empty() {
            return Err(perr("empty expression"));
        }
        let chars: Vec<char> = body.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        for k in 1..chars.len() {
            let prev = chars[k - 1];
            if (chars[k] == '+' || chars[k] == '-') && !matches!(prev, 'e' | 'E' | '^' | '*') {
                pieces.push(chars[start..k].iter().collect::<String>());
                start = k;
            }
        }
        pieces.push(chars[start..].iter().collect::<String>());

        let mut terms = Vec::new();
        for piece in pieces {
            let (sign, rest) = match piece.strip_prefix('-') {
                Some(r) => (-1.0, r),
                None => (1.0, piece.strip_prefix('+').unwrap_or(&piece)),
            };
            let Some(pos) = rest.find('s') else {
                return Err(perr(&format!("term `{piece}` has no `s`")));
            };
            let (coeff_part, after) = (&rest[..pos], &rest[pos + 1..]);
            let coeff_part = coeff_part.strip_suffix('*').unwrap_or(coeff_part);
            let coefficient = if coeff_part.is_empty() {
                1.0
            } else {
                coeff_part.parse::<f64>().map_err(|e| perr(&format!("coefficient `{coeff_part}`: {e}")))?
            };
            let exponent = match after {
                "" => 1.0,
                e => {
                    let e = e.strip_prefix('^').ok_or_else(|| perr(&format!("unexpected `{e}` after s")))?;
                    e.parse::<f64>().map_err(|err| perr(&format!("exponent `{e}`: {err}")))?
                }
            };
            terms.push(PowerTerm { coefficient: sign * coefficient, exponent });
        }
        terms.sort_by(|a, b| a.exponent.total_cmp(&b.exponent));
        Self::from_terms(terms)
    }
}

/// Bifurcation direction at the trivial-solution bifurcation point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Subcritical,
    Supercritical,
    Inconclusive,
}

/// Every hypothesis parameter of a nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub dimension: u32,
    pub p: f64,
    pub b: f64,
    /// Superlinear subcritical growth at infinity, keyed by dimension.
    pub subcritical_for_n: BTreeMap<u32, bool>,
    pub satisfies_hinf: bool,
    pub fprime0: f64,
    pub nu: Option<f64>,
    pub r0_lower: f64,
    pub r0_upper: f64,
    /// `inf_{s>0} f(s)/s`; zero means the linear lower bound fails.
    pub k: f64,
    pub k_argmin: f64,
    pub satisfies_h0: bool,
    pub satisfies_linear_lower_bound: bool,
}

impl HypothesisReport {
    /// Direction predicted from the sign of the remainder coefficients.
    pub fn analytic_direction(&self) -> Direction {
        if !self.satisfies_h0 {
            Direction::Inconclusive
        } else if self.r0_lower > 0.0 {
            Direction::Subcritical
        } else if self.r0_upper < 0.0 {
            Direction::Supercritical
        } else {
            Direction::Inconclusive
        }
    }

    /// `μ₁/K`, or `None` when `K = 0`.
    pub fn nonexistence_bound(&self, mu1: f64) -> Option<f64> {
        (self.k > 0.0).then(|| mu1 / self.k)
    }
}

fn subcritical(p: f64, n: u32) -> bool {
    p > 1.0 && (n == 2 || p < n as f64 / (n as f64 - 2.0))
}

pub fn analyze(f: &NonlinearitySpec, dimension: u32) -> HypothesisReport {
    let (p, b) = (f.p(), f.b());
    let mut subcritical_for_n: BTreeMap<u32, bool> = (2..=8).map(|n| (n, subcritical(p, n))).collect();
    subcritical_for_n.insert(dimension, subcritical(p, dimension));
    let fprime0 = f.fprime0();
    let sub = f.sub_linear_term();
    let r0 = sub.map_or(0.0, |t| t.coefficient);
    let (k, k_argmin) = infimum_ratio(f);
    HypothesisReport {
        dimension,
        p,
        b,
        satisfies_hinf: subcritical(p, dimension),
        subcritical_for_n,
        fprime0,
        nu: sub.map(|t| t.exponent),
        r0_lower: r0,
        r0_upper: r0,
        k,
        k_argmin,
        satisfies_h0: fprime0 > 0.0 && sub.is_some(),
        satisfies_linear_lower_bound: k > 0.0,
    }
}

/// `K = inf_{s>0} f(s)/s` with its location (0 when approached as `s → 0⁺`).
fn infimum_ratio(f: &NonlinearitySpec) -> (f64, f64) {
    let ratio = |s: f64| f.ratio(s);
    let grid = log_grid();
    let vals: Vec<f64> = grid.iter().map(|&s| ratio(s)).collect();
    let (k, vmin) =
        vals.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
    let (mut best, mut at) = (vmin, grid[k]);
    if k > 0 && k + 1 < grid.len() {
        let (s, v) = golden_min_log(&ratio, grid[k - 1], grid[k + 1], 1e-10);
        if v < best {
            best = v;
            at = s;
        }
    }
    let fp0 = f.fprime0();
    if fp0 <= best {
        (fp0, 0.0)
    } else {
        let scale: f64 = f.terms().iter().map(|t| t.coefficient.abs()).fold(0.0, f64::max);
        if best <= 1e-12 * scale {
            (0.0, at)
        } else {
            (best, at)
        }
    }
}

fn log_grid() -> Vec<f64> {
    let decades = (GRID_HI / GRID_LO).log10().round() as usize;
    let n = decades * GRID_PER_DECADE;
    (0..=n).map(|k| GRID_LO * 10f64.powf(k as f64 / GRID_PER_DECADE as f64)).collect()
}

/// Golden-section minimization of `g` over `[lo, hi]` in log-space, to
/// relative tolerance `rtol` in `s`.
fn golden_min_log(g: &impl Fn(f64) -> f64, lo: f64, hi: f64, rtol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut gc, mut gd) = (g(c.exp()), g(d.exp()));
    while b - a > rtol {
        if gc <= gd {
            b = d;
            d = c;
            gd = gc;
            c = b - inv_phi * (b - a);
            gc = g(c.exp());
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + inv_phi * (b - a);
            gd = g(d.exp());
        }
    }
    let s = (0.5 * (a + b)).exp();
    (s, g(s))
}

fn bisect_root(g: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let glo = g(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (g(mid) >= 0.0) == (glo >= 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Exponent sequences of the regularity bootstrap.
///
/// `q_seq[i]` and `r_seq[i]` hold `qᵢ`, `rᵢ` for `i = 0..=steps`;
/// `s_seq[i-1]` holds `sᵢ` for `i = 1..=steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapTrace {
    pub dimension: u32,
    pub p: f64,
    pub q_seq: Vec<f64>,
    pub r_seq: Vec<f64>,
    pub s_seq: Vec<f64>,
    pub terminated: bool,
    pub steps: usize,
}

impl BootstrapTrace {
    /// One-line summary such as `q: 1.6 → 3.2, terminated`.
    pub fn summary_line(&self) -> String {
        let qs: Vec<String> = self.q_seq.iter().map(|q| format_short(*q)).collect();
        let state = if self.terminated { "terminated" } else { "not terminated" };
        if qs.is_empty() {
            format!("q: (none), {state}")
        } else {
            format!("q: {}, {state}", qs.join(" → "))
        }
    }
}

fn format_short(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Runs `rᵢ = (N−1)qᵢ₋₁/(N−1−qᵢ₋₁)`, `qᵢ = rᵢ/p`, `sᵢ = N qᵢ₋₁/(N−1)` from
/// `r₀ = 2(N−1)/(N−2)`, `q₀ = r₀/p`, stopping once some `qᵢ ≥ N−1`.
///
/// At the critical exponent `p = N/(N−2)` the recursion has `r₀` as an
/// unstable fixed point; that case is returned as the exact constant
/// sequence instead of letting rounding drift decide termination.
pub fn bootstrap_exponents(dimension: u32, p: f64, max_steps: usize) -> BootstrapTrace {
    let mut trace = BootstrapTrace {
        dimension,
        p,
        q_seq: Vec::new(),
        r_seq: Vec::new(),
        s_seq: Vec::new(),
        terminated: true,
        steps: 0,
    };
    if dimension <= 2 {
        return trace;
    }
    let n = dimension as f64;
    let r0 = 2.0 * (n - 1.0) / (n - 2.0);
    let q0 = r0 / p;
    trace.r_seq.push(r0);
    trace.q_seq.push(q0);
    let critical = p * (n - 2.0) == n;
    let mut q = q0;
    while q < n - 1.0 && trace.steps < max_steps {
        let r = if critical { r0 } else { (n - 1.0) * q / (n - 1.0 - q) };
        trace.s_seq.push(n * q / (n - 1.0));
        q = r / p;
        trace.r_seq.push(r);
        trace.q_seq.push(q);
        trace.steps += 1;
    }
    trace.terminated = q >= n - 1.0;
    trace
}
