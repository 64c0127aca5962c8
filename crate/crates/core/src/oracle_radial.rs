//! Closed-form radial solutions on a disk.
//!
//! `u(r) = c·I₀(r)` solves `−Δu + u = 0`; the flux condition at `r = R`
//! reads `c·I₁(R) = λ f(c·I₀(R))`. With `t = c·I₀(R) = ‖u‖_∞` this gives the
//! exact branch `λ(t) = μ₁ t / f(t)` where `μ₁ = I₁(R)/I₀(R)`.

use serde::Serialize;
use thiserror::Error;

use crate::mesh::MeshGeometry;
use crate::nonlinearity::NonlinearitySpec;

/// Largest argument accepted by the series evaluation.
pub const MAX_SERIES_ARG: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("argument {0} outside the series range [0, 30]")]
    OutOfRange(f64),
    #[error("only orders 0 and 1 are supported (got {0})")]
    UnsupportedOrder(u32),
    #[error("f vanishes or fails at t = {0}")]
    Degenerate(f64),
}

/// Modified Bessel function `Iₙ(x)` for `n ∈ {0, 1}` from its power series
/// `Σ (x/2)^{n+2k} / (k!(n+k)!)`, truncated once a term drops below
/// `tol·partial_sum`.
pub fn bessel_i(n: u32, x: f64, tol: f64) -> Result<f64, OracleError> {
    if n > 1 {
        return Err(OracleError::UnsupportedOrder(n));
    }
    if !(0.0..=MAX_SERIES_ARG).contains(&x) {
        return Err(OracleError::OutOfRange(x));
    }
    let half = 0.5 * x;
    let quarter = half * half;
    let mut term = if n == 0 { 1.0 } else { half };
    let mut sum = term;
    let mut k = 0.0;
    while term > tol * sum {
        k += 1.0;
        term *= quarter / (k * (k + n as f64));
        sum += term;
    }
    Ok(sum)
}

pub fn bessel_i0(x: f64) -> Result<f64, OracleError> {
    bessel_i(0, x, 1e-15)
}

pub fn bessel_i1(x: f64) -> Result<f64, OracleError> {
    bessel_i(1, x, 1e-15)
}

/// First Steklov eigenvalue of `−Δψ + ψ = 0`, `∂ψ/∂η = μψ` on the disk of
/// the given radius.
pub fn disk_mu1(radius: f64) -> Result<f64, OracleError> {
    if !(radius > 0.0) {
        return Err(OracleError::OutOfRange(radius));
    }
    Ok(bessel_i1(radius)? / bessel_i0(radius)?)
}

/// `∫_{disk} |∇I₀|² + I₀²` by composite Gauss–Legendre quadrature in `r`.
pub fn radial_h1_energy(radius: f64) -> Result<f64, OracleError> {
    const NODES: [f64; 5] =
        [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
    const WEIGHTS: [f64; 5] = [
        0.236_926_885_056_189,
        0.478_628_670_499_366,
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
    ];
    let panels = 64;
    let h = radius / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let mid = (k as f64 + 0.5) * h;
        for (x, w) in NODES.iter().zip(WEIGHTS) {
            let r = mid + 0.5 * h * x;
            let (i0, i1) = (bessel_i0(r)?, bessel_i1(r)?);
            total += w * 0.5 * h * (i0 * i0 + i1 * i1) * r;
        }
    }
    Ok(2.0 * std::f64::consts::PI * total)
}

/// Samples of the exact radial bifurcation diagram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialBranch {
    pub t_grid: Vec<f64>,
    pub lambda_of_t: Vec<f64>,
    pub mu1_exact: f64,
    pub radius: f64,
}

impl RadialBranch {
    /// Radial profile `u(r) = t·I₀(r)/I₀(R)` with sup-norm `t`.
    pub fn profile(&self, t: f64, r: f64) -> Result<f64, OracleError> {
        radial_profile(self.radius, t, r)
    }
}

pub fn radial_profile(radius: f64, t: f64, r: f64) -> Result<f64, OracleError> {
    Ok(t * bessel_i0(r)? / bessel_i0(radius)?)
}

/// `λ(t) = μ₁ t / f(t)` on the given grid.
pub fn radial_branch(f: &NonlinearitySpec, radius: f64, t_grid: &[f64]) -> Result<RadialBranch, OracleError> {
    let mu1 = disk_mu1(radius)?;
    let lambda_of_t = t_grid.iter().map(|&t| radial_lambda(f, mu1, t)).collect::<Result<_, _>>()?;
    Ok(RadialBranch { t_grid: t_grid.to_vec(), lambda_of_t, mu1_exact: mu1, radius })
}

pub fn radial_lambda(f: &NonlinearitySpec, mu1: f64, t: f64) -> Result<f64, OracleError> {
    match f.eval(t) {
        Ok(v) if v > 0.0 && t > 0.0 => Ok(mu1 * t / v),
        _ => Err(OracleError::Degenerate(t)),
    }
}

/// Nodal interpolant of the radial profile with sup-norm `t`.
pub fn interpolate_radial(mesh: &MeshGeometry, radius: f64, t: f64) -> Result<Vec<f64>, OracleError> {
    let scale = t / bessel_i0(radius)?;
    mesh.vertices().iter().map(|&[x, y]| Ok(scale * bessel_i0(x.hypot(y).min(radius))?)).collect()
}

/// Maximum of `λ(t)` over a log grid `t ∈ [1e-6, 1e6]`, refined locally.
pub fn max_radial_lambda(f: &NonlinearitySpec, mu1: f64) -> (f64, f64) {
    let lam = |t: f64| radial_lambda(f, mu1, t).unwrap_or(0.0);
    let n = 1200;
    let grid: Vec<f64> = (0..=n).map(|k| 1e-6 * 10f64.powf(12.0 * k as f64 / n as f64)).collect();
    let (k, _) =
        grid.iter()
            .enumerate()
            .map(|(k, &t)| (k, lam(t)))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let (mut lo, mut hi) = (grid[k.saturating_sub(1)].ln(), grid[(k + 1).min(n)].ln());
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if lam(m1.exp()) < lam(m2.exp()) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let t = (0.5 * (lo + hi)).exp();
    (t, lam(t).max(lam(grid[0])))
}
