//! Run configuration: a line-oriented `key = value` file with sections,
//! overlaid by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nlflux::continuation::{ContinuationOptions, NewtonOptions};
use nlflux::{generate_disk_mesh, generate_rectangle_mesh, load_mesh, MeshGeometry, NonlinearitySpec};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Steklov,
    Analyze,
    Branch,
    Limiting,
    OracleCompare,
    Bootstrap,
}

impl Mode {
    pub fn needs_mesh(self) -> bool {
        !matches!(self, Mode::Analyze | Mode::Bootstrap)
    }

    pub fn needs_f(self) -> bool {
        !matches!(self, Mode::Steklov)
    }
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "steklov" => Mode::Steklov,
            "analyze" => Mode::Analyze,
            "branch" => Mode::Branch,
            "limiting" => Mode::Limiting,
            "oracle-compare" => Mode::OracleCompare,
            "bootstrap" => Mode::Bootstrap,
            other => return Err(CliError::Config(format!("unknown mode `{other}`"))),
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Steklov => "steklov",
            Mode::Analyze => "analyze",
            Mode::Branch => "branch",
            Mode::Limiting => "limiting",
            Mode::OracleCompare => "oracle-compare",
            Mode::Bootstrap => "bootstrap",
        })
    }
}

/// `disk:<level>[:<radius>]`, `rect:<nx>x<ny>[:<w>x<h>]` or `file:<path>`.
#[derive(Debug, Clone, PartialEq)]
pub enum MeshSpec {
    Disk { level: u32, radius: f64 },
    Rect { nx: usize, ny: usize, width: f64, height: f64 },
    File(PathBuf),
}

impl MeshSpec {
    pub fn build(&self) -> Result<MeshGeometry, CliError> {
        let mesh = match self {
            MeshSpec::Disk { level, radius } => generate_disk_mesh(*radius, *level),
            MeshSpec::Rect { nx, ny, width, height } => generate_rectangle_mesh(*width, *height, *nx, *ny),
            MeshSpec::File(path) => load_mesh(path),
        };
        mesh.map_err(|e| CliError::Config(format!("mesh `{self}`: {e}")))
    }

    pub fn disk_radius(&self) -> Option<f64> {
        match self {
            MeshSpec::Disk { radius, .. } => Some(*radius),
            _ => None,
        }
    }
}

impl FromStr for MeshSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| CliError::Config(format!("mesh `{s}`: {m}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("expected `<kind>:<args>`"))?;
        match kind {
            "disk" => {
                let (level, radius) = match rest.split_once(':') {
                    Some((l, r)) => (l, r.parse::<f64>().map_err(|_| bad("radius is not a number"))?),
                    None => (rest, 1.0),
                };
                let level = level.parse().map_err(|_| bad("level is not a non-negative integer"))?;
                Ok(MeshSpec::Disk { level, radius })
            }
            "rect" => {
                let (cells, size) = match rest.split_once(':') {
                    Some((c, z)) => (c, Some(z)),
                    None => (rest, None),
                };
                let (nx, ny) = cells.split_once('x').ok_or_else(|| bad("expected `<nx>x<ny>`"))?;
                let nx = nx.parse().map_err(|_| bad("nx is not an integer"))?;
                let ny = ny.parse().map_err(|_| bad("ny is not an integer"))?;
                let (width, height) = match size {
                    Some(z) => {
                        let (w, h) = z.split_once('x').ok_or_else(|| bad("expected `<w>x<h>`"))?;
                        (
                            w.parse().map_err(|_| bad("width is not a number"))?,
                            h.parse().map_err(|_| bad("height is not a number"))?,
                        )
                    }
                    None => (1.0, 1.0),
                };
                Ok(MeshSpec::Rect { nx, ny, width, height })
            }
            "file" if !rest.is_empty() => Ok(MeshSpec::File(PathBuf::from(rest))),
            _ => Err(bad("kind must be disk, rect or file")),
        }
    }
}

impl fmt::Display for MeshSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeshSpec::Disk { level, radius } => write!(f, "disk:{level}:{radius}"),
            MeshSpec::Rect { nx, ny, width, height } => write!(f, "rect:{nx}x{ny}:{width}x{height}"),
            MeshSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub mesh: Option<MeshSpec>,
    pub f: Option<NonlinearitySpec>,
    pub dimension: u32,
    /// Newton and eigenvalue tolerance.
    pub tol: f64,
    /// Amplitude of the first point off the trivial branch.
    pub eps: f64,
    /// Starting amplitude for nonlinearities with `f′(0) = 0`.
    pub start_amplitude: f64,
    /// Number of `λ` values in the multiplicity table.
    pub multiplicity_points: usize,
    pub bootstrap_steps: usize,
    pub continuation: ContinuationOptions,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions { tol: self.tol, ..NewtonOptions::default() }
    }
}

/// Values before validation; every field may still be missing.
#[derive(Debug, Default, Clone)]
pub struct Partial {
    pub mode: Option<String>,
    pub mesh: Option<String>,
    pub f: Option<String>,
    pub dimension: Option<u32>,
    pub tol: Option<f64>,
    pub eps: Option<f64>,
    pub start_amplitude: Option<f64>,
    pub multiplicity_points: Option<usize>,
    pub bootstrap_steps: Option<usize>,
    pub initial_step: Option<f64>,
    pub min_step: Option<f64>,
    pub max_step: Option<f64>,
    pub lambda_min: Option<f64>,
    pub norm_max: Option<f64>,
    pub switch_norm: Option<f64>,
    pub max_points: Option<usize>,
    pub max_failures: Option<usize>,
    pub out: Option<PathBuf>,
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Config(format!("line {line}: invalid value `{v}` for `{key}`")))
}

impl Partial {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut out = Partial::default();
        let mut section = String::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("line {line}: unterminated section header")))?
                    .trim();
                if !matches!(name, "mesh" | "nonlinearity" | "continuation" | "output") {
                    return Err(CliError::Config(format!("line {line}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {line}: expected `key = value`")))?;
            let key = key.trim();
            let value = value.trim();
            let value = value.strip_prefix('"').and_then(|v| v.strip_suffix('"')).unwrap_or(value);
            match (section.as_str(), key) {
                ("", "mode") => out.mode = Some(value.to_string()),
                ("mesh", "spec") => out.mesh = Some(value.to_string()),
                ("nonlinearity", "f") => out.f = Some(value.to_string()),
                ("nonlinearity", "dimension") => out.dimension = Some(parse_value(line, key, value)?),
                ("continuation", "tol") => out.tol = Some(parse_value(line, key, value)?),
                ("continuation", "eps") => out.eps = Some(parse_value(line, key, value)?),
                ("continuation", "start_amplitude") => out.start_amplitude = Some(parse_value(line, key, value)?),
                ("continuation", "multiplicity_points") => {
                    out.multiplicity_points = Some(parse_value(line, key, value)?)
                }
                ("continuation", "bootstrap_steps") => out.bootstrap_steps = Some(parse_value(line, key, value)?),
                ("continuation", "initial_step") => out.initial_step = Some(parse_value(line, key, value)?),
                ("continuation", "min_step") => out.min_step = Some(parse_value(line, key, value)?),
                ("continuation", "max_step") => out.max_step = Some(parse_value(line, key, value)?),
                ("continuation", "lambda_min") => out.lambda_min = Some(parse_value(line, key, value)?),
                ("continuation", "norm_max") => out.norm_max = Some(parse_value(line, key, value)?),
                ("continuation", "switch_norm") => out.switch_norm = Some(parse_value(line, key, value)?),
                ("continuation", "max_points") => out.max_points = Some(parse_value(line, key, value)?),
                ("continuation", "max_failures") => out.max_failures = Some(parse_value(line, key, value)?),
                ("output", "dir") => out.out = Some(PathBuf::from(value)),
                (sec, key) => {
                    let at = if sec.is_empty() { "top level".to_string() } else { format!("[{sec}]") };
                    return Err(CliError::Config(format!("line {line}: unknown key `{key}` at {at}")));
                }
            }
        }
        Ok(out)
    }

    /// Fields set in `other` win.
    pub fn overlay(mut self, other: Partial) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            mode,
            mesh,
            f,
            dimension,
            tol,
            eps,
            start_amplitude,
            multiplicity_points,
            bootstrap_steps,
            initial_step,
            min_step,
            max_step,
            lambda_min,
            norm_max,
            switch_norm,
            max_points,
            max_failures,
            out
        );
        self
    }

    pub fn finish(self) -> Result<RunConfig, CliError> {
        let cfg = |m: String| CliError::Config(m);
        let mode: Mode = self.mode.as_deref().ok_or_else(|| cfg("no mode given".into()))?.parse()?;
        let mesh = self.mesh.as_deref().map(str::parse::<MeshSpec>).transpose()?;
        if mode.needs_mesh() && mesh.is_none() {
            return Err(cfg(format!("mode {mode} needs a mesh")));
        }
        let f = self
            .f
            .as_deref()
            .map(|s| s.parse::<NonlinearitySpec>().map_err(|e| cfg(format!("nonlinearity: {e}"))))
            .transpose()?;
        if mode.needs_f() && f.is_none() {
            return Err(cfg(format!("mode {mode} needs a nonlinearity")));
        }
        let dimension = self.dimension.unwrap_or(2);
        if dimension < 2 || (mode == Mode::Bootstrap && dimension < 3) {
            return Err(cfg(format!("dimension {dimension} is out of range for mode {mode}")));
        }

        let defaults = ContinuationOptions::default();
        let continuation = ContinuationOptions {
            initial_step: self.initial_step.unwrap_or(defaults.initial_step),
            min_step: self.min_step.unwrap_or(defaults.min_step),
            max_step: self.max_step.unwrap_or(defaults.max_step),
            lambda_min: self.lambda_min.or(defaults.lambda_min),
            norm_max: self.norm_max.unwrap_or(defaults.norm_max),
            switch_norm: self.switch_norm.unwrap_or(defaults.switch_norm),
            max_points: self.max_points.unwrap_or(defaults.max_points),
            max_failures: self.max_failures.unwrap_or(defaults.max_failures),
            ..defaults
        };
        let tol = self.tol.unwrap_or(NewtonOptions::default().tol);
        let eps = self.eps.unwrap_or(1e-3);
        let start_amplitude = self.start_amplitude.unwrap_or(0.1);
        let positive = [
            ("tol", tol),
            ("eps", eps),
            ("start_amplitude", start_amplitude),
            ("initial_step", continuation.initial_step),
            ("min_step", continuation.min_step),
            ("max_step", continuation.max_step),
            ("norm_max", continuation.norm_max),
            ("switch_norm", continuation.switch_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(cfg(format!("`{name}` must be positive, got {v}")));
            }
        }
        if continuation.min_step > continuation.initial_step || continuation.initial_step > continuation.max_step {
            return Err(cfg("steps must satisfy min_step ≤ initial_step ≤ max_step".into()));
        }
        if let Some(l) = continuation.lambda_min {
            if !(l >= 0.0) {
                return Err(cfg(format!("`lambda_min` must be non-negative, got {l}")));
            }
        }
        Ok(RunConfig {
            mode,
            mesh,
            f,
            dimension,
            tol,
            eps,
            start_amplitude,
            multiplicity_points: self.multiplicity_points.unwrap_or(40),
            bootstrap_steps: self.bootstrap_steps.unwrap_or(1000),
            continuation,
            out: self.out.unwrap_or_else(|| PathBuf::from("out")),
        })
    }
}
