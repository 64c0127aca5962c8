#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

mod config;
mod error;
mod run;

use config::Partial;

/// Finite element continuation for the nonlinear flux problem.
#[derive(Debug, Parser)]
#[command(name = "nlflux", version)]
struct Args {
    /// Configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// steklov, analyze, branch, limiting, oracle-compare or bootstrap.
    #[arg(long)]
    mode: Option<String>,
    /// disk:<level>[:<radius>], rect:<nx>x<ny>[:<w>x<h>] or file:<path>.
    #[arg(long)]
    mesh: Option<String>,
    /// Nonlinearity, e.g. "s - s^2 + s^3".
    #[arg(long = "f")]
    f: Option<String>,
    /// Space dimension N used by analyze and bootstrap.
    #[arg(long)]
    dimension: Option<u32>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Newton and eigenvalue tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

impl Args {
    fn partial(self) -> (Partial, Option<PathBuf>) {
        let flags = Partial {
            mode: self.mode,
            mesh: self.mesh,
            f: self.f,
            dimension: self.dimension,
            tol: self.tol,
            out: self.out,
            ..Partial::default()
        };
        (flags, self.config)
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let (flags, path) = args.partial();
    let base = match path {
        Some(p) => Partial::from_file(&p),
        None => Ok(Partial::default()),
    };
    let prepared = base.and_then(|b| b.overlay(flags).finish());
    let cfg = match prepared {
        Ok(c) => c,
        Err(e) => {
            eprintln!("nlflux: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let out = match run::Output::create(&cfg.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("nlflux: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run::run(&cfg, &out) {
        Ok(line) => {
            println!("{}: {line}", cfg.mode);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("nlflux: {e}");
            if let Err(w) = out.failure(cfg.mode, &e) {
                eprintln!("nlflux: could not write failure record: {w}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
