//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::{cmd_cgo_solve, cmd_detscan, cmd_perturb, cmd_soliton_verify, ResultBundle};
use crate::config::{Builtin, Method, PerturbationName, RunConfig};
use crate::error::CliError;

/// Numerical inverse scattering for the focusing Davey-Stewartson II equation.
#[derive(Debug, Parser)]
#[command(name = "dsii", version)]
pub struct Cli {
    /// Global overrides.
    #[command(flatten)]
    pub overrides: Overrides,
    /// What to run.
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand; each overrides the matching configuration field.
#[derive(Debug, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Half-width of the spatial square.
    #[arg(long, global = true)]
    pub half_width: Option<f64>,
    /// Grid points per side.
    #[arg(long, global = true)]
    pub points: Option<usize>,
    /// Built-in potential: zero, soliton, soliton+bump, soliton+degenerate, file.
    #[arg(long, global = true, value_parser = parse_builtin)]
    pub potential: Option<Builtin>,
    /// Sample file for `--potential file`.
    #[arg(long, global = true)]
    pub potential_file: Option<PathBuf>,
    /// Soliton spectral location as `re,im`.
    #[arg(long, global = true, value_parser = parse_pair)]
    pub k0: Option<[f64; 2]>,
    /// Perturbation size for the perturbed built-ins.
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Offset of the k-grid centre from `k0`, as `re,im`.
    #[arg(long, global = true, value_parser = parse_pair)]
    pub k_offset: Option<[f64; 2]>,
    /// Half-width of the k-grid.
    #[arg(long, global = true)]
    pub k_half_width: Option<f64>,
    /// Nodes per side of the k-grid.
    #[arg(long, global = true)]
    pub k_nodes: Option<usize>,
    /// Zero detection threshold relative to the median `|D|`.
    #[arg(long, global = true)]
    pub zero_threshold: Option<f64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

/// Subcommands.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan the Fredholm determinant and scattering data over a k-grid.
    Detscan {
        /// Skip the CGO solves and report the determinant only.
        #[arg(long)]
        no_scattering: bool,
    },
    /// Check the spectral structure of the soliton operator at its exceptional point.
    SolitonVerify,
    /// Scan a perturbed soliton for surviving exceptional points.
    Perturb {
        /// Perturbation: decisive, degenerate or zero.
        #[arg(long, value_parser = parse_perturbation)]
        perturbation: Option<PerturbationName>,
        /// Comma-separated perturbation sizes.
        #[arg(long, value_delimiter = ',')]
        eps_list: Option<Vec<f64>>,
    },
    /// Solve for the CGO solution at one spectral parameter.
    CgoSolve {
        /// Spectral parameter as `re,im`.
        #[arg(long, value_parser = parse_pair)]
        k: Option<[f64; 2]>,
        /// Use GMRES instead of dense LU.
        #[arg(long)]
        iterative: bool,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [re] => re.trim().parse().map(|r| [r, 0.0]).map_err(|e| format!("{e}")),
        [re, im] => Ok([re.trim().parse().map_err(|e| format!("{e}"))?, im.trim().parse().map_err(|e| format!("{e}"))?]),
        _ => Err(format!("expected re,im, got {s:?}")),
    }
}

fn parse_builtin(s: &str) -> Result<Builtin, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown potential {s:?}"))
}

fn parse_perturbation(s: &str) -> Result<PerturbationName, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown perturbation {s:?}"))
}

impl Cli {
    /// The configuration file, if any, with command-line overrides applied and validated.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let o = &self.overrides;
        let mut cfg = match &o.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &o.output {
            cfg.output_dir = v.clone();
        }
        set(&mut cfg.grid.half_width, o.half_width);
        set(&mut cfg.grid.points, o.points);
        set(&mut cfg.potential.builtin, o.potential);
        if let Some(v) = &o.potential_file {
            cfg.potential.file = Some(v.clone());
        }
        set(&mut cfg.potential.k0, o.k0);
        set(&mut cfg.potential.eps, o.eps);
        set(&mut cfg.kgrid.offset, o.k_offset);
        set(&mut cfg.kgrid.half_width, o.k_half_width);
        set(&mut cfg.kgrid.nodes, o.k_nodes);
        set(&mut cfg.tolerances.zero_threshold, o.zero_threshold);
        if o.workers.is_some() {
            cfg.workers = o.workers;
        }
        match &self.command {
            Command::Detscan { no_scattering } => cfg.tolerances.scattering &= !no_scattering,
            Command::SolitonVerify => {}
            Command::Perturb { perturbation, eps_list } => {
                set(&mut cfg.perturb.perturbation, *perturbation);
                if let Some(v) = eps_list {
                    cfg.perturb.eps = v.clone();
                }
            }
            Command::CgoSolve { k, iterative } => {
                set(&mut cfg.cgo.k, *k);
                if *iterative {
                    cfg.cgo.method = Method::Iterative;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

/// Worker count: `DSII_WORKERS`, then the configuration, then all available cores.
pub fn worker_count(cfg: &RunConfig) -> Result<usize, CliError> {
    match std::env::var("DSII_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("DSII_WORKERS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(cfg
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))),
    }
}

fn summarize<T: Serialize>(bundle: ResultBundle<T>) -> String {
    bundle.summary
}

/// Runs the parsed command on its own thread pool and returns the summary line.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(&cfg)?)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Detscan { .. } => cmd_detscan(&cfg).map(summarize),
        Command::SolitonVerify => cmd_soliton_verify(&cfg).map(summarize),
        Command::Perturb { .. } => cmd_perturb(&cfg).map(summarize),
        Command::CgoSolve { .. } => cmd_cgo_solve(&cfg).map(summarize),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_after_the_file() {
        let cli = Cli::parse_from(["dsii", "perturb", "--points", "16", "--eps-list", "0.01,0.03", "--potential", "soliton+bump", "--k0", "1,-2"]);
        let cfg = cli.resolve().unwrap();
        assert_eq!(cfg.grid.points, 16);
        assert_eq!(cfg.perturb.eps, vec![0.01, 0.03]);
        assert_eq!(cfg.potential.builtin, Builtin::SolitonBump);
        assert_eq!(cfg.potential.k0, [1.0, -2.0]);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Cli::try_parse_from(["dsii", "detscan", "--potential", "wave"]).is_err());
        assert!(Cli::try_parse_from(["dsii", "cgo-solve", "--k", "1,2,3"]).is_err());
        let cli = Cli::parse_from(["dsii", "detscan", "--points", "1"]);
        assert_eq!(cli.resolve().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn pairs_parse() {
        assert_eq!(parse_pair("1.5").unwrap(), [1.5, 0.0]);
        assert_eq!(parse_pair(" 1 , -2 ").unwrap(), [1.0, -2.0]);
        assert!(parse_pair("x,1").is_err());
    }
}
