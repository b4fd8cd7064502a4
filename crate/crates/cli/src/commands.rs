//! The four subcommands. Each returns a [`ResultBundle`] and writes its files into the
//! configured output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dsii_core::cgo::{dbar_residual, scattering_data, solve_m, CgoSolution, ScatteringDatum, SolveMethod, SolveOptions, SpectralDensity, SpectralOptions};
use dsii_core::determinant::{det_at, find_zeros, renormalized_det, KGrid, ScanRecord, ScatteringScan, ZeroSearch};
use dsii_core::grid::{make_domain, plane_wave, Domain, GriddedFunction};
use dsii_core::operator::Assembler;
use dsii_core::perturbation::{builtin_perturbation, stability_scan, BuiltinPerturbation, PerturbationReport, StabilityOptions};
use dsii_core::soliton::{radial_det_model, spectral_report, u0_sample, RadialDetModel, SolitonParams, SpectralReport};
use dsii_core::Error;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{complex, Builtin, Method, PerturbationName, RunConfig};
use crate::error::CliError;

/// Wall-clock time of one phase.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    /// Phase name.
    pub phase: String,
    /// Seconds.
    pub seconds: f64,
}

/// Everything a command produced, echoed with its configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ResultBundle<T> {
    /// Subcommand name.
    pub command: String,
    /// Hash of the numerical configuration; also written into every output row.
    pub config_hash: String,
    /// Configuration used.
    pub config: RunConfig,
    /// Command-specific results.
    pub outputs: T,
    /// Files written.
    pub files: Vec<PathBuf>,
    /// Per-phase timings.
    pub timings: Vec<Timing>,
    /// One-line summary also printed to standard output.
    pub summary: String,
}

struct Clock {
    start: Instant,
    timings: Vec<Timing>,
}

impl Clock {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            timings: Vec::new(),
        }
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.timings.push(Timing {
            phase: phase.to_string(),
            seconds: (now - self.start).as_secs_f64(),
        });
        self.start = now;
    }
}

fn params(cfg: &RunConfig) -> SolitonParams {
    SolitonParams {
        k0: complex(cfg.potential.k0),
        mu0: complex(cfg.potential.mu0),
        nu0: complex(cfg.potential.nu0),
    }
}

fn domain(cfg: &RunConfig) -> Result<Domain, CliError> {
    make_domain(cfg.grid.half_width, cfg.grid.points).map_err(|e| CliError::Config(e.to_string()))
}

fn builtin_kind(name: PerturbationName) -> BuiltinPerturbation {
    match name {
        PerturbationName::Decisive => BuiltinPerturbation::Decisive,
        PerturbationName::Degenerate => BuiltinPerturbation::Degenerate,
        PerturbationName::Zero => BuiltinPerturbation::Zero,
    }
}

fn read_samples(path: &Path, d: &Domain) -> Result<GriddedFunction, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let values: Vec<Complex64> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let mut it = line.split(',').map(|s| s.trim().parse::<f64>());
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(re)), Some(Ok(im)), None) => Ok(Complex64::new(re, im)),
                (Some(Ok(re)), None, None) => Ok(Complex64::new(re, 0.0)),
                _ => Err(CliError::Config(format!("{}: cannot parse sample line {line:?}", path.display()))),
            }
        })
        .collect::<Result<_, _>>()?;
    if values.len() != d.len() {
        return Err(CliError::Config(format!(
            "{}: expected {} samples for a {}x{} grid, found {}",
            path.display(),
            d.len(),
            d.points_per_side(),
            d.points_per_side(),
            values.len()
        )));
    }
    GriddedFunction::new(*d, values).map_err(|e| CliError::Config(e.to_string()))
}

/// The potential described by the configuration, with a short label.
pub fn build_potential(cfg: &RunConfig, d: &Domain) -> Result<(GriddedFunction, String), CliError> {
    let p = params(cfg);
    let soliton = || u0_sample(&p, d).map_err(|e| CliError::Config(e.to_string()));
    let eps = cfg.potential.eps;
    let perturbed = |kind| -> Result<GriddedFunction, CliError> {
        let phi = builtin_perturbation(kind, d)?.map_with_node(|z, v| v * plane_wave(p.k0, z));
        Ok(&soliton()? + &(&phi * Complex64::new(eps, 0.0)))
    };
    Ok(match cfg.potential.builtin {
        Builtin::Zero => (d.zeros(), "zero".into()),
        Builtin::Soliton => (soliton()?, "soliton".into()),
        Builtin::SolitonBump => (perturbed(BuiltinPerturbation::Decisive)?, format!("soliton+bump eps={eps}")),
        Builtin::SolitonDegenerate => (perturbed(BuiltinPerturbation::Degenerate)?, format!("soliton+degenerate eps={eps}")),
        Builtin::File => {
            let path = cfg.potential.file.as_ref().ok_or_else(|| CliError::Config("missing potential.file".into()))?;
            (read_samples(path, d)?, format!("file {}", path.display()))
        }
    })
}

fn create(dir: &Path, name: &str, files: &mut Vec<PathBuf>) -> Result<BufWriter<File>, CliError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    files.push(path);
    Ok(BufWriter::new(f))
}

fn finish<T: Serialize>(
    command: &str,
    cfg: &RunConfig,
    outputs: T,
    mut files: Vec<PathBuf>,
    mut clock: Clock,
    summary: String,
) -> Result<ResultBundle<T>, CliError> {
    clock.lap("write");
    let name = format!("{}.json", command.replace('-', "_"));
    let path = cfg.output_dir.join(&name);
    files.push(path.clone());
    let bundle = ResultBundle {
        command: command.to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        outputs,
        files,
        timings: clock.timings,
        summary,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?);
    serde_json::to_writer_pretty(&mut w, &bundle)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(bundle)
}

fn solve_options(cfg: &RunConfig) -> SolveOptions {
    SolveOptions {
        zero_threshold: cfg.tolerances.zero_threshold,
        method: match cfg.cgo.method {
            Method::Direct => SolveMethod::Direct,
            Method::Iterative => SolveMethod::Iterative,
        },
        ..SolveOptions::default()
    }
}

fn zero_search(cfg: &RunConfig) -> ZeroSearch {
    ZeroSearch {
        threshold: cfg.tolerances.zero_threshold,
        ..ZeroSearch::default()
    }
}

/// Determinant scan, zeros, scattering data and `dbar` checks over the configured k-grid.
pub fn cmd_detscan(cfg: &RunConfig) -> Result<ResultBundle<ScatteringScan>, CliError> {
    let mut clock = Clock::new();
    let d = domain(cfg)?;
    let (u, label) = build_potential(cfg, &d)?;
    let asm = Assembler::new(&d);
    let center = complex(cfg.potential.k0) + complex(cfg.kgrid.offset);
    let grid = KGrid::new(center, cfg.kgrid.half_width, cfg.kgrid.nodes).map_err(|e| CliError::Config(e.to_string()))?;
    let opts = SolveOptions {
        method: SolveMethod::Direct,
        ..solve_options(cfg)
    };
    let density = if cfg.tolerances.scattering {
        Some(SpectralDensity::new(&u, SpectralOptions::default())?)
    } else {
        None
    };
    clock.lap("setup");
    let nodes: Vec<Complex64> = grid.nodes().collect();
    let records: Vec<ScanRecord> = nodes
        .into_par_iter()
        .map(|k| scan_node(&asm, &u, k, &opts, density.as_ref()))
        .collect();
    let mut scan = ScatteringScan {
        domain: d,
        grid,
        potential: label,
        records,
        zeros: Vec::new(),
    };
    clock.lap("scan");
    scan.zeros = find_zeros(&scan, &zero_search(cfg), |k| det_at(&asm, k, &u).map(|v| v.value))?;
    clock.lap("zeros");
    let samples = dbar_nodes(&scan, cfg.tolerances.dbar_samples, cfg.tolerances.zero_threshold);
    let checks: Vec<(usize, Option<f64>)> = samples
        .into_par_iter()
        .map(|i| {
            let k = scan.records[i].k;
            (i, dbar_residual(&asm, &u, k, cfg.tolerances.dbar_step, &opts).ok().map(|c| c.residual))
        })
        .collect();
    for (i, r) in checks {
        scan.records[i].dbar_residual = r;
    }
    clock.lap("dbar");
    let mut files = Vec::new();
    let hash = cfg.hash();
    scan.write_csv(create(&cfg.output_dir, "detscan.csv", &mut files)?, &hash)?;
    let summary = match scan.zeros.as_slice() {
        [] => format!("zeros: 0 (min |D| = {:.3e})", scan.min_abs_det().map_or(f64::NAN, |m| m.1)),
        zs => format!(
            "zeros: {} [{}]",
            zs.len(),
            zs.iter()
                .map(|z| format!("{:.4}{:+.4}i order {:.2}", z.k.re, z.k.im, z.fitted_order))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    finish("detscan", cfg, scan, files, clock, summary)
}

fn scan_node(asm: &Assembler, u: &GriddedFunction, k: Complex64, opts: &SolveOptions, density: Option<&SpectralDensity>) -> ScanRecord {
    let Some(density) = density else {
        return ScanRecord::with_det(k, det_at(asm, k, u));
    };
    match solve_m(asm, k, u, opts).and_then(|sol| Ok((sol.det, scattering_data(u, &sol)?))) {
        Ok((Some(det), datum)) => ScanRecord {
            s: Some(datum.s),
            r: Some(datum.r),
            c: Some(density.c_at(k)),
            ..ScanRecord::with_det(k, Ok(det))
        },
        Ok((None, _)) | Err(Error::NearlySingular { .. }) => ScanRecord::with_det(k, det_at(asm, k, u)),
        Err(e) => ScanRecord::with_det(k, Err(e)),
    }
}

/// Evenly spaced scan nodes whose determinant is comfortably away from zero.
fn dbar_nodes(scan: &ScatteringScan, count: usize, threshold: f64) -> Vec<usize> {
    let median = scan.median_abs_det();
    let usable: Vec<usize> = (0..scan.records.len())
        .filter(|&i| {
            let r = &scan.records[i];
            r.s.is_some()
                && r.abs_det() > 10.0 * threshold * median
                && scan.zeros.iter().all(|z| (z.k - r.k).norm() > 2.0 * scan.grid.spacing())
        })
        .collect();
    if count == 0 || usable.is_empty() {
        return Vec::new();
    }
    let step = (usable.len() as f64 / count as f64).max(1.0);
    (0..count.min(usable.len())).map(|j| usable[(j as f64 * step) as usize]).collect()
}

/// One row of the determinant versus radial model comparison.
#[derive(Debug, Clone, Serialize)]
pub struct CrossValidation {
    /// `|kappa|`.
    pub kappa: f64,
    /// `|D(k_0 + kappa)|`.
    pub abs_det: f64,
    /// `H(|kappa|^2)`.
    pub model: f64,
    /// `abs_det / model`.
    pub ratio: f64,
}

/// Outputs of `soliton-verify`.
#[derive(Debug, Clone, Serialize)]
pub struct SolitonVerification {
    /// Number of eigenvalues of `T(0)` near 1.
    pub multiplicity: usize,
    /// Spectral data of `T(0)` and reduced matrices.
    pub spectral: SpectralReport,
    /// The radial determinant model.
    pub radial: RadialDetModel,
    /// Determinant against model.
    pub cross_validation: Vec<CrossValidation>,
}

/// Spectral structure of `T(0)`, reduced matrices, radial model and cross-validation.
pub fn cmd_soliton_verify(cfg: &RunConfig) -> Result<ResultBundle<SolitonVerification>, CliError> {
    let mut clock = Clock::new();
    if cfg.potential.mu0 != [0.0, 0.0] || cfg.potential.nu0 != [1.0, 0.0] {
        return Err(CliError::Config("soliton-verify applies to the soliton with mu0 = 0 and nu0 = 1".into()));
    }
    let d = domain(cfg)?;
    let asm = Assembler::new(&d);
    let kappas: Vec<Complex64> = [(0.0, 0.0), (0.02, 0.0), (0.0, 0.05), (0.1, 0.0), (0.0, 0.1), (0.07, 0.07)]
        .iter()
        .map(|&(a, b)| Complex64::new(a, b))
        .collect();
    let spectral = spectral_report(&asm, cfg.tolerances.eigen_radius, &kappas)?;
    clock.lap("spectrum");
    let radial = radial_det_model(&d, 1e-4, 100.0, 241)?;
    clock.lap("radial");
    let cross_validation: Vec<CrossValidation> = [0.5, 1.0, 2.0, 3.0, 5.0]
        .into_par_iter()
        .map(|kappa: f64| {
            let det = renormalized_det(&asm.assemble_t(Complex64::new(kappa, 0.0))?)?.abs();
            let model = radial.h_at(kappa * kappa);
            Ok(CrossValidation {
                kappa,
                abs_det: det,
                model,
                ratio: det / model,
            })
        })
        .collect::<Result<_, Error>>()?;
    clock.lap("cross-validation");
    let hash = cfg.hash();
    let mut files = Vec::new();
    radial.write_csv(create(&cfg.output_dir, "radial_model.csv", &mut files)?, &hash)?;
    let mut w = create(&cfg.output_dir, "cross_validation.csv", &mut files)?;
    writeln!(w, "kappa,abs_D,H,ratio,config_hash")?;
    for row in &cross_validation {
        writeln!(w, "{:e},{:e},{:e},{:e},{hash}", row.kappa, row.abs_det, row.model, row.ratio)?;
    }
    w.flush()?;
    let multiplicity = spectral.eigenvalues_near_one.len();
    let summary = format!("multiplicity: {multiplicity}");
    let out = SolitonVerification {
        multiplicity,
        spectral,
        radial,
        cross_validation,
    };
    finish("soliton-verify", cfg, out, files, clock, summary)
}

/// Stability scan of `u_0 + eps phi` for a built-in `phi`.
pub fn cmd_perturb(cfg: &RunConfig) -> Result<ResultBundle<PerturbationReport>, CliError> {
    let mut clock = Clock::new();
    if cfg.potential.mu0 != [0.0, 0.0] || cfg.potential.nu0 != [1.0, 0.0] {
        return Err(CliError::Config("perturb applies to the soliton with mu0 = 0 and nu0 = 1".into()));
    }
    let d = domain(cfg)?;
    let asm = Assembler::new(&d);
    let phi = builtin_perturbation(builtin_kind(cfg.perturb.perturbation), &d)?;
    let k0 = complex(cfg.potential.k0);
    let grid = KGrid::new(k0 + complex(cfg.kgrid.offset), cfg.kgrid.half_width, cfg.kgrid.nodes)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let options = StabilityOptions {
        search: zero_search(cfg),
        local_nodes: cfg.perturb.local_nodes,
        resolvent_phases: cfg.perturb.resolvent_phases,
        ..StabilityOptions::default()
    };
    let report = stability_scan(&asm, &phi, k0, &cfg.perturb.eps, &grid, &options)?;
    clock.lap("scan");
    let mut files = Vec::new();
    report.write_csv(create(&cfg.output_dir, "perturb.csv", &mut files)?, &cfg.hash())?;
    let summary = format!("verdict: {}", report.verdict);
    finish("perturb", cfg, report, files, clock, summary)
}

/// Outputs of `cgo-solve`.
#[derive(Debug, Clone, Serialize)]
pub struct CgoOutput {
    /// Scattering data.
    pub datum: ScatteringDatum,
    /// Residual of the solve.
    pub residual: f64,
    /// GMRES iterations, if iterative.
    pub iterations: Option<usize>,
    /// `|D(k)|`, if computed.
    pub abs_det: Option<f64>,
    /// `max |m_1 - 1|` on the outer frame.
    pub boundary_deviation: f64,
}

/// Solves for the CGO solution at one spectral parameter.
pub fn cmd_cgo_solve(cfg: &RunConfig) -> Result<ResultBundle<CgoOutput>, CliError> {
    let mut clock = Clock::new();
    let d = domain(cfg)?;
    let (u, _) = build_potential(cfg, &d)?;
    let asm = Assembler::new(&d);
    let k = complex(cfg.cgo.k);
    let sol: CgoSolution = solve_m(&asm, k, &u, &solve_options(cfg))?;
    let datum = scattering_data(&u, &sol)?;
    clock.lap("solve");
    let hash = cfg.hash();
    let mut files = Vec::new();
    let mut w = create(&cfg.output_dir, "cgo.csv", &mut files)?;
    writeln!(w, "re_z,im_z,re_m1,im_m1,re_m2,im_m2,config_hash")?;
    for ((z, m1), m2) in d.nodes().zip(sol.m1.values()).zip(sol.m2.values()) {
        writeln!(w, "{:e},{:e},{:e},{:e},{:e},{:e},{hash}", z.re, z.im, m1.re, m1.im, m2.re, m2.im)?;
    }
    w.flush()?;
    let summary = format!("s = {:.6e}{:+.6e}i, r = {:.6e}{:+.6e}i", datum.s.re, datum.s.im, datum.r.re, datum.r.im);
    let out = CgoOutput {
        datum,
        residual: sol.residual,
        iterations: sol.iterations,
        abs_det: sol.det.map(|v| v.abs()),
        boundary_deviation: sol.boundary_deviation(),
    };
    finish("cgo-solve", cfg, out, files, clock, summary)
}
