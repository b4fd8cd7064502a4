//! Run configuration: a TOML file whose fields can be overridden from the command line.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Spatial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Half-width `L` of the square `[-L, L]^2`.
    pub half_width: f64,
    /// Points per side `N`.
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half_width: 20.0,
            points: 48,
        }
    }
}

/// Which potential to analyze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Builtin {
    /// `u = 0`.
    Zero,
    /// The one-soliton with parameters `k0`, `mu0`, `nu0`.
    Soliton,
    /// The soliton plus `eps` times the decisive built-in perturbation.
    #[serde(rename = "soliton+bump")]
    SolitonBump,
    /// The soliton plus `eps` times the degenerate built-in perturbation.
    #[serde(rename = "soliton+degenerate")]
    SolitonDegenerate,
    /// Samples read from `file`.
    File,
}

/// Potential descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialConfig {
    /// Built-in name.
    pub builtin: Builtin,
    /// Soliton spectral location.
    pub k0: [f64; 2],
    /// Soliton translation.
    pub mu0: [f64; 2],
    /// Soliton scale.
    pub nu0: [f64; 2],
    /// Perturbation size for the perturbed built-ins.
    pub eps: f64,
    /// CSV of samples `re,im` in grid order, used when `builtin = "file"`.
    pub file: Option<PathBuf>,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self {
            builtin: Builtin::Soliton,
            k0: [0.0, 0.0],
            mu0: [0.0, 0.0],
            nu0: [1.0, 0.0],
            eps: 0.05,
            file: None,
        }
    }
}

/// Spectral grid, centred at `k0 + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KGridConfig {
    /// Offset of the centre from `k0`.
    pub offset: [f64; 2],
    /// Half-width.
    pub half_width: f64,
    /// Nodes per side.
    pub nodes: usize,
}

impl Default for KGridConfig {
    fn default() -> Self {
        Self {
            offset: [0.0, 0.0],
            half_width: 5.0,
            nodes: 21,
        }
    }
}

/// Numerical tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Zero candidates satisfy `|D| < zero_threshold * median |D|`; CGO solves are refused below it.
    pub zero_threshold: f64,
    /// Half-width of the centred differences for `dbar log D`.
    pub dbar_step: f64,
    /// Number of scan nodes at which the `dbar` equation is checked.
    pub dbar_samples: usize,
    /// Whether `detscan` solves for the CGO solution at every node.
    pub scattering: bool,
    /// Eigenvalues of `T(0)` within this distance of 1 are counted.
    pub eigen_radius: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            zero_threshold: 1e-2,
            dbar_step: 0.05,
            dbar_samples: 4,
            scattering: true,
            eigen_radius: 0.05,
        }
    }
}

/// Named perturbation for `perturb`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationName {
    /// Nonzero first-order coefficients.
    Decisive,
    /// Vanishing first-order coefficients.
    Degenerate,
    /// `phi = 0`.
    Zero,
}

/// Stability scan settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Perturbation.
    pub perturbation: PerturbationName,
    /// Perturbation sizes.
    pub eps: Vec<f64>,
    /// Local grid nodes per side.
    pub local_nodes: usize,
    /// Phases per radius for the resolvent bound; zero skips it.
    pub resolvent_phases: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            perturbation: PerturbationName::Decisive,
            eps: vec![0.01, 0.02, 0.05],
            local_nodes: 5,
            resolvent_phases: 4,
        }
    }
}

/// Solver choice for `cgo-solve`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Dense LU.
    Direct,
    /// Matrix-free GMRES.
    Iterative,
}

/// Settings for `cgo-solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgoConfig {
    /// Spectral parameter.
    pub k: [f64; 2],
    /// Solver.
    pub method: Method,
}

impl Default for CgoConfig {
    fn default() -> Self {
        Self {
            k: [1.0, 1.0],
            method: Method::Direct,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Spatial grid.
    pub grid: GridConfig,
    /// Potential.
    pub potential: PotentialConfig,
    /// Spectral grid.
    pub kgrid: KGridConfig,
    /// Tolerances.
    pub tolerances: Tolerances,
    /// Perturbation scan.
    pub perturb: PerturbConfig,
    /// CGO solve.
    pub cgo: CgoConfig,
    /// Directory receiving all outputs.
    pub output_dir: PathBuf,
    /// Worker threads; `DSII_WORKERS` takes precedence.
    pub workers: Option<usize>,
}

/// Converts a `[re, im]` pair.
pub fn complex(v: [f64; 2]) -> Complex64 {
    Complex64::new(v[0], v[1])
}

impl RunConfig {
    /// Reads a TOML file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Rejects values that cannot describe a run.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.grid.half_width > 0.0) || self.grid.points < 2 {
            return bad(format!("grid needs half_width > 0 and points >= 2, got {:?}", self.grid));
        }
        if !(self.kgrid.half_width >= 0.0) || self.kgrid.nodes == 0 {
            return bad(format!("kgrid needs half_width >= 0 and nodes >= 1, got {:?}", self.kgrid));
        }
        if self.potential.builtin == Builtin::File && self.potential.file.is_none() {
            return bad("builtin = \"file\" requires potential.file".into());
        }
        if self.potential.nu0 == [0.0, 0.0] {
            return bad("potential.nu0 must be nonzero".into());
        }
        if !(self.tolerances.zero_threshold > 0.0) || !(self.tolerances.dbar_step > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if self.perturb.eps.iter().any(|e| !(e.abs() <= 0.2)) || self.perturb.local_nodes == 0 {
            return bad(format!("perturb.eps must lie in [-0.2, 0.2] and local_nodes >= 1, got {:?}", self.perturb));
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the numerical settings, as 16 hex digits. The output directory and the
    /// worker count do not change results and are left out.
    pub fn hash(&self) -> String {
        let mut numerical = self.clone();
        numerical.output_dir = PathBuf::new();
        numerical.workers = None;
        let json = serde_json::to_string(&numerical).expect("configuration serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
