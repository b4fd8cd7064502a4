//! The one-soliton potential, its exact CGO solutions, the eigenbasis of `T(0)` and its
//! dual, the reduced `2 x 2` matrix of `T(kappa)` and the radial determinant model `H(t)`.
//!
//! All spectral objects live in the frame `k_0 = 0`, where `u_0 = 2 rho^-2`; the
//! operator `T(kappa)` does not depend on `k_0`.

use std::f64::consts::PI;

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cgo::{SpectralDensity, SpectralOptions};
use crate::error::{Error, Result};
use crate::grid::{pair, plane_wave, relative_l2_error, rho, Domain, GriddedFunction};
use crate::operator::{hermitian_similarity_check, soliton_profile, Assembler};

/// Parameters of `u(z) = 2 conj(nu_0) e_{k_0}(z) / (|z + mu_0|^2 + |nu_0|^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolitonParams {
    /// Spectral location of the exceptional point.
    pub k0: Complex64,
    /// Translation.
    pub mu0: Complex64,
    /// Scale and phase; must be nonzero.
    pub nu0: Complex64,
}

impl Default for SolitonParams {
    fn default() -> Self {
        Self {
            k0: Complex64::new(0.0, 0.0),
            mu0: Complex64::new(0.0, 0.0),
            nu0: Complex64::new(1.0, 0.0),
        }
    }
}

/// Samples of the soliton potential.
pub fn u0_sample(params: &SolitonParams, d: &Domain) -> Result<GriddedFunction> {
    if params.nu0.norm() == 0.0 {
        return Err(Error::InvalidParameter("nu_0 must be nonzero".into()));
    }
    let SolitonParams { k0, mu0, nu0 } = *params;
    Ok(d.sample(|z| 2.0 * nu0.conj() * plane_wave(k0, z) / ((z + mu0).norm_sqr() + nu0.norm_sqr())))
}

/// Closed-form `m_1 = 1 + (i/kappa) conj(z) rho^-2` and `m_2 = (i/kappa) e_{-k_0} rho^-2`.
pub fn exact_m(kappa: Complex64, k0: Complex64, d: &Domain) -> Result<(GriddedFunction, GriddedFunction)> {
    if kappa.norm() == 0.0 {
        return Err(Error::InvalidParameter("exact CGO solutions are singular at kappa = 0".into()));
    }
    let a = Complex64::new(0.0, 1.0) / kappa;
    let m1 = d.sample(|z| 1.0 + a * z.conj() / (1.0 + z.norm_sqr()));
    let m2 = d.sample(|z| a * plane_wave(-k0, z) / (1.0 + z.norm_sqr()));
    Ok((m1, m2))
}

/// `s(k_0 + kappa) = 2i / kappa`.
pub fn exact_s(kappa: Complex64) -> Result<Complex64> {
    if kappa.norm() == 0.0 {
        return Err(Error::InvalidParameter("s is singular at kappa = 0".into()));
    }
    Ok(Complex64::new(0.0, 2.0) / kappa)
}

/// Eigenvectors of `T(0)` for the eigenvalue 1 and their duals under the bilinear pairing.
#[derive(Debug, Clone)]
pub struct Eigenbasis {
    /// `conj(z) rho^-2`.
    pub psi1: GriddedFunction,
    /// `rho^-2`.
    pub psi2: GriddedFunction,
    /// `(2/pi) z rho^-4`.
    pub chi1: GriddedFunction,
    /// `(2/pi) rho^-4`.
    pub chi2: GriddedFunction,
    /// The `L^2`-normalized vector pair `pi^-1/2 rho^-3 (conj z, 1)` and `pi^-1/2 rho^-3 (1, -z)`,
    /// stored as `[first component, second component]`.
    pub normalized: [[GriddedFunction; 2]; 2],
}

/// Samples the eigenbasis and dual basis.
pub fn eigenbasis(d: &Domain) -> Eigenbasis {
    let r2 = |z: Complex64| 1.0 + z.norm_sqr();
    let n = |z: Complex64| 1.0 / (PI.sqrt() * rho(z).powi(3));
    Eigenbasis {
        psi1: d.sample(|z| z.conj() / r2(z)),
        psi2: d.sample_real(|z| 1.0 / r2(z)),
        chi1: d.sample(|z| z * (2.0 / PI) / r2(z).powi(2)),
        chi2: d.sample_real(|z| (2.0 / PI) / r2(z).powi(2)),
        normalized: [
            [d.sample(|z| z.conj() * n(z)), d.sample_real(n)],
            [d.sample_real(n), d.sample(|z| -z * n(z))],
        ],
    }
}

/// `T(kappa) f` without assembling the matrix.
pub fn apply_t(asm: &Assembler, kappa: Complex64, f: &GriddedFunction) -> Result<GriddedFunction> {
    let u = soliton_profile(asm.domain());
    asm.apply_block(kappa, &u, &u, f)
}

/// `M_ij = <chi_i, T(kappa) psi_j>`.
pub fn reduced_matrix(asm: &Assembler, kappa: Complex64) -> Result<[[Complex64; 2]; 2]> {
    let basis = eigenbasis(asm.domain());
    let t1 = apply_t(asm, kappa, &basis.psi1)?;
    let t2 = apply_t(asm, kappa, &basis.psi2)?;
    Ok([
        [pair(&basis.chi1, &t1)?, pair(&basis.chi1, &t2)?],
        [pair(&basis.chi2, &t1)?, pair(&basis.chi2, &t2)?],
    ])
}

/// The leading-order model `[[1, i conj(kappa)], [-i kappa, 1]]`.
pub fn reduced_matrix_model(kappa: Complex64) -> [[Complex64; 2]; 2] {
    let one = Complex64::new(1.0, 0.0);
    let i = Complex64::new(0.0, 1.0);
    [[one, i * kappa.conj()], [-i * kappa, one]]
}

/// Least-squares fit `M_11(kappa) = a + b kappa + c conj(kappa)`.
pub fn fit_m11(asm: &Assembler, kappas: &[Complex64]) -> Result<[Complex64; 3]> {
    let rows: Vec<(Complex64, [Complex64; 3])> = kappas
        .iter()
        .map(|&k| Ok((reduced_matrix(asm, k)?[0][0], [Complex64::new(1.0, 0.0), k, k.conj()])))
        .collect::<Result<_>>()?;
    let a = Mat::from_fn(rows.len(), 3, |i, j| rows[i].1[j]);
    let b = Mat::from_fn(rows.len(), 1, |i, _| rows[i].0);
    let ah = a.adjoint().to_owned();
    let normal = &ah * &a;
    let rhs = &ah * &b;
    let lu = normal.partial_piv_lu();
    let x = faer::linalg::solvers::Solve::solve(&lu, &rhs);
    Ok([x[(0, 0)], x[(1, 0)], x[(2, 0)]])
}

/// Numerical spectral data of `T(0)`.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    /// Grid half-width.
    pub half_width: f64,
    /// Grid points per side.
    pub points_per_side: usize,
    /// Eigenvalues within `radius` of 1, in decreasing order.
    pub eigenvalues_near_one: Vec<f64>,
    /// Radius used to select them.
    pub radius: f64,
    /// Distance from 1 of the nearest eigenvalue outside the selection.
    pub gap: f64,
    /// Largest eigenvalues, in decreasing order.
    pub leading_eigenvalues: Vec<f64>,
    /// Relative asymmetry of `rho^-1 T(0) rho`.
    pub hermitian_defect: f64,
    /// `||T(0) psi_j - psi_j|| / ||psi_j||` on `|z| <= L/2`.
    pub residuals: [f64; 2],
    /// `||T(0)' chi_j - chi_j|| / ||chi_j||` on `|z| <= L/2`.
    pub dual_residuals: [f64; 2],
    /// `<chi_i, psi_j>`.
    pub biorthogonality: [[Complex64; 2]; 2],
    /// Condition number of the biorthogonality matrix.
    pub gram_condition: f64,
    /// Reduced matrices at sampled `kappa`.
    pub reduced: Vec<(Complex64, [[Complex64; 2]; 2])>,
}

/// Computes the spectral report of `T(0)` and reduced matrices at `kappas`.
pub fn spectral_report(asm: &Assembler, radius: f64, kappas: &[Complex64]) -> Result<SpectralReport> {
    let d = *asm.domain();
    let t0 = asm.assemble_t(Complex64::new(0.0, 0.0))?;
    let herm = hermitian_similarity_check(&t0)?;
    let eigs = &herm.eigenvalues;
    let near: Vec<f64> = eigs.iter().copied().filter(|l| (l - 1.0).abs() < radius).collect();
    let gap = eigs
        .iter()
        .filter(|l| (*l - 1.0).abs() >= radius)
        .map(|l| (l - 1.0).abs())
        .fold(f64::INFINITY, f64::min);
    let basis = eigenbasis(&d);
    let mask = d.disc_mask(d.half_width() / 2.0);
    let residual = |f: &GriddedFunction| -> Result<f64> { relative_l2_error(&t0.apply(f)?, f, &mask) };
    let dual_residual = |f: &GriddedFunction| -> Result<f64> { relative_l2_error(&t0.apply_transpose(f)?, f, &mask) };
    let bio = [
        [pair(&basis.chi1, &basis.psi1)?, pair(&basis.chi1, &basis.psi2)?],
        [pair(&basis.chi2, &basis.psi1)?, pair(&basis.chi2, &basis.psi2)?],
    ];
    let reduced = kappas
        .iter()
        .map(|&k| Ok((k, reduced_matrix(asm, k)?)))
        .collect::<Result<_>>()?;
    Ok(SpectralReport {
        half_width: d.half_width(),
        points_per_side: d.points_per_side(),
        eigenvalues_near_one: near,
        radius,
        gap,
        leading_eigenvalues: eigs.iter().take(6).copied().collect(),
        hermitian_defect: herm.relative_asymmetry,
        residuals: [residual(&basis.psi1)?, residual(&basis.psi2)?],
        dual_residuals: [dual_residual(&basis.chi1)?, dual_residual(&basis.chi2)?],
        biorthogonality: bio,
        gram_condition: condition_2x2(&bio),
        reduced,
    })
}

/// Spectral condition number of a `2 x 2` matrix.
pub fn condition_2x2(m: &[[Complex64; 2]; 2]) -> f64 {
    let a = Mat::from_fn(2, 2, |i, j| m[i][j]);
    match a.singular_values() {
        Ok(s) => {
            let max = s.iter().copied().fold(0.0, f64::max);
            let min = s.iter().copied().fold(f64::INFINITY, f64::min);
            max / min
        }
        Err(_) => f64::INFINITY,
    }
}

/// Samples of the radial determinant model.
#[derive(Debug, Clone, Serialize)]
pub struct RadialDetModel {
    /// Logarithmically spaced `t` in increasing order.
    pub t: Vec<f64>,
    /// `h(t) = gamma(sqrt t) / sqrt t`.
    pub h: Vec<f64>,
    /// `H(t)`.
    pub big_h: Vec<f64>,
    /// `c = exp(int_0^1 h - int_1^inf (1/t - h))`.
    pub c: f64,
}

impl RadialDetModel {
    /// Linear interpolation of `log H` in `log t`.
    pub fn h_at(&self, t: f64) -> f64 {
        let lt = t.ln();
        let idx = self.t.partition_point(|&x| x.ln() < lt).clamp(1, self.t.len() - 1);
        let (t0, t1) = (self.t[idx - 1].ln(), self.t[idx].ln());
        let (h0, h1) = (self.big_h[idx - 1].ln(), self.big_h[idx].ln());
        let w = (lt - t0) / (t1 - t0);
        (h0 + w * (h1 - h0)).exp()
    }

    /// Writes `t,h,H` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W, config_hash: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["t", "h", "H", "config_hash"]).map_err(|e| Error::Io(e.to_string()))?;
        for ((t, h), big) in self.t.iter().zip(&self.h).zip(&self.big_h) {
            w.write_record([format!("{t:e}"), format!("{h:e}"), format!("{big:e}"), config_hash.to_string()])
                .map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integrates `d/dt log H = 1/t - h(t)` backward from `H(t_max) = 1`.
///
/// `h` comes from the spectral route for `c(kappa)` on the sampled soliton. The trapezoid
/// rule is applied in the variable `log t`, where the integrand is `1 - t h(t)`.
pub fn radial_det_model(d: &Domain, t_min: f64, t_max: f64, n_t: usize) -> Result<RadialDetModel> {
    if !(t_min > 0.0 && t_max > 1.0 && t_min < 1.0 && n_t >= 8) {
        return Err(Error::InvalidParameter(format!(
            "radial model needs 0 < t_min < 1 < t_max and at least 8 nodes, got ({t_min}, {t_max}, {n_t})"
        )));
    }
    let density = SpectralDensity::new(&soliton_profile(d), SpectralOptions::default())?;
    let (l0, l1) = (t_min.ln(), t_max.ln());
    let mut t: Vec<f64> = (0..n_t).map(|i| (l0 + (l1 - l0) * i as f64 / (n_t - 1) as f64).exp()).collect();
    // Put t = 1 on the grid so the two integrals in c split exactly there.
    let one = t.iter().enumerate().min_by(|a, b| (a.1.ln().abs()).total_cmp(&b.1.ln().abs())).map(|x| x.0).unwrap();
    t[one] = 1.0;
    let h: Vec<f64> = t
        .iter()
        .map(|&tt| {
            let kappa = tt.sqrt();
            let gamma = density.c_at(Complex64::new(kappa, 0.0));
            gamma.re / kappa
        })
        .collect();
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Quadrature("non-finite h(t)".into()));
    }
    let f: Vec<f64> = t.iter().zip(&h).map(|(tt, hh)| 1.0 - tt * hh).collect();
    let mut log_h = vec![0.0; n_t];
    for i in (0..n_t - 1).rev() {
        let dl = t[i + 1].ln() - t[i].ln();
        log_h[i] = log_h[i + 1] - 0.5 * dl * (f[i] + f[i + 1]);
    }
    let big_h: Vec<f64> = log_h.iter().map(|v| v.exp()).collect();
    if big_h.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Quadrature("H(t) is not positive".into()));
    }
    // int_0^1 h dt = h(t_min) t_min + int_{t_min}^1 t h d(log t); int_1^tmax (1/t - h) dt = int f d(log t).
    let trap = |lo: usize, hi: usize, g: &dyn Fn(usize) -> f64| -> f64 {
        (lo..hi).map(|i| 0.5 * (t[i + 1].ln() - t[i].ln()) * (g(i) + g(i + 1))).sum()
    };
    let inner = h[0] * t[0] + trap(0, one, &|i| t[i] * h[i]);
    let outer = trap(one, n_t - 1, &|i| f[i]);
    Ok(RadialDetModel {
        t,
        h,
        big_h,
        c: (inner - outer).exp(),
    })
}
