//! Perturbations of the one-soliton: Riesz projections, the Sz.-Nagy similarity, the
//! first-order coefficients `alpha` and `beta`, the `2 x 2` splitting determinant, the
//! multiplicity check and the stability verdict for `u_0 + eps phi`.
//!
//! Perturbations passed to the operator routines are expressed in the frame `k_0 = 0`,
//! that is, as `e_{-k_0}` times the perturbation of the potential.

use std::f64::consts::PI;

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::determinant::{det_at, find_zeros, renormalized_det_matrix, DetValue, DetZero, FactoredResolvent, KGrid, ZeroSearch};
use crate::error::{Error, Result};
use crate::grid::{pair, plane_wave, Domain, GriddedFunction};
use crate::operator::{check_compact_support, soliton_profile, spectral_norm, Assembler};
use crate::soliton::{apply_t, eigenbasis, SolitonParams};

type Matrix2 = [[Complex64; 2]; 2];

fn identity(n: usize) -> Mat<Complex64> {
    Mat::from_fn(n, n, |i, j| if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) })
}

fn check_square(a: &Mat<Complex64>) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidParameter(format!("expected a square matrix, got {}x{}", a.nrows(), a.ncols())));
    }
    Ok(a.nrows())
}

/// Eigenvalues of a general complex matrix.
pub fn eigenvalues(a: &Mat<Complex64>) -> Result<Vec<Complex64>> {
    check_square(a)?;
    a.eigenvalues().map_err(|e| Error::LinearAlgebra(format!("{e:?}")))
}

/// Contour parameters for a Riesz projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Contour {
    /// Center of the circle.
    pub center: Complex64,
    /// Radius of the circle.
    pub radius: f64,
    /// Number of trapezoid nodes.
    pub nodes: usize,
    /// Eigenvalues closer than this to the circle are rejected.
    pub band: f64,
}

impl Default for Contour {
    fn default() -> Self {
        Self {
            center: Complex64::new(1.0, 0.0),
            radius: 0.5,
            nodes: 32,
            band: 0.05,
        }
    }
}

/// `-(1 / 2 pi i) oint (A - lambda)^-1 d lambda` by the trapezoid rule on a circle.
pub fn riesz_projection(a: &Mat<Complex64>, contour: &Contour) -> Result<Mat<Complex64>> {
    let n = check_square(a)?;
    if !(contour.radius > 0.0 && contour.nodes >= 4) {
        return Err(Error::InvalidParameter("contour needs a positive radius and at least 4 nodes".into()));
    }
    if let Some(&eigenvalue) = eigenvalues(a)?
        .iter()
        .find(|l| ((*l - contour.center).norm() - contour.radius).abs() < contour.band)
    {
        return Err(Error::EigenvalueOnContour {
            eigenvalue,
            center: contour.center,
            radius: contour.radius,
            band: contour.band,
        });
    }
    let m = contour.nodes;
    let parts: Vec<Mat<Complex64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let w = Complex64::from_polar(1.0, 2.0 * PI * j as f64 / m as f64);
            let lambda = contour.center + w * contour.radius;
            let shifted = Mat::from_fn(n, n, |r, c| if r == c { a[(r, c)] - lambda } else { a[(r, c)] });
            let inv = shifted.partial_piv_lu().inverse();
            inv * faer::Scale(w * (-contour.radius / m as f64))
        })
        .collect();
    let mut p = Mat::<Complex64>::zeros(n, n);
    for part in parts {
        p += part;
    }
    Ok(p)
}

/// Riesz projections of a perturbed and an unperturbed operator.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    /// Projection for the perturbed operator.
    pub p: Mat<Complex64>,
    /// Projection for the unperturbed operator.
    pub p0: Mat<Complex64>,
    /// Contour used for both.
    pub contour: Contour,
    /// `||P - P_0||`.
    pub gap: f64,
}

impl ProjectionPair {
    /// Projects `a` and `a0` with the same contour.
    pub fn new(a: &Mat<Complex64>, a0: &Mat<Complex64>, contour: &Contour) -> Result<Self> {
        let p = riesz_projection(a, contour)?;
        let p0 = riesz_projection(a0, contour)?;
        let gap = spectral_norm(&(&p - &p0))?;
        Ok(Self {
            p,
            p0,
            contour: *contour,
            gap,
        })
    }

    /// `||P^2 - P||`, the larger of the two projections' defects.
    pub fn idempotency_defect(&self) -> Result<f64> {
        let d = |p: &Mat<Complex64>| spectral_norm(&(p * p - p));
        Ok(d(&self.p)?.max(d(&self.p0)?))
    }

    /// Numerical ranks, rounded traces of the projections.
    pub fn ranks(&self) -> (f64, f64) {
        let tr = |p: &Mat<Complex64>| (0..p.nrows()).map(|i| p[(i, i)]).sum::<Complex64>().re;
        (tr(&self.p), tr(&self.p0))
    }
}

/// `V = (I - (P - P_0)^2)^{-1/2} [P P_0 + (I - P)(I - P_0)]`, which satisfies `P V = V P_0`.
///
/// The inverse square root is summed as a binomial series until the increment drops below
/// `1e-12` in Frobenius norm.
pub fn sznagy_similarity(p: &Mat<Complex64>, p0: &Mat<Complex64>) -> Result<Mat<Complex64>> {
    let n = check_square(p)?;
    if p0.nrows() != n || p0.ncols() != n {
        return Err(Error::InvalidParameter("projections have different sizes".into()));
    }
    let diff = p - p0;
    let gap = spectral_norm(&diff)?;
    if !(gap < 0.5) {
        return Err(Error::GapTooLarge { gap });
    }
    let x = &diff * &diff;
    let id = identity(n);
    let mut sum = id.clone();
    let mut power = id.clone();
    let mut coeff = 1.0;
    let mut converged = false;
    for k in 1..=400 {
        coeff *= (2 * k - 1) as f64 / (2 * k) as f64;
        power = &power * &x;
        let term = &power * faer::Scale(Complex64::new(coeff, 0.0));
        sum += &term;
        if term.norm_l2() < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations: 400,
            residual: gap,
        });
    }
    let q = &id - p;
    let q0 = &id - p0;
    Ok(&sum * &(p * p0 + &q * &q0))
}

/// Which plane-wave factor turns the perturbation into the function `chi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChiConvention {
    /// `chi = e_{k_0} phi`, as written in the splitting theorem.
    PlusK0,
    /// `chi = e_{-k_0} phi`, the function that enters `T(kappa, eps)` in the frame `k_0 = 0`.
    MinusK0,
}

/// First-order perturbation coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationCoefficients {
    /// Convention used to form `chi`.
    pub convention: ChiConvention,
    /// `-(2/pi) int (chi - conj(chi) |z|^2) rho^-4`.
    pub alpha: Complex64,
    /// `(2/pi) int (chi - conj(chi)) z rho^-4`.
    pub beta: Complex64,
    /// `int (chi - |z|^2 conj(chi)) rho^-4`.
    pub nondegeneracy: Complex64,
    /// `int chi rho^-2`.
    pub orthogonality: Complex64,
    /// `(1/pi) int (chi + |z|^2 conj(chi)) rho^-4`, the diagonal entry of the `eps`-linear block
    /// of `<chi_i, T(0, eps) psi_j>` for `u = u_0 + eps phi`.
    pub block_alpha: Complex64,
    /// `-(1/pi) int (chi - conj(chi)) z rho^-4`, the off-diagonal entry of the same block.
    pub block_beta: Complex64,
}

impl PerturbationCoefficients {
    /// `|i conj(kappa) + eps beta|^2 + eps^2 |alpha|^2`.
    pub fn asymptotic(&self, kappa: Complex64, eps: f64) -> f64 {
        let i = Complex64::new(0.0, 1.0);
        (i * kappa.conj() + self.beta * eps).norm_sqr() + eps * eps * self.alpha.norm_sqr()
    }

    /// `|2i conj(kappa) + eps beta_T|^2 + eps^2 |alpha_T|^2` with the block coefficients.
    pub fn block_asymptotic(&self, kappa: Complex64, eps: f64) -> f64 {
        let i = Complex64::new(0.0, 2.0);
        (i * kappa.conj() + self.block_beta * eps).norm_sqr() + eps * eps * self.block_alpha.norm_sqr()
    }

    /// Whether both block coefficients vanish relative to `scale`.
    pub fn is_degenerate(&self, scale: f64) -> bool {
        self.block_alpha.norm() + self.block_beta.norm() <= 1e-8 * scale.max(f64::MIN_POSITIVE)
    }
}

/// Computes `alpha`, `beta` and the related integrals for a perturbation `phi` of the
/// normalized soliton with spectral location `params.k0`.
pub fn alpha_beta(phi: &GriddedFunction, params: &SolitonParams, convention: ChiConvention) -> Result<PerturbationCoefficients> {
    check_compact_support(phi)?;
    if params.mu0.norm() != 0.0 || (params.nu0 - 1.0).norm() != 0.0 {
        return Err(Error::InvalidParameter("perturbation coefficients are defined for mu_0 = 0, nu_0 = 1".into()));
    }
    let d = phi.domain();
    let sign = match convention {
        ChiConvention::PlusK0 => 1.0,
        ChiConvention::MinusK0 => -1.0,
    };
    let chi = phi.map_with_node(|z, v| v * plane_wave(params.k0 * sign, z));
    let w = d.weight();
    let sum = |f: &dyn Fn(Complex64, Complex64) -> Complex64| -> Complex64 {
        (0..d.len()).map(|i| f(d.node(i), chi.values()[i])).sum::<Complex64>() * w
    };
    let r4 = |z: Complex64| (1.0 + z.norm_sqr()).powi(-2);
    let plus = sum(&|z, x| (x + z.norm_sqr() * x.conj()) * r4(z));
    let minus = sum(&|z, x| (x - z.norm_sqr() * x.conj()) * r4(z));
    let odd = sum(&|z, x| (x - x.conj()) * z * r4(z));
    Ok(PerturbationCoefficients {
        convention,
        alpha: minus * (-2.0 / PI),
        beta: odd * (2.0 / PI),
        nondegeneracy: minus,
        orthogonality: sum(&|z, x| x / (1.0 + z.norm_sqr())),
        block_alpha: plus / PI,
        block_beta: -odd / PI,
    })
}

/// `<chi_i, B psi_j>` for the `eps`-linear part `B` of `T(0, eps)`.
pub fn linear_block(asm: &Assembler, phi: &GriddedFunction) -> Result<Matrix2> {
    let d = asm.domain();
    let u0 = soliton_profile(d);
    let zero = Complex64::new(0.0, 0.0);
    let b = eigenbasis(d);
    let apply = |f: &GriddedFunction| -> Result<GriddedFunction> {
        Ok(&asm.apply_block(zero, &u0, phi, f)? + &asm.apply_block(zero, phi, &u0, f)?)
    };
    let (t1, t2) = (apply(&b.psi1)?, apply(&b.psi2)?);
    Ok([
        [pair(&b.chi1, &t1)?, pair(&b.chi1, &t2)?],
        [pair(&b.chi2, &t1)?, pair(&b.chi2, &t2)?],
    ])
}

/// Relative defect of the structure `[[a, b], [-conj b, conj a]]`.
pub fn quaternion_defect(m: &Matrix2) -> f64 {
    let scale = m.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let diag = (m[1][1] - m[0][0].conj()).norm();
    let off = (m[1][0] + m[0][1].conj()).norm();
    diag.max(off) / scale
}

/// One evaluation of the splitting determinant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplittingValue {
    /// Offset from `k_0`.
    pub kappa: Complex64,
    /// Perturbation size.
    pub eps: f64,
    /// `det <chi_i, (T(kappa, eps) - T(0, 0)) psi_j>`.
    pub reduced_det: Complex64,
    /// `|i conj(kappa) + eps beta|^2 + eps^2 |alpha|^2`.
    pub asymptotic: f64,
    /// The same form built from the block coefficients.
    pub block_asymptotic: f64,
    /// `D(k_0 + kappa, u_0 + eps phi)` when requested.
    pub full_det: Option<DetValue>,
}

/// `T(kappa, eps) f` without assembling the matrix.
pub fn apply_t_perturbed(asm: &Assembler, kappa: Complex64, eps: f64, phi: &GriddedFunction, f: &GriddedFunction) -> Result<GriddedFunction> {
    let u = perturbed_potential(asm.domain(), eps, phi);
    asm.apply_block(kappa, &u, &u, f)
}

/// `u_0 + eps phi` in the frame `k_0 = 0`.
pub fn perturbed_potential(d: &Domain, eps: f64, phi: &GriddedFunction) -> GriddedFunction {
    &soliton_profile(d) + &(phi * Complex64::new(eps, 0.0))
}

/// The reduced matrix `<chi_i, (T(kappa, eps) - T(0, 0)) psi_j>`.
pub fn reduced_perturbation_matrix(asm: &Assembler, kappa: Complex64, eps: f64, phi: &GriddedFunction) -> Result<Matrix2> {
    let b = eigenbasis(asm.domain());
    let zero = Complex64::new(0.0, 0.0);
    let delta = |f: &GriddedFunction| -> Result<GriddedFunction> {
        Ok(&apply_t_perturbed(asm, kappa, eps, phi, f)? - &apply_t(asm, zero, f)?)
    };
    let (t1, t2) = (delta(&b.psi1)?, delta(&b.psi2)?);
    Ok([
        [pair(&b.chi1, &t1)?, pair(&b.chi1, &t2)?],
        [pair(&b.chi2, &t1)?, pair(&b.chi2, &t2)?],
    ])
}

fn det2(m: &Matrix2) -> Complex64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Evaluates the splitting determinant, its asymptotic forms and optionally the full determinant.
pub fn splitting_determinant(
    asm: &Assembler,
    kappa: Complex64,
    eps: f64,
    phi: &GriddedFunction,
    coefficients: &PerturbationCoefficients,
    with_full: bool,
) -> Result<SplittingValue> {
    if kappa.norm() > 0.2 || eps.abs() > 0.2 {
        return Err(Error::InvalidParameter(format!("splitting needs |kappa|, eps <= 0.2, got {kappa}, {eps}")));
    }
    check_compact_support(phi)?;
    let reduced_det = det2(&reduced_perturbation_matrix(asm, kappa, eps, phi)?);
    let full_det = if with_full {
        Some(det_at(asm, kappa, &perturbed_potential(asm.domain(), eps, phi))?)
    } else {
        None
    };
    Ok(SplittingValue {
        kappa,
        eps,
        reduced_det,
        asymptotic: coefficients.asymptotic(kappa, eps),
        block_asymptotic: coefficients.block_asymptotic(kappa, eps),
        full_det,
    })
}

/// Largest singular value of `b` by power iteration on `b^H b`.
pub fn norm_estimate(b: &Mat<Complex64>, iterations: usize) -> f64 {
    let n = b.ncols();
    let mut x = Mat::from_fn(n, 1, |i, _| Complex64::new(1.0 + (i % 7) as f64 * 0.1, (i % 3) as f64 * 0.1));
    let mut sigma = 0.0;
    for _ in 0..iterations.max(1) {
        let norm = x.norm_l2();
        if norm == 0.0 {
            return 0.0;
        }
        x = &x * faer::Scale(Complex64::new(1.0 / norm, 0.0));
        let y = b * &x;
        sigma = y.norm_l2();
        x = b.adjoint() * &y;
    }
    sigma
}

/// Outcome of a stability scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    /// No zero of `D` was found and the first-order coefficients do not both vanish.
    Empty,
    /// A zero of `D` was found for a perturbation with nondegenerate coefficients, or for `phi = 0`.
    Nonempty,
    /// The first-order coefficients vanish for a nonzero `phi`, so the splitting argument is silent.
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Empty => "empty",
            Verdict::Nonempty => "nonempty",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Tunables of the stability scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityOptions {
    /// Zero detection on the coarse scan.
    pub search: ZeroSearch,
    /// Half-width of the local grid around `k_0` in units of `eps`.
    pub local_half_width: f64,
    /// Local grid nodes per side.
    pub local_nodes: usize,
    /// Radii, in units of `eps`, where `|kappa| ||(I - T(kappa, eps))^-1||` is sampled.
    pub resolvent_radii: [f64; 2],
    /// Phases per resolvent radius; zero disables the resolvent bound.
    pub resolvent_phases: usize,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            search: ZeroSearch::default(),
            local_half_width: 2.0,
            local_nodes: 5,
            resolvent_radii: [2.0, 4.0],
            resolvent_phases: 4,
        }
    }
}

/// Results for one value of `eps`.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonScan {
    /// Perturbation size.
    pub eps: f64,
    /// `|D|` on the coarse grid, in grid order.
    pub abs_det: Vec<f64>,
    /// Median of `abs_det`.
    pub median_abs_det: f64,
    /// Zeros found on the coarse grid.
    pub zeros: Vec<DetZero>,
    /// Splitting data on the local grid.
    pub local: Vec<SplittingValue>,
    /// Smallest `|reduced_det|` on the local grid.
    pub min_reduced_det: f64,
    /// Smallest full `|D|` on the local grid.
    pub min_local_abs_det: f64,
    /// Smallest full `|D|` on the coarse grid outside `|kappa| <= local_half_width * eps`.
    pub annulus_min_abs_det: f64,
    /// `(kappa, |kappa| ||(I - T(kappa, eps))^-1||)` samples.
    pub resolvent_products: Vec<(Complex64, f64)>,
    /// Verdict for this `eps`.
    pub verdict: Verdict,
}

/// Everything computed for one perturbation.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    /// Coefficients under both conventions.
    pub coefficients: [PerturbationCoefficients; 2],
    /// Numerically computed `eps`-linear block.
    pub linear_block: Matrix2,
    /// Relative defect of its `[[a, b], [-conj b, conj a]]` structure.
    pub linear_block_defect: f64,
    /// Coarse k-grid around `k_0`.
    pub grid: KGrid,
    /// One entry per `eps`.
    pub scans: Vec<EpsilonScan>,
    /// Combined verdict.
    pub verdict: Verdict,
}

impl PerturbationReport {
    /// Writes the `(kappa, eps)` table.
    pub fn write_csv<W: std::io::Write>(&self, out: W, config_hash: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record([
            "re_kappa",
            "im_kappa",
            "eps",
            "re_reduced_det",
            "im_reduced_det",
            "asymptotic",
            "block_asymptotic",
            "abs_det",
            "config_hash",
        ])
        .map_err(io)?;
        for scan in &self.scans {
            for v in &scan.local {
                w.write_record([
                    format!("{:e}", v.kappa.re),
                    format!("{:e}", v.kappa.im),
                    format!("{:e}", v.eps),
                    format!("{:e}", v.reduced_det.re),
                    format!("{:e}", v.reduced_det.im),
                    format!("{:e}", v.asymptotic),
                    format!("{:e}", v.block_asymptotic),
                    v.full_det.map(|d| format!("{:e}", d.abs())).unwrap_or_default(),
                    config_hash.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn verdict_for(zeros_found: bool, phi_is_zero: bool, degenerate: bool) -> Verdict {
    match (zeros_found, phi_is_zero, degenerate) {
        (true, true, _) | (true, false, false) => Verdict::Nonempty,
        (false, _, false) => Verdict::Empty,
        (_, true, true) => Verdict::Nonempty,
        (_, false, true) => Verdict::Inconclusive,
    }
}

/// Runs the coarse scan, the local splitting scan and the resolvent bound for each `eps`.
pub fn stability_scan(
    asm: &Assembler,
    phi: &GriddedFunction,
    k0: Complex64,
    eps_list: &[f64],
    grid: &KGrid,
    options: &StabilityOptions,
) -> Result<PerturbationReport> {
    check_compact_support(phi)?;
    let params = SolitonParams {
        k0,
        ..SolitonParams::default()
    };
    // `phi` is given in the frame; the lab perturbation is `e_{k_0} phi`.
    let lab = phi.map_with_node(|z, v| v * plane_wave(k0, z));
    let coefficients = [
        alpha_beta(&lab, &params, ChiConvention::PlusK0)?,
        alpha_beta(&lab, &params, ChiConvention::MinusK0)?,
    ];
    let block = &coefficients[1];
    let scale = phi.l2_norm();
    let phi_is_zero = phi.max_abs() == 0.0;
    let degenerate = block.is_degenerate(scale);
    let linear = linear_block(asm, phi)?;
    let frame_grid = KGrid::new(grid.center - k0, grid.half_width, grid.nodes_per_side)?;
    let mut scans = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let u = perturbed_potential(asm.domain(), eps, phi);
        let scan = crate::determinant::det_scan(asm, &u, &frame_grid, &format!("u0 + {eps} phi"));
        let eval = |k: Complex64| det_at(asm, k, &u).map(|d| d.value);
        let zeros = find_zeros(&scan, &options.search, eval)?;
        let local_r = options.local_half_width * eps;
        let local_grid = KGrid::new(Complex64::new(0.0, 0.0), local_r, options.local_nodes)?;
        let local: Vec<SplittingValue> = local_grid
            .nodes()
            .into_iter()
            .map(|kappa| splitting_determinant(asm, kappa, eps, phi, block, true))
            .collect::<Result<_>>()?;
        let min_reduced_det = local.iter().map(|v| v.reduced_det.norm()).fold(f64::INFINITY, f64::min);
        let min_local_abs_det = local
            .iter()
            .filter_map(|v| v.full_det.map(|d| d.abs()))
            .fold(f64::INFINITY, f64::min);
        let annulus_min_abs_det = scan
            .records
            .iter()
            .filter(|r| r.k.norm() > local_r)
            .map(|r| r.abs_det())
            .fold(f64::INFINITY, f64::min);
        let mut resolvent_products = Vec::new();
        for &radius in &options.resolvent_radii {
            for j in 0..options.resolvent_phases {
                let theta = 2.0 * PI * (j as f64 + 0.5) / options.resolvent_phases as f64;
                let kappa = Complex64::from_polar(radius * eps, theta);
                let s = asm.assemble_s(kappa, &u)?;
                let inv = FactoredResolvent::new(s.matrix())?.inverse();
                resolvent_products.push((kappa, kappa.norm() * norm_estimate(&inv, 30)));
            }
        }
        let zeros_found = !zeros.is_empty() || scan.records.iter().any(|r| r.det.is_none());
        scans.push(EpsilonScan {
            eps,
            abs_det: scan.records.iter().map(|r| r.abs_det()).collect(),
            median_abs_det: scan.median_abs_det(),
            zeros,
            local,
            min_reduced_det,
            min_local_abs_det,
            annulus_min_abs_det,
            resolvent_products,
            verdict: verdict_for(zeros_found, phi_is_zero, degenerate),
        });
    }
    let verdict = if scans.iter().any(|s| s.verdict == Verdict::Nonempty) {
        Verdict::Nonempty
    } else if !scans.is_empty() && scans.iter().all(|s| s.verdict == Verdict::Empty) {
        Verdict::Empty
    } else {
        Verdict::Inconclusive
    };
    Ok(PerturbationReport {
        coefficients,
        linear_block: linear,
        linear_block_defect: quaternion_defect(&linear),
        grid: *grid,
        scans,
        verdict,
    })
}

/// Named perturbations in the frame `k_0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BuiltinPerturbation {
    /// `-20 (1 - |z|^2) exp(-|z|^2)`, whose block coefficient `alpha_T` is about `-3.65`.
    Decisive,
    /// `-20 (1 - a |z|^2) exp(-|z|^2)` with `a` chosen on the grid so that `int chi rho^-2 = 0`,
    /// which makes both block coefficients vanish.
    Degenerate,
    /// The zero function.
    Zero,
}

/// Amplitude of the built-in perturbations.
pub const BUILTIN_AMPLITUDE: f64 = -20.0;

/// Samples a built-in perturbation.
pub fn builtin_perturbation(kind: BuiltinPerturbation, d: &Domain) -> Result<GriddedFunction> {
    let gauss = |z: Complex64| (-z.norm_sqr()).exp();
    match kind {
        BuiltinPerturbation::Zero => Ok(d.zeros()),
        BuiltinPerturbation::Decisive => Ok(d.sample_real(|z| BUILTIN_AMPLITUDE * (1.0 - z.norm_sqr()) * gauss(z))),
        BuiltinPerturbation::Degenerate => {
            let a = shoot(|a| {
                let f = d.sample_real(|z| (1.0 - a * z.norm_sqr()) * gauss(z));
                let rho2 = d.sample_real(|z| 1.0 / (1.0 + z.norm_sqr()));
                Ok(pair(&f, &rho2)?.re)
            }, 0.5, 3.0)?;
            Ok(d.sample_real(|z| BUILTIN_AMPLITUDE * (1.0 - a * z.norm_sqr()) * gauss(z)))
        }
    }
}

/// Root of a one-parameter function by bisection on a sign-changing bracket.
pub fn shoot(f: impl Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64) -> Result<f64> {
    let (mut flo, fhi) = (f(lo)?, f(hi)?);
    if flo.signum() == fhi.signum() {
        return Err(Error::InvalidParameter(format!("no sign change on [{lo}, {hi}]")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm == 0.0 || hi - lo < 1e-15 * mid.abs().max(1.0) {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Vanishing order of `Det(I - A(kappa))` at 0 and the multiplicities of the eigenvalue 1 of `A(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MultiplicityFit {
    /// Slope of `log mean |Det(I - A(kappa)) - Det(I - A(0))|` against `log |kappa|`.
    pub m_fit: f64,
    /// Singular values of `I - A(0)` below the kernel tolerance.
    pub kernel_dimension: usize,
    /// Eigenvalues of `A(0)` within the cluster radius of 1.
    pub algebraic_multiplicity: usize,
}

/// Parameters of the multiplicity check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplicityOptions {
    /// Radii for the slope fit.
    pub radii: Vec<f64>,
    /// Phases averaged per radius.
    pub phases: usize,
    /// Relative threshold on the singular values of `I - A(0)`.
    pub kernel_tolerance: f64,
    /// Eigenvalues of `A(0)` within this distance of 1 are counted.
    pub cluster_radius: f64,
}

/// Fits the vanishing order and measures the kernel of `I - A(0)`.
pub fn multiplicity_check(family: impl Fn(Complex64) -> Result<Mat<Complex64>> + Sync, opts: &MultiplicityOptions) -> Result<MultiplicityFit> {
    if opts.radii.len() < 2 || opts.phases == 0 {
        return Err(Error::InvalidParameter("need at least two radii and one phase".into()));
    }
    let a0 = family(Complex64::new(0.0, 0.0))?;
    let n = check_square(&a0)?;
    let d0 = renormalized_det_matrix(&a0)?.value;
    let points: Vec<(f64, f64)> = opts
        .radii
        .par_iter()
        .map(|&r| {
            let mean = (0..opts.phases)
                .map(|j| {
                    let kappa = Complex64::from_polar(r, PI * (2.0 * j as f64 + 0.5) / opts.phases as f64);
                    Ok((renormalized_det_matrix(&family(kappa)?)?.value - d0).norm())
                })
                .sum::<Result<f64>>()?
                / opts.phases as f64;
            Ok((r.ln(), mean.ln()))
        })
        .collect::<Result<_>>()?;
    let m_fit = crate::determinant::least_squares_slope(&points);
    let id = identity(n);
    let sv = (&id - &a0)
        .singular_values()
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    let top = sv.iter().copied().fold(0.0, f64::max).max(1.0);
    let kernel_dimension = sv.iter().filter(|s| **s < opts.kernel_tolerance * top).count();
    let algebraic_multiplicity = eigenvalues(&a0)?
        .iter()
        .filter(|l| (*l - 1.0).norm() < opts.cluster_radius)
        .count();
    Ok(MultiplicityFit {
        m_fit,
        kernel_dimension,
        algebraic_multiplicity,
    })
}

/// The `3 x 3` family `[[1, 1, e], [e, 1, 1], [e, e, 1]]` whose unit eigenvalue at `e = 0` is defective.
pub fn defective_family(eps: Complex64) -> Mat<Complex64> {
    let one = Complex64::new(1.0, 0.0);
    let m = [[one, one, eps], [eps, one, one], [eps, eps, one]];
    Mat::from_fn(3, 3, |i, j| m[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_domain;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn diag(values: &[Complex64]) -> Mat<Complex64> {
        Mat::from_fn(values.len(), values.len(), |i, j| if i == j { values[i] } else { c(0.0, 0.0) })
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat<Complex64> {
        Mat::from_fn(n, n, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
    }

    /// A matrix with eigenvalues `values` in a random well-conditioned basis.
    fn with_spectrum(rng: &mut ChaCha8Rng, values: &[Complex64]) -> Mat<Complex64> {
        let n = values.len();
        let basis = identity(n) + random_matrix(rng, n, 0.2);
        let inv = basis.partial_piv_lu().inverse();
        &basis * diag(values) * inv
    }

    #[test]
    fn riesz_projection_of_a_diagonal_matrix() {
        let contour = Contour {
            nodes: 64,
            ..Contour::default()
        };
        let p = riesz_projection(&diag(&[c(1.0, 0.0), c(0.1, 0.0)]), &contour).unwrap();
        assert!((p[(0, 0)] - 1.0).norm() < 1e-12);
        assert!(p[(1, 1)].norm() < 1e-12 && p[(0, 1)].norm() < 1e-12);
    }

    #[test]
    fn riesz_projection_is_idempotent_and_has_the_enclosed_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Outside eigenvalues sit at least 0.85 from the center, so 32 nodes give (0.5/0.85)^32 ~ 4e-8.
        let values = [c(1.0, 0.0), c(0.98, 0.02), c(0.1, 0.0), c(-0.3, 0.1), c(0.05, -0.2), c(0.1, 0.2)];
        let a = with_spectrum(&mut rng, &values);
        let p = riesz_projection(&a, &Contour::default()).unwrap();
        assert!(spectral_norm(&(&p * &p - &p)).unwrap() < 1e-6);
        let trace: Complex64 = (0..6).map(|i| p[(i, i)]).sum();
        assert!((trace - 2.0).norm() < 1e-6);
    }

    #[test]
    fn eigenvalue_on_the_contour_is_rejected() {
        let a = diag(&[c(1.5, 0.0), c(0.0, 0.0)]);
        assert!(matches!(riesz_projection(&a, &Contour::default()), Err(Error::EigenvalueOnContour { .. })));
    }

    #[test]
    fn soliton_projection_has_rank_two() {
        // The third eigenvalue of T(0) is about 0.247, so 32 nodes leave a trapezoid error
        // near (0.5 / 0.753)^32 ~ 2e-6 per eigenvalue; 48 nodes push it below 1e-8.
        let d = make_domain(10.0, 24).unwrap();
        let t0 = Assembler::new(&d).assemble_t(c(0.0, 0.0)).unwrap();
        for (nodes, tol) in [(32, 1e-5), (48, 1e-6)] {
            let contour = Contour { nodes, ..Contour::default() };
            let p = riesz_projection(t0.matrix(), &contour).unwrap();
            let trace: Complex64 = (0..d.len()).map(|i| p[(i, i)]).sum();
            assert!((trace - 2.0).norm() < tol, "{nodes}: {trace}");
            assert!(spectral_norm(&(&p * &p - &p)).unwrap() < tol);
        }
    }

    #[test]
    fn similarity_of_equal_projections_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = identity(4) + random_matrix(&mut rng, 4, 0.2);
        let p = &basis * diag(&[c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]) * basis.partial_piv_lu().inverse();
        let v = sznagy_similarity(&p, &p).unwrap();
        assert!(spectral_norm(&(&v - identity(4))).unwrap() < 1e-12);
    }

    #[test]
    fn distant_projections_are_rejected() {
        let p = diag(&[c(1.0, 0.0), c(0.0, 0.0)]);
        let q = diag(&[c(0.0, 0.0), c(1.0, 0.0)]);
        assert!(matches!(sznagy_similarity(&p, &q), Err(Error::GapTooLarge { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn similarity_intertwines_and_stays_close(seed in 0u64..1_000, size in 0.001f64..0.05) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let range = diag(&[c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
            let basis = identity(8) + random_matrix(&mut rng, 8, 0.2);
            let moved = &basis + random_matrix(&mut rng, 8, size);
            let p0 = &basis * &range * basis.partial_piv_lu().inverse();
            let p = &moved * &range * moved.partial_piv_lu().inverse();
            let gap = spectral_norm(&(&p - &p0)).unwrap();
            prop_assume!(gap < 0.5);
            let v = sznagy_similarity(&p, &p0).unwrap();
            prop_assert!(spectral_norm(&(&p * &v - &v * &p0)).unwrap() < 1e-8);
            prop_assert!(spectral_norm(&(&v - identity(8))).unwrap() <= 2.0 * gap + 1e-12);
        }

        #[test]
        fn perturbed_projections_are_idempotent(seed in 0u64..1_000, size in 0.001f64..0.05) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = [c(1.0, 0.0), c(0.97, 0.0), c(0.1, 0.0), c(0.0, 0.1), c(-0.1, 0.0), c(0.1, -0.2), c(0.0, 0.25), c(0.05, 0.0)];
            let a0 = with_spectrum(&mut rng, &values);
            let a = &a0 + random_matrix(&mut rng, 8, size);
            let pair = ProjectionPair::new(&a, &a0, &Contour::default()).unwrap();
            prop_assert!(pair.idempotency_defect().unwrap() < 1e-6);
            let (r, r0) = pair.ranks();
            prop_assert!((r - 2.0).abs() < 1e-6 && (r0 - 2.0).abs() < 1e-6);
        }

        #[test]
        fn block_determinants_factor(seed in 0u64..1_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = [c(0.95, 0.0), c(0.9, 0.05), c(0.1, 0.0), c(0.0, 0.1), c(-0.1, 0.0), c(0.1, -0.2)];
            let a = with_spectrum(&mut rng, &values);
            let p = riesz_projection(&a, &Contour::default()).unwrap();
            let q = identity(6) - &p;
            let pap = &p * &a * &p;
            let qaq = &q * &a * &q;
            let whole = renormalized_det_matrix(&(&pap + &qaq)).unwrap().value;
            let split = renormalized_det_matrix(&pap).unwrap().value * renormalized_det_matrix(&qaq).unwrap().value;
            prop_assert!((whole - split).norm() <= 1e-8 * whole.norm());
            // I - A is invertible exactly when both restricted blocks are.
            let smallest = |m: &Mat<Complex64>| m.singular_values().unwrap().into_iter().fold(f64::INFINITY, f64::min);
            let full = smallest(&(identity(6) - &a));
            let restricted = smallest(&(identity(6) - &pap - &qaq));
            prop_assert!(full > 1e-6 && restricted > 1e-6);
        }
    }

    #[test]
    fn coefficients_vanish_for_zero_and_beta_vanishes_for_real_radial_chi() {
        let d = make_domain(8.0, 32).unwrap();
        let params = SolitonParams::default();
        let z = alpha_beta(&d.zeros(), &params, ChiConvention::PlusK0).unwrap();
        assert_eq!((z.alpha, z.beta), (c(0.0, 0.0), c(0.0, 0.0)));
        let radial = d.sample_real(|z| (-z.norm_sqr()).exp());
        let r = alpha_beta(&radial, &params, ChiConvention::MinusK0).unwrap();
        assert!(r.beta.norm() < 1e-14);
    }

    #[test]
    fn gaussian_alpha_matches_radial_oracle() {
        // -(2/pi) int exp(-r^2) (1 - r^2) (1 + r^2)^-2 2 pi r dr from an independent radial quadrature.
        let oracle = -0.42191582606083555;
        let k0 = c(1.0, -0.5);
        let d = make_domain(8.0, 64).unwrap();
        let phi = d.sample(|z| plane_wave(-k0, z) * (-z.norm_sqr()).exp());
        let params = SolitonParams { k0, ..SolitonParams::default() };
        let v = alpha_beta(&phi, &params, ChiConvention::PlusK0).unwrap();
        assert!((v.alpha - oracle).norm() < 1e-6, "{}", v.alpha);
        let other = alpha_beta(&phi, &params, ChiConvention::MinusK0).unwrap();
        assert!((other.alpha - oracle).norm() > 1e-2);
    }

    #[test]
    fn linear_block_matches_block_coefficients() {
        let d = make_domain(20.0, 48).unwrap();
        let asm = Assembler::new(&d);
        let phi = d.sample(|z| (c(0.3, 0.7) + c(1.0, -0.4) * z + c(0.2, 0.5) * z.conj() * z.conj()) * (-z.norm_sqr()).exp());
        let m = linear_block(&asm, &phi).unwrap();
        let coeffs = alpha_beta(&phi, &SolitonParams::default(), ChiConvention::MinusK0).unwrap();
        assert!((m[0][0] - coeffs.block_alpha).norm() < 0.1 * coeffs.block_alpha.norm());
        assert!((m[0][1] - coeffs.block_beta).norm() < 0.1 * coeffs.block_beta.norm());
        assert!(quaternion_defect(&m) < 0.1);
    }

    #[test]
    fn unperturbed_splitting_determinant_is_quadratic() {
        let d = make_domain(20.0, 48).unwrap();
        let asm = Assembler::new(&d);
        let coeffs = alpha_beta(&d.zeros(), &SolitonParams::default(), ChiConvention::MinusK0).unwrap();
        let kappa = c(0.0, 0.05);
        let v = splitting_determinant(&asm, kappa, 0.0, &d.zeros(), &coeffs, false).unwrap();
        assert!((v.reduced_det.norm() / v.block_asymptotic - 1.0).abs() < 0.15, "{:?}", v);
        assert!(splitting_determinant(&asm, c(0.5, 0.0), 0.0, &d.zeros(), &coeffs, false).is_err());
    }

    #[test]
    fn builtins_have_the_intended_coefficients() {
        let d = make_domain(20.0, 48).unwrap();
        let params = SolitonParams::default();
        let decisive = builtin_perturbation(BuiltinPerturbation::Decisive, &d).unwrap();
        let v = alpha_beta(&decisive, &params, ChiConvention::MinusK0).unwrap();
        assert!(v.block_alpha.norm() > 3.0 && !v.is_degenerate(decisive.l2_norm()));
        let degenerate = builtin_perturbation(BuiltinPerturbation::Degenerate, &d).unwrap();
        let w = alpha_beta(&degenerate, &params, ChiConvention::MinusK0).unwrap();
        assert!(w.is_degenerate(degenerate.l2_norm()), "{w:?}");
        assert!(check_compact_support(&degenerate).is_ok());
    }

    #[test]
    fn verdict_table() {
        assert_eq!(verdict_for(false, false, false), Verdict::Empty);
        assert_eq!(verdict_for(true, false, false), Verdict::Nonempty);
        assert_eq!(verdict_for(true, true, true), Verdict::Nonempty);
        assert_eq!(verdict_for(false, false, true), Verdict::Inconclusive);
        assert_eq!(verdict_for(true, false, true), Verdict::Inconclusive);
    }

    #[test]
    fn diagonal_family_has_order_two() {
        let family = |k: Complex64| Ok(diag(&[1.0 - k, 1.0 - k.conj(), c(0.3, 0.0)]));
        let opts = MultiplicityOptions {
            radii: vec![1e-3, 2e-3, 5e-3, 1e-2],
            phases: 4,
            kernel_tolerance: 1e-10,
            cluster_radius: 0.05,
        };
        let fit = multiplicity_check(family, &opts).unwrap();
        assert!((fit.m_fit - 2.0).abs() < 0.01, "{fit:?}");
        assert_eq!((fit.kernel_dimension, fit.algebraic_multiplicity), (2, 2));
        assert!(fit.kernel_dimension as f64 <= fit.m_fit + 1e-9);
    }

    #[test]
    fn defective_family_breaks_the_lemma_hypothesis() {
        for e in [0.1, 0.01, -0.3] {
            let a = defective_family(c(e, 0.0));
            let i_minus_a = identity(3) - a;
            let det = i_minus_a.determinant();
            assert!((det - c(-e - e * e * e, 0.0)).norm() < 1e-14);
        }
        let opts = MultiplicityOptions {
            radii: vec![1e-4, 1e-3, 1e-2],
            phases: 4,
            kernel_tolerance: 1e-10,
            cluster_radius: 0.05,
        };
        let fit = multiplicity_check(|e| Ok(defective_family(e)), &opts).unwrap();
        assert!((fit.m_fit - 1.0).abs() < 0.01);
        assert_eq!(fit.kernel_dimension, 1);
        assert_eq!(fit.algebraic_multiplicity, 3);
    }
}
