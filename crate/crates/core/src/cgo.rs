//! Complex geometric optics solutions `m_1, m_2`, the scattering data `s, r`, the
//! coefficient `c(k)` and the `dbar` equation `dbar log D = (i/2) conj(s) - c`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::determinant::{DetValue, FactoredResolvent};
use crate::error::{Error, Result};
use crate::grid::{plane_wave, GriddedFunction};
use crate::lattice::LatticeKernel;
use crate::operator::Assembler;
use crate::transforms::{fourier, fourier_at};

/// How the linear system `(I - S) m_1 = 1` is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Dense LU of the assembled operator.
    #[default]
    Direct,
    /// Restarted GMRES with FFT-based operator application.
    Iterative,
}

/// Options of [`solve_m`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Linear solver.
    pub method: SolveMethod,
    /// Solves are refused when `|D(k)|` falls below this value.
    pub zero_threshold: f64,
    /// Known zeros of the determinant.
    pub exclusions: Vec<Complex64>,
    /// Solves are refused within this distance of a known zero.
    pub exclusion_radius: f64,
    /// Relative residual accepted from the iterative solver.
    pub tolerance: f64,
    /// Krylov dimension between restarts.
    pub restart: usize,
    /// Maximum number of iterations.
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: SolveMethod::Direct,
            zero_threshold: 1e-2,
            exclusions: Vec::new(),
            exclusion_radius: 1.0,
            tolerance: 1e-10,
            restart: 60,
            max_iterations: 600,
        }
    }
}

/// Solution of the CGO system at one spectral parameter.
#[derive(Debug, Clone)]
pub struct CgoSolution {
    /// Spectral parameter.
    pub k: Complex64,
    /// `m_1`, normalized to 1 at infinity.
    pub m1: GriddedFunction,
    /// `m_2 = -(1/2) e_{-k} C-bar(e_k conj(u) m_1)`.
    pub m2: GriddedFunction,
    /// `||(I - S) m_1 - 1|| / ||1||`.
    pub residual: f64,
    /// Iterations used by the iterative solver, `None` for a direct solve.
    pub iterations: Option<usize>,
    /// Renormalized determinant, available from direct solves.
    pub det: Option<DetValue>,
}

impl CgoSolution {
    /// `max |m_1 - 1|` over the outermost ring of cells.
    pub fn boundary_deviation(&self) -> f64 {
        let mask = self.m1.domain().boundary_frame_mask();
        self.m1
            .values()
            .iter()
            .zip(mask)
            .filter(|(_, m)| *m)
            .map(|(v, _)| (v - 1.0).norm())
            .fold(0.0, f64::max)
    }
}

/// Solves `(I - S_{k,u}) m_1 = 1` and recovers `m_2`.
pub fn solve_m(asm: &Assembler, k: Complex64, u: &GriddedFunction, opts: &SolveOptions) -> Result<CgoSolution> {
    if let Some(&zero) = opts.exclusions.iter().find(|z| (k - **z).norm() < opts.exclusion_radius) {
        return Err(Error::NearExceptional {
            k,
            zero,
            radius: opts.exclusion_radius,
        });
    }
    let d = *u.domain();
    let ones = vec![Complex64::new(1.0, 0.0); d.len()];
    let g = asm.twisted_conjugate(k);
    let (m1, iterations, det) = match opts.method {
        SolveMethod::Direct => {
            let s = asm.assemble_s(k, u)?;
            let f = FactoredResolvent::new(s.matrix())?;
            let det = f.det();
            if det.abs() < opts.zero_threshold {
                return Err(Error::NearlySingular {
                    k,
                    abs_det: det.abs(),
                    threshold: opts.zero_threshold,
                });
            }
            (f.solve(&ones)?, None, Some(det))
        }
        SolveMethod::Iterative => {
            let op = |x: &[Complex64]| apply_i_minus_s(asm.cauchy(), &g, u.values(), x);
            let (x, it) = gmres(op, &ones, opts.tolerance, opts.restart, opts.max_iterations)?;
            (x, Some(it), None)
        }
    };
    let residual = {
        let r = apply_i_minus_s(asm.cauchy(), &g, u.values(), &m1);
        let num: f64 = r.iter().map(|v| (v - 1.0).norm_sqr()).sum::<f64>().sqrt();
        num / (d.len() as f64).sqrt()
    };
    let m2 = second_component(&g, u.values(), &m1);
    Ok(CgoSolution {
        k,
        m1: GriddedFunction::new(d, m1)?,
        m2: GriddedFunction::new(d, m2)?,
        residual,
        iterations,
        det,
    })
}

fn second_component(g: &LatticeKernel, u: &[Complex64], m1: &[Complex64]) -> Vec<Complex64> {
    let x: Vec<Complex64> = u.iter().zip(m1).map(|(a, m)| a.conj() * m).collect();
    g.apply(&x).into_iter().map(|v| v * -0.5).collect()
}

/// `(I - S) x` without assembling `S`.
fn apply_i_minus_s(c: &LatticeKernel, g: &LatticeKernel, u: &[Complex64], x: &[Complex64]) -> Vec<Complex64> {
    let m2 = second_component(g, u, x);
    let y: Vec<Complex64> = u.iter().zip(&m2).map(|(a, m)| a * m * 0.5).collect();
    let cy = c.apply(&y);
    x.iter().zip(cy).map(|(a, b)| a - b).collect()
}

/// Restarted GMRES for `A x = b` with modified Gram-Schmidt and Givens rotations.
pub fn gmres(
    a: impl Fn(&[Complex64]) -> Vec<Complex64>,
    b: &[Complex64],
    tolerance: f64,
    restart: usize,
    max_iterations: usize,
) -> Result<(Vec<Complex64>, usize)> {
    let n = b.len();
    let norm = |v: &[Complex64]| v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let dot = |u: &[Complex64], v: &[Complex64]| u.iter().zip(v).map(|(x, y)| x.conj() * y).sum::<Complex64>();
    let bnorm = norm(b).max(f64::MIN_POSITIVE);
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut iterations = 0;
    let restart = restart.max(1);
    loop {
        let ax = a(&x);
        let r: Vec<Complex64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let beta = norm(&r);
        if beta / bnorm <= tolerance {
            return Ok((x, iterations));
        }
        if iterations >= max_iterations {
            return Err(Error::NoConvergence {
                iterations,
                residual: beta / bnorm,
            });
        }
        let mut basis: Vec<Vec<Complex64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess: Vec<Vec<Complex64>> = Vec::new();
        let mut cs: Vec<(f64, Complex64)> = Vec::new();
        let mut rhs = vec![Complex64::new(beta, 0.0)];
        for j in 0..restart {
            iterations += 1;
            let mut w = a(&basis[j]);
            let mut col = vec![Complex64::new(0.0, 0.0); j + 2];
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(v, &w);
                col[i] = hij;
                w.iter_mut().zip(v).for_each(|(wk, vk)| *wk -= hij * vk);
            }
            let hnext = norm(&w);
            col[j + 1] = Complex64::new(hnext, 0.0);
            for (i, &(cc, ss)) in cs.iter().enumerate() {
                let t = cc * col[i] + ss * col[i + 1];
                col[i + 1] = -ss.conj() * col[i] + cc * col[i + 1];
                col[i] = t;
            }
            let (a0, b0) = (col[j], col[j + 1]);
            let rr = (a0.norm_sqr() + b0.norm_sqr()).sqrt();
            let (cc, ss) = if a0.norm() == 0.0 {
                (0.0, Complex64::new(1.0, 0.0))
            } else {
                let phase = a0 / a0.norm();
                (a0.norm() / rr, phase * b0.conj() / rr)
            };
            col[j] = cc * a0 + ss * b0;
            col[j + 1] = Complex64::new(0.0, 0.0);
            cs.push((cc, ss));
            let last = rhs[j];
            rhs.push(-ss.conj() * last);
            rhs[j] = cc * last;
            hess.push(col);
            let converged = rhs[j + 1].norm() / bnorm <= tolerance;
            if hnext > 0.0 {
                basis.push(w.iter().map(|v| v / hnext).collect());
            }
            if converged || hnext == 0.0 || iterations >= max_iterations {
                break;
            }
        }
        let m = hess.len();
        let mut y = vec![Complex64::new(0.0, 0.0); m];
        for i in (0..m).rev() {
            let mut acc = rhs[i];
            for (jj, yj) in y.iter().enumerate().skip(i + 1) {
                acc -= hess[jj][i] * yj;
            }
            y[i] = acc / hess[i][i];
        }
        for (v, yi) in basis.iter().zip(&y) {
            x.iter_mut().zip(v).for_each(|(xk, vk)| *xk += yi * vk);
        }
    }
}

/// Scattering coefficients at one spectral parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScatteringDatum {
    /// Spectral parameter.
    pub k: Complex64,
    /// `s(k) = (1/pi) int u m_2`.
    pub s: Complex64,
    /// `r(k) = -(1/pi) int e_{-k} u conj(m_1)`.
    pub r: Complex64,
    /// `s(k) ~ 2 z (m_1 - 1)` averaged over the outermost ring of cells.
    pub s_boundary: Complex64,
}

/// Evaluates `s`, `r` and the boundary estimate of `s` from a CGO solution.
///
/// The oscillatory integral for `r` is the Fourier coefficient of the sinc interpolant of
/// `u conj(m_1)`: the midpoint sum inside the Nyquist box and zero outside it.
pub fn scattering_data(u: &GriddedFunction, sol: &CgoSolution) -> Result<ScatteringDatum> {
    u.check_same_domain(&sol.m1)?;
    let d = *u.domain();
    let w = d.weight();
    let k = sol.k;
    let s = u.values().iter().zip(sol.m2.values()).map(|(a, b)| a * b).sum::<Complex64>() * (w / PI);
    let r = if d.in_band(k) {
        u.values()
            .iter()
            .zip(sol.m1.values())
            .zip(d.nodes())
            .map(|((a, m), z)| plane_wave(-k, z) * a * m.conj())
            .sum::<Complex64>()
            * (-w / PI)
    } else {
        Complex64::new(0.0, 0.0)
    };
    let mask = d.boundary_frame_mask();
    let (sum, count) = sol
        .m1
        .values()
        .iter()
        .zip(d.nodes())
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((Complex64::new(0.0, 0.0), 0usize), |(acc, n), ((m1, z), _)| (acc + z * (m1 - 1.0), n + 1));
    Ok(ScatteringDatum {
        k,
        s,
        r,
        s_boundary: sum * (2.0 / count as f64),
    })
}

/// The two evaluations of `c(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CValue {
    /// Spectral route `(1/4 pi) int |F u(zeta)|^2 / conj(k - zeta)`.
    pub spectral: Complex64,
    /// Direct route `-(i/4 pi) int conj(u) (e_k C e_{-k}) u`.
    pub direct: Complex64,
}

/// Options of the spectral route for `c(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    /// Oversampling of the frequency grid.
    pub oversampling: usize,
    /// Width of the Gaussian used to subtract the pole, in frequency units.
    pub subtraction_width: f64,
    /// Use `|F u(-zeta)|^2` instead of `|F u(zeta)|^2`.
    pub reflect: bool,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            oversampling: 4,
            subtraction_width: 0.1,
            reflect: false,
        }
    }
}

/// `|F u|^2` on an oversampled frequency grid, reusable across many `k`.
#[derive(Debug, Clone)]
pub struct SpectralDensity {
    u: GriddedFunction,
    density: GriddedFunction,
    opts: SpectralOptions,
}

impl SpectralDensity {
    /// Transforms `u` once.
    pub fn new(u: &GriddedFunction, opts: SpectralOptions) -> Result<Self> {
        let fu = fourier(u, opts.oversampling)?;
        let dual = *fu.domain();
        let n = dual.points_per_side();
        let vals = fu.values();
        let density = (0..dual.len())
            .map(|idx| {
                let src = if opts.reflect {
                    let (i, j) = dual.split_index(idx);
                    (n - 1 - j) * n + (n - 1 - i)
                } else {
                    idx
                };
                Complex64::new(vals[src].norm_sqr(), 0.0)
            })
            .collect();
        Ok(Self {
            u: u.clone(),
            density: GriddedFunction::new(dual, density)?,
            opts,
        })
    }

    /// `(1/4 pi) int |F u|^2 / conj(k - zeta) dm(zeta)`.
    ///
    /// The pole is removed by subtracting `|F u(k)|^2 exp(-|zeta - k|^2 / sigma^2)`, whose
    /// integral against the kernel vanishes by symmetry.
    pub fn c_at(&self, k: Complex64) -> Complex64 {
        let dual = *self.density.domain();
        let spatial = *self.u.domain();
        let edge = dual.half_width();
        let room = (edge - k.re.abs()).min(edge - k.im.abs());
        let sigma = self.opts.subtraction_width.min(room / 4.0);
        let peak = if spatial.in_band(k) && sigma > 0.0 {
            let probe = if self.opts.reflect { -k } else { k };
            fourier_at(&self.u, probe).norm_sqr()
        } else {
            0.0
        };
        let tiny = 1e-9 * dual.spacing();
        let sum: Complex64 = self
            .density
            .values()
            .iter()
            .zip(dual.nodes())
            .map(|(g, zeta)| {
                let diff = k - zeta;
                if diff.norm() < tiny {
                    return Complex64::new(0.0, 0.0);
                }
                let sub = if peak > 0.0 { peak * (-diff.norm_sqr() / (sigma * sigma)).exp() } else { 0.0 };
                (g - sub) / diff.conj()
            })
            .sum();
        sum * (dual.weight() / (4.0 * PI))
    }
}

/// Direct route for `c(k)` through the twisted Cauchy kernel.
pub fn c_direct(asm: &Assembler, k: Complex64, u: &GriddedFunction) -> Result<Complex64> {
    u.check_same_domain(&asm.domain().zeros())?;
    let cu = asm.twisted_cauchy(k).apply(u.values());
    let w = asm.domain().weight();
    let sum: Complex64 = u.values().iter().zip(&cu).map(|(a, b)| a.conj() * b).sum();
    Ok(sum * Complex64::new(0.0, -w / (4.0 * PI)))
}

/// Both routes for `c(k)`.
pub fn c_of_k(asm: &Assembler, k: Complex64, u: &GriddedFunction) -> Result<CValue> {
    let spectral = SpectralDensity::new(u, SpectralOptions::default())?.c_at(k);
    Ok(CValue {
        spectral,
        direct: c_direct(asm, k, u)?,
    })
}

/// Comparison of the finite-difference `dbar log D` with `(i/2) conj(s) - c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DbarCheck {
    /// Spectral parameter.
    pub k: Complex64,
    /// Centred-difference `dbar_k log D(k)`.
    pub finite_difference: Complex64,
    /// `(i/2) conj(s(k)) - c(k)` with `c` from the direct route.
    pub predicted: Complex64,
    /// `|finite_difference - predicted|`.
    pub residual: f64,
    /// `residual / |predicted|`.
    pub relative: f64,
    /// Scattering coefficient used in the prediction.
    pub s: Complex64,
    /// `c(k)` used in the prediction.
    pub c: Complex64,
}

/// Evaluates the `dbar` equation for `log D` at `k` with difference half-width `step`.
pub fn dbar_residual(asm: &Assembler, u: &GriddedFunction, k: Complex64, step: f64, opts: &SolveOptions) -> Result<DbarCheck> {
    let sol = solve_m(asm, k, u, opts)?;
    let datum = scattering_data(u, &sol)?;
    let c = c_direct(asm, k, u)?;
    let shifts = [
        Complex64::new(step, 0.0),
        Complex64::new(-step, 0.0),
        Complex64::new(0.0, step),
        Complex64::new(0.0, -step),
    ];
    let dets: Vec<DetValue> = shifts
        .iter()
        .map(|&dk| {
            let kk = k + dk;
            if let Some(&zero) = opts.exclusions.iter().find(|z| (kk - **z).norm() < opts.exclusion_radius) {
                return Err(Error::NearExceptional {
                    k: kk,
                    zero,
                    radius: opts.exclusion_radius,
                });
            }
            crate::determinant::det_at(asm, kk, u)
        })
        .collect::<Result<_>>()?;
    let dlog = |a: &DetValue, b: &DetValue| {
        let mut darg = a.arg - b.arg;
        while darg > PI {
            darg -= 2.0 * PI;
        }
        while darg <= -PI {
            darg += 2.0 * PI;
        }
        Complex64::new(a.log_abs - b.log_abs, darg) / (2.0 * step)
    };
    let dx = dlog(&dets[0], &dets[1]);
    let dy = dlog(&dets[2], &dets[3]);
    let finite_difference = 0.5 * (dx + Complex64::new(0.0, 1.0) * dy);
    let predicted = Complex64::new(0.0, 0.5) * datum.s.conj() - c;
    let residual = (finite_difference - predicted).norm();
    Ok(DbarCheck {
        k,
        finite_difference,
        predicted,
        residual,
        relative: residual / predicted.norm().max(f64::MIN_POSITIVE),
        s: datum.s,
        c,
    })
}
