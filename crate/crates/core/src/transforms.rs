//! Cauchy, conjugate Cauchy and Beurling transforms, spectral derivatives and the
//! Fourier transform `(F f)(k) = (1/pi) int e_{-k}(z) f(z) dm(z)`.
//!
//! The Cauchy transforms act through [`LatticeKernel`]s. The Beurling transform and
//! the derivatives are Fourier multipliers on the periodized box, valid for functions
//! that are small at the boundary.

use std::f64::consts::PI;

use faer::Mat;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{Domain, GriddedFunction};
use crate::lattice::{CauchyRule, KernelKind, LatticeKernel};

/// Dense realization of `f -> (1/pi) int f(w) / (z - w) dm(w)` on grid samples,
/// with quadrature weights folded in.
#[derive(Debug, Clone)]
pub struct CauchyMatrix {
    kernel: LatticeKernel,
}

impl CauchyMatrix {
    /// Cauchy matrix on `domain` produced by `rule`.
    pub fn new(domain: &Domain, rule: CauchyRule) -> Self {
        Self {
            kernel: LatticeKernel::with_rule(domain, KernelKind::Cauchy, Complex64::new(0.0, 0.0), rule),
        }
    }

    /// Whether near-diagonal entries use exact cell integrals.
    pub fn near_field_exact(&self) -> bool {
        self.kernel.rule() == CauchyRule::NearFieldExact
    }

    /// Underlying lattice kernel.
    pub fn kernel(&self) -> &LatticeKernel {
        &self.kernel
    }

    /// Entry between node indices `a` and `b`.
    pub fn entry(&self, a: usize, b: usize) -> Complex64 {
        self.kernel.entry(a, b)
    }

    /// Materializes the `N^2 x N^2` matrix.
    pub fn dense(&self) -> Mat<Complex64> {
        self.kernel.dense()
    }

    /// Applies the matrix through the FFT fast path.
    pub fn apply(&self, f: &GriddedFunction) -> Result<GriddedFunction> {
        apply_kernel(&self.kernel, f)
    }
}

/// Applies a lattice kernel to a gridded function on the kernel's domain.
pub fn apply_kernel(kernel: &LatticeKernel, f: &GriddedFunction) -> Result<GriddedFunction> {
    if f.domain() != kernel.domain() {
        return Err(Error::DomainMismatch("kernel and function domains differ".into()));
    }
    GriddedFunction::new(*f.domain(), kernel.apply(f.values()))
}

/// Discretized solid Cauchy transform `C f`.
pub fn cauchy_apply(f: &GriddedFunction) -> GriddedFunction {
    let k = LatticeKernel::cauchy(f.domain());
    apply_kernel(&k, f).expect("kernel built on the function's domain")
}

/// Discretized conjugate Cauchy transform `(1/pi) int f(w) / conj(z - w) dm(w)`.
pub fn cauchy_conj_apply(f: &GriddedFunction) -> GriddedFunction {
    let k = LatticeKernel::conjugate_cauchy(f.domain());
    apply_kernel(&k, f).expect("kernel built on the function's domain")
}

/// A transform value together with the boundary diagnostic of its input.
#[derive(Debug, Clone)]
pub struct Periodized {
    /// Transformed samples.
    pub value: GriddedFunction,
    /// Fraction of the input `L^2` mass carried by the outermost ring of cells.
    pub boundary_fraction: f64,
    /// Set when the boundary fraction exceeds the threshold and aliasing is likely.
    pub aliasing_warning: bool,
}

/// Fraction of `||f||^2` carried by the boundary frame of the domain.
pub fn boundary_mass_fraction(f: &GriddedFunction) -> f64 {
    let mask = f.domain().boundary_frame_mask();
    let total = f.l2_norm();
    if total == 0.0 {
        return 0.0;
    }
    (f.l2_norm_masked(&mask) / total).powi(2)
}

/// Default boundary-mass threshold above which periodized transforms warn.
pub const DEFAULT_BOUNDARY_THRESHOLD: f64 = 1e-3;

/// Beurling transform, the multiplier mapping `dbar phi` to `d phi`, with the zero mode nulled.
pub fn beurling_apply(f: &GriddedFunction, threshold: f64) -> Periodized {
    periodized(f, threshold, |x, y| {
        let den = Complex64::new(x, y);
        if den.norm() == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(x, -y) / den
        }
    })
}

/// Spectral `dbar = (d_x + i d_y) / 2` on the periodized box.
pub fn dbar_apply(f: &GriddedFunction, threshold: f64) -> Periodized {
    periodized(f, threshold, |x, y| Complex64::new(0.0, 0.5) * Complex64::new(x, y))
}

/// Spectral `d = (d_x - i d_y) / 2` on the periodized box.
pub fn d_apply(f: &GriddedFunction, threshold: f64) -> Periodized {
    periodized(f, threshold, |x, y| Complex64::new(0.0, 0.5) * Complex64::new(x, -y))
}

/// Applies the Fourier multiplier `symbol(xi_1, xi_2)` on the periodic `N x N` box.
/// Nyquist modes are dropped so real inputs stay real under real-symmetric symbols.
fn periodized(
    f: &GriddedFunction,
    threshold: f64,
    symbol: impl Fn(f64, f64) -> Complex64,
) -> Periodized {
    let d = *f.domain();
    let n = d.points_per_side();
    let period = 2.0 * d.half_width();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = f.values().to_vec();
    fft2_rows_cols(&mut buf, n, &*fwd);
    for j in 0..n {
        for i in 0..n {
            let freq = |m: usize| {
                let s = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
                2.0 * PI * s / period
            };
            let v = if i == n / 2 || j == n / 2 {
                Complex64::new(0.0, 0.0)
            } else {
                symbol(freq(i), freq(j))
            };
            buf[j * n + i] *= v;
        }
    }
    fft2_rows_cols(&mut buf, n, &*inv);
    let norm = 1.0 / (n * n) as f64;
    buf.iter_mut().for_each(|v| *v *= norm);
    let boundary_fraction = boundary_mass_fraction(f);
    Periodized {
        value: GriddedFunction::new(d, buf).expect("finite transform"),
        boundary_fraction,
        aliasing_warning: boundary_fraction > threshold,
    }
}

fn fft2_rows_cols(buf: &mut [Complex64], n: usize, fft: &dyn rustfft::Fft<f64>) {
    fft.process(buf);
    transpose(buf, n);
    fft.process(buf);
    transpose(buf, n);
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for j in 0..n {
        for i in j + 1..n {
            buf.swap(j * n + i, i * n + j);
        }
    }
}

/// Fourier transform `(F f)(k) = (1/pi) sum f(z) e_{-k}(z) h^2` on the dual grid
/// `f.domain().dual(oversampling)`.
///
/// With `oversampling = 1` the map is exactly unitary between the two grids.
pub fn fourier(f: &GriddedFunction, oversampling: usize) -> Result<GriddedFunction> {
    let d = *f.domain();
    let dual = d.dual(oversampling)?;
    let values = separable_dft(f.values(), &d, &dual, -1.0, d.weight() / PI);
    GriddedFunction::new(dual, values)
}

/// Inverse transform `f(z) = (1/pi) sum g(k) e_k(z) dk^2` from the dual grid back to `target`.
pub fn fourier_inv(g: &GriddedFunction, target: &Domain) -> Result<GriddedFunction> {
    let dual = *g.domain();
    let expected = target.dual(dual.points_per_side() / target.points_per_side())?;
    if dual.points_per_side() % target.points_per_side() != 0
        || (expected.half_width() - dual.half_width()).abs() > 1e-12 * dual.half_width()
    {
        return Err(Error::DomainMismatch("samples do not live on the dual grid of the target".into()));
    }
    let values = separable_dft(g.values(), &dual, target, 1.0, dual.weight() / PI);
    GriddedFunction::new(*target, values)
}

/// Evaluates `scale * sum_z f(z) exp(sign * 2i (k_1 x - k_2 y))` for all `k` on `out`.
///
/// The phase factorizes over the axes, so the sum is two passes of one-dimensional
/// transforms. When the product of spacings satisfies `2 h dk = 2 pi / M` the passes are
/// FFTs of length `M`; otherwise they fall back to direct summation.
fn separable_dft(values: &[Complex64], src: &Domain, out: &Domain, sign: f64, scale: f64) -> Vec<Complex64> {
    let ns = src.points_per_side();
    let no = out.points_per_side();
    let xs: Vec<f64> = (0..ns).map(|i| src.coordinate(i)).collect();
    let ks: Vec<f64> = (0..no).map(|i| out.coordinate(i)).collect();
    // Along the real axis the phase is sign * 2 k_1 x, along the imaginary axis -sign * 2 k_2 y.
    let axis = |s: f64| -> Vec<Complex64> {
        let mut m = vec![Complex64::new(0.0, 0.0); no * ns];
        for (p, &k) in ks.iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                m[p * ns + i] = Complex64::from_polar(1.0, s * 2.0 * k * x);
            }
        }
        m
    };
    let ax = axis(sign);
    let ay = axis(-sign);
    // First pass along rows (real axis): tmp[j][p] = sum_i f[j][i] ax[p][i].
    let mut tmp = vec![Complex64::new(0.0, 0.0); ns * no];
    for j in 0..ns {
        let row = &values[j * ns..(j + 1) * ns];
        for p in 0..no {
            let coeffs = &ax[p * ns..(p + 1) * ns];
            tmp[j * no + p] = row.iter().zip(coeffs).map(|(a, b)| a * b).sum();
        }
    }
    // Second pass along columns (imaginary axis).
    let mut res = vec![Complex64::new(0.0, 0.0); no * no];
    for q in 0..no {
        let coeffs = &ay[q * ns..(q + 1) * ns];
        for p in 0..no {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..ns {
                acc += tmp[j * no + p] * coeffs[j];
            }
            res[q * no + p] = acc * scale;
        }
    }
    res
}

/// Evaluates `(F f)(k)` at a single spectral parameter by direct summation.
pub fn fourier_at(f: &GriddedFunction, k: Complex64) -> Complex64 {
    let d = f.domain();
    f.values()
        .iter()
        .zip(d.nodes())
        .map(|(v, z)| v * crate::grid::plane_wave(-k, z))
        .sum::<Complex64>()
        * (d.weight() / PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_domain, relative_l2_error};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rho2(z: Complex64) -> f64 {
        1.0 + z.norm_sqr()
    }

    #[test]
    fn cauchy_of_zero_is_zero() {
        let d = make_domain(5.0, 12).unwrap();
        assert!(cauchy_apply(&d.zeros()).max_abs() == 0.0);
    }

    #[test]
    fn conjugate_transform_is_conjugated_cauchy() {
        let d = make_domain(6.0, 16).unwrap();
        let f = d.sample(|z| z * (-z.norm_sqr()).exp() + c(0.3, 0.1));
        let lhs = cauchy_conj_apply(&f);
        let rhs = cauchy_apply(&f.conj()).conj();
        assert!((&lhs - &rhs).max_abs() < 1e-13);
    }

    #[test]
    fn dense_matrix_agrees_with_fast_path() {
        let d = make_domain(6.0, 12).unwrap();
        for rule in [CauchyRule::BandLimited, CauchyRule::Midpoint, CauchyRule::NearFieldExact] {
            let m = CauchyMatrix::new(&d, rule);
            let f = d.sample(|z| (1.0 + z.norm_sqr()).powi(-2) * z.conj());
            let fast = m.apply(&f).unwrap();
            let dense = m.dense();
            let slow: Vec<Complex64> = (0..d.len())
                .map(|a| (0..d.len()).map(|b| dense[(a, b)] * f.values()[b]).sum())
                .collect();
            let slow = GriddedFunction::new(d, slow).unwrap();
            assert!((&fast - &slow).l2_norm() < 1e-10 * slow.l2_norm());
            assert!((0..d.len()).all(|a| m.entry(a, a) == c(0.0, 0.0) || rule == CauchyRule::BandLimited));
            assert_eq!(m.near_field_exact(), rule == CauchyRule::NearFieldExact);
        }
    }

    #[test]
    fn band_limited_cauchy_reproduces_closed_form_on_fine_grid() {
        // C[rho^-4] = conj(z) rho^-2; at h = 5/12 the quadrature error is far below truncation.
        let d = make_domain(10.0, 48).unwrap();
        let f = d.sample_real(|z| rho2(z).powi(-2));
        let exact = d.sample(|z| z.conj() / rho2(z));
        let err = relative_l2_error(&cauchy_apply(&f), &exact, &d.disc_mask(5.0)).unwrap();
        assert!(err < 2e-3, "{err}");
    }

    #[test]
    fn beurling_is_isometric_on_gaussians() {
        let d = make_domain(8.0, 64).unwrap();
        let f = d.sample_real(|z| (-(z - c(0.3, -0.2)).norm_sqr()).exp());
        let s = beurling_apply(&f, DEFAULT_BOUNDARY_THRESHOLD);
        assert!(!s.aliasing_warning);
        // The zero mode carries the Gaussian's mean; compare on the mean-free part.
        let mean = f.values().iter().sum::<Complex64>() / d.len() as f64;
        let centred = f.map(|v| v - mean);
        assert!((s.value.l2_norm() / centred.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn beurling_maps_dbar_to_d() {
        let d = make_domain(20.0, 96).unwrap();
        let dbar_phi = d.sample(|z| -z / rho2(z).powi(2));
        let d_phi = d.sample(|z| -z.conj() / rho2(z).powi(2));
        let s = beurling_apply(&dbar_phi, 1.0);
        let err = relative_l2_error(&s.value, &d_phi, &d.disc_mask(10.0)).unwrap();
        assert!(err < 0.02, "{err}");
    }

    #[test]
    fn spectral_derivatives() {
        let d = make_domain(20.0, 96).unwrap();
        let phi = d.sample_real(|z| 1.0 / rho2(z));
        let dphi = d_apply(&phi, 1.0).value;
        let exact = d.sample(|z| -z.conj() / rho2(z).powi(2));
        assert!(relative_l2_error(&dphi, &exact, &d.disc_mask(10.0)).unwrap() < 0.01);

        let window = |z: Complex64| (-(z.norm_sqr() / 36.0).powi(2)).exp();
        let g = d.sample(|z| z.conj() * window(z));
        let dg = dbar_apply(&g, DEFAULT_BOUNDARY_THRESHOLD).value;
        // dbar(conj(z) w) = w + conj(z) dbar w, with dbar w = -2 w z |z|^2 / 36^2.
        let exact = d.sample(|z| {
            let w = window(z);
            w - z.conj() * z * w * 2.0 * z.norm_sqr() / 1296.0
        });
        let err = relative_l2_error(&dg, &exact, &d.disc_mask(6.0)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dbar_inverts_cauchy() {
        let d = make_domain(20.0, 48).unwrap();
        let f = d.sample_real(|z| rho2(z).powi(-2));
        let back = dbar_apply(&cauchy_apply(&f), 1.0).value;
        // The transform decays like 1/z, so periodization pollutes the outer region.
        let err = relative_l2_error(&back, &f, &d.disc_mask(5.0)).unwrap();
        assert!(err < 0.01, "{err}");
    }

    #[test]
    fn boundary_warning_fires_for_wide_functions() {
        let d = make_domain(4.0, 16).unwrap();
        let f = d.sample_real(|_| 1.0);
        assert!(beurling_apply(&f, DEFAULT_BOUNDARY_THRESHOLD).aliasing_warning);
    }

    #[test]
    fn fourier_of_gaussian() {
        let d = make_domain(20.0, 48).unwrap();
        let f = d.sample_real(|z| (-z.norm_sqr()).exp());
        let ff = fourier(&f, 1).unwrap();
        let dual = *ff.domain();
        for (k, v) in dual.nodes().zip(ff.values()) {
            if k.norm() <= 1.0 {
                assert!((v - c((-k.norm_sqr()).exp(), 0.0)).norm() < 1e-2);
            }
        }
        assert!(fourier(&d.zeros(), 1).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn fourier_is_unitary_and_invertible() {
        let d = make_domain(5.0, 16).unwrap();
        let f = d.sample(|z| (-(z - c(1.0, 0.5)).norm_sqr()).exp() * (z * c(0.0, 2.0)).exp());
        let ff = fourier(&f, 1).unwrap();
        assert!((ff.l2_norm() / f.l2_norm() - 1.0).abs() < 1e-12);
        let back = fourier_inv(&ff, &d).unwrap();
        assert!((&back - &f).l2_norm() < 1e-12 * f.l2_norm());
        let k = ff.domain().node(37);
        assert!((fourier_at(&f, k) - ff.values()[37]).norm() < 1e-12);
    }
}
