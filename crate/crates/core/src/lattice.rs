//! Band-limited lattice discretization of the Cauchy kernels.
//!
//! A kernel `K(z - w)` acting on grid samples is replaced by lattice weights
//! `w(n) = (h^2 / 4 pi^2) * integral over the Nyquist box of K^(xi) exp(i xi . n h)`,
//! i.e. the exact action of the kernel on the sinc interpolant of the samples,
//! resampled on the grid. For `K = 1/(pi z)` the symbol is `-2i / (xi_1 + i xi_2)`,
//! for `K = 1/(pi conj z)` it is `-2i / (xi_1 - i xi_2)`. Multiplying a kernel by
//! the plane wave `e_q(z - w)` shifts its symbol by `(2 Re q, -2 Im q)`; the
//! shifted box is integrated exactly, so twisted kernels such as
//! `e_{-k} C-bar e_k` never see grid-sampled oscillations.
//!
//! Box integrals `int exp(i eta . n) / (eta_1 +- i eta_2) d eta` are evaluated in
//! polar coordinates about the pole, where the `1/r` singularity cancels against
//! the Jacobian and the radial integral is elementary.

use std::f64::consts::PI;
use std::sync::Arc;

use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::grid::Domain;
use crate::quadrature::gauss_legendre;

/// The two singular kernels realized on the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `1 / (pi (z - w))`, the solid Cauchy transform.
    Cauchy,
    /// `1 / (pi conj(z - w))`, the conjugate Cauchy transform.
    ConjugateCauchy,
}

/// How lattice weights for a singular kernel are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CauchyRule {
    /// Exact action on the sinc interpolant of the samples.
    #[default]
    BandLimited,
    /// Point evaluation `h^2 K(z_a - z_b)` off the diagonal, zero on it.
    Midpoint,
    /// Midpoint weights with exact cell integrals within two cells of the diagonal.
    NearFieldExact,
}

/// A translation-invariant lattice operator `(W f)(z_a) = sum_b w(z_a - z_b) f(z_b)`.
#[derive(Clone)]
pub struct LatticeKernel {
    domain: Domain,
    kind: KernelKind,
    twist: Complex64,
    rule: CauchyRule,
    /// Weights indexed by offset `(p, q)`, `p, q` in `-(n-1)..=(n-1)`.
    weights: Vec<Complex64>,
    /// DFT of the weights embedded in a `2n x 2n` periodic array.
    spectrum: Vec<Complex64>,
    fft: Arc<Fft2>,
}

impl std::fmt::Debug for LatticeKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatticeKernel")
            .field("domain", &self.domain)
            .field("kind", &self.kind)
            .field("twist", &self.twist)
            .field("rule", &self.rule)
            .finish()
    }
}

impl LatticeKernel {
    /// Band-limited lattice weights for `kind` multiplied by the plane wave `e_twist(z - w)`.
    pub fn new(domain: &Domain, kind: KernelKind, twist: Complex64) -> Self {
        Self::with_rule(domain, kind, twist, CauchyRule::BandLimited)
    }

    /// Lattice weights for `kind` twisted by `e_twist(z - w)` under the given rule.
    pub fn with_rule(domain: &Domain, kind: KernelKind, twist: Complex64, rule: CauchyRule) -> Self {
        let weights = match rule {
            CauchyRule::BandLimited => band_limited_weights(domain, kind, twist),
            CauchyRule::Midpoint | CauchyRule::NearFieldExact => {
                point_weights(domain, kind, twist, rule == CauchyRule::NearFieldExact)
            }
        };
        let n = domain.points_per_side();
        let fft = Arc::new(Fft2::new(2 * n));
        let spectrum = periodic_spectrum(&weights, n, &fft);
        Self {
            domain: *domain,
            kind,
            twist,
            rule,
            weights,
            spectrum,
            fft,
        }
    }

    /// Rule that produced the weights.
    pub fn rule(&self) -> CauchyRule {
        self.rule
    }

    /// The untwisted solid Cauchy transform.
    pub fn cauchy(domain: &Domain) -> Self {
        Self::new(domain, KernelKind::Cauchy, Complex64::new(0.0, 0.0))
    }

    /// The untwisted conjugate Cauchy transform.
    pub fn conjugate_cauchy(domain: &Domain) -> Self {
        Self::new(domain, KernelKind::ConjugateCauchy, Complex64::new(0.0, 0.0))
    }

    /// Domain the kernel acts on.
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Kernel family.
    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Plane-wave twist `q` of the kernel `e_q(z - w) K(z - w)`.
    pub fn twist(&self) -> Complex64 {
        self.twist
    }

    /// Weight for the lattice offset `(p, q)` in cells.
    pub fn weight(&self, p: isize, q: isize) -> Complex64 {
        let n = self.domain.points_per_side() as isize;
        let side = 2 * n - 1;
        self.weights[((q + n - 1) * side + (p + n - 1)) as usize]
    }

    /// Matrix entry between flat node indices `a` (row) and `b` (column).
    pub fn entry(&self, a: usize, b: usize) -> Complex64 {
        let (ia, ja) = self.domain.split_index(a);
        let (ib, jb) = self.domain.split_index(b);
        self.weight(ia as isize - ib as isize, ja as isize - jb as isize)
    }

    /// Applies the kernel to samples in node order using FFT convolution.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
        self.apply_into(x, &mut out);
        out
    }

    /// FFT convolution writing into `out`.
    pub fn apply_into(&self, x: &[Complex64], out: &mut [Complex64]) {
        let n = self.domain.points_per_side();
        let m = 2 * n;
        assert_eq!(x.len(), n * n, "sample vector does not match the lattice");
        let mut buf = vec![Complex64::new(0.0, 0.0); m * m];
        for j in 0..n {
            buf[j * m..j * m + n].copy_from_slice(&x[j * n..(j + 1) * n]);
        }
        self.fft.forward(&mut buf, n);
        for (b, s) in buf.iter_mut().zip(&self.spectrum) {
            *b *= s;
        }
        self.fft.inverse(&mut buf, n);
        let norm = 1.0 / (m * m) as f64;
        for j in 0..n {
            for i in 0..n {
                out[j * n + i] = buf[j * m + i] * norm;
            }
        }
    }

    /// Dense `N^2 x N^2` matrix of the kernel.
    pub fn dense(&self) -> Mat<Complex64> {
        let len = self.domain.len();
        Mat::from_fn(len, len, |a, b| self.entry(a, b))
    }
}

fn band_limited_weights(domain: &Domain, kind: KernelKind, twist: Complex64) -> Vec<Complex64> {
    let n = domain.points_per_side();
    let h = domain.spacing();
    let side = 2 * n - 1;
    let shift = [2.0 * h * twist.re, -2.0 * h * twist.im];
    let sign = match kind {
        KernelKind::Cauchy => 1.0,
        KernelKind::ConjugateCauchy => -1.0,
    };
    let bx = [-PI - shift[0], PI - shift[0], -PI - shift[1], PI - shift[1]];
    let raw = box_integrals(bx, sign, n - 1);
    let scale = Complex64::new(0.0, -2.0 * h / (4.0 * PI * PI));
    raw.iter()
        .enumerate()
        .map(|(idx, &v)| {
            let p = (idx % side) as f64 - (n - 1) as f64;
            let q = (idx / side) as f64 - (n - 1) as f64;
            let phase = Complex64::from_polar(1.0, shift[0] * p + shift[1] * q);
            scale * phase * v
        })
        .collect()
}

fn point_weights(domain: &Domain, kind: KernelKind, twist: Complex64, near_field: bool) -> Vec<Complex64> {
    let n = domain.points_per_side() as isize;
    let h = domain.spacing();
    let mut out = Vec::with_capacity(((2 * n - 1) * (2 * n - 1)) as usize);
    for q in -(n - 1)..=(n - 1) {
        for p in -(n - 1)..=(n - 1) {
            let d = Complex64::new(p as f64 * h, q as f64 * h);
            let local = if p == 0 && q == 0 {
                Complex64::new(0.0, 0.0)
            } else if near_field && p.abs() <= 2 && q.abs() <= 2 {
                let half = 0.5 * h;
                cell_integral(d.re - half, d.re + half, d.im - half, d.im + half) / PI
            } else {
                h * h / (PI * d)
            };
            let local = match kind {
                KernelKind::Cauchy => local,
                KernelKind::ConjugateCauchy => local.conj(),
            };
            out.push(crate::grid::plane_wave(twist, d) * local);
        }
    }
    out
}

/// Exact integral of `1/w` over the rectangle `[x0, x1] x [y0, y1]` in the `w` plane.
///
/// Uses the antiderivative `-i (w log w - w)`, whose mixed derivative is `1/w`. The
/// principal logarithm is continuous on the closed right half-plane, so rectangles are
/// split at the imaginary axis and the left part is reflected through the origin.
pub fn cell_integral(x0: f64, x1: f64, y0: f64, y1: f64) -> Complex64 {
    if x0 < 0.0 {
        let left = -cell_integral((-x1).max(0.0), -x0, -y1, -y0);
        return if x1 > 0.0 { left + cell_integral(0.0, x1, y0, y1) } else { left };
    }
    let g = |x: f64, y: f64| {
        let w = Complex64::new(x, y);
        if w.norm() == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(0.0, -1.0) * (w * w.ln() - w)
        }
    };
    g(x1, y1) - g(x0, y1) - g(x1, y0) + g(x0, y0)
}

/// Computes `int_box exp(i eta . (p, q)) / (eta_1 + sign * i eta_2) d eta` for all
/// offsets `|p|, |q| <= reach`, with the box given as `[x0, x1, y0, y1]`.
fn box_integrals(bx: [f64; 4], sign: f64, reach: usize) -> Vec<Complex64> {
    let side = 2 * reach + 1;
    let nodes = polar_nodes(bx, sign, reach);
    let offsets: Vec<f64> = (0..side).map(|i| i as f64 - reach as f64).collect();

    let rows: Vec<Vec<Complex64>> = (0..side)
        .into_par_iter()
        .map(|qi| {
            let q = offsets[qi];
            let mut row = vec![Complex64::new(0.0, 0.0); side];
            for node in &nodes {
                // Phase factors depending on q only.
                let mid_q = Complex64::from_polar(1.0, q * node.mid * node.sin);
                let half_q = Complex64::from_polar(1.0, q * node.half * node.sin);
                for (pi, out) in row.iter_mut().enumerate() {
                    let p = offsets[pi];
                    let rho = p * node.cos + q * node.sin;
                    let y = rho * node.half;
                    let sinc = if y.abs() < 1e-6 {
                        1.0 - y * y / 6.0
                    } else {
                        (node.half_p[pi] * half_q).im / y
                    };
                    *out += node.factor * node.mid_p[pi] * mid_q * sinc;
                }
            }
            row
        })
        .collect();
    rows.into_iter().flatten().collect()
}

/// One angular quadrature node with its radial segment `[mid - half, mid + half]`.
struct PolarNode {
    cos: f64,
    sin: f64,
    mid: f64,
    half: f64,
    /// Angular weight times `exp(-sign i theta)` times the segment length.
    factor: Complex64,
    /// `exp(i p mid cos)` for each offset `p`.
    mid_p: Vec<Complex64>,
    /// `exp(i p half cos)` for each offset `p`.
    half_p: Vec<Complex64>,
}

fn polar_nodes(bx: [f64; 4], sign: f64, reach: usize) -> Vec<PolarNode> {
    let nmax = std::f64::consts::SQRT_2 * reach as f64 + 1.0;
    let reach = reach as isize;
    let corners = [(bx[0], bx[2]), (bx[1], bx[2]), (bx[1], bx[3]), (bx[0], bx[3])];
    let mut angles: Vec<f64> = corners
        .iter()
        .map(|&(x, y)| y.atan2(x).rem_euclid(2.0 * PI))
        .collect();
    angles.push(0.0);
    angles.push(2.0 * PI);
    angles.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    angles.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let mut nodes = Vec::new();
    for w in angles.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let Some((_, r_out)) = ray_segment(bx, 0.5 * (t0 + t1)) else {
            continue;
        };
        let r_max = [t0, t1, 0.5 * (t0 + t1)]
            .iter()
            .filter_map(|&t| ray_segment(bx, t).map(|s| s.1))
            .fold(r_out, f64::max);
        let phase_span = nmax * r_max * (t1 - t0);
        let count = (0.75 * phase_span).ceil() as usize + 24;
        let rule = gauss_legendre(count);
        let half_t = 0.5 * (t1 - t0);
        let mid_t = 0.5 * (t1 + t0);
        for &(x, wt) in rule.iter() {
            let theta = mid_t + half_t * x;
            let Some((r0, r1)) = ray_segment(bx, theta) else {
                continue;
            };
            let (s, c) = theta.sin_cos();
            let mid = 0.5 * (r0 + r1);
            let half = 0.5 * (r1 - r0);
            let factor = Complex64::from_polar(wt * half_t * 2.0 * half, -sign * theta);
            let mid_p = (-reach..=reach)
                .map(|p| Complex64::from_polar(1.0, p as f64 * mid * c))
                .collect();
            let half_p = (-reach..=reach)
                .map(|p| Complex64::from_polar(1.0, p as f64 * half * c))
                .collect();
            nodes.push(PolarNode {
                cos: c,
                sin: s,
                mid,
                half,
                factor,
                mid_p,
                half_p,
            });
        }
    }
    nodes
}

/// Radial interval `[r_in, r_out]` of the ray from the origin at angle `theta` inside the box.
fn ray_segment(bx: [f64; 4], theta: f64) -> Option<(f64, f64)> {
    let (s, c) = theta.sin_cos();
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for (p0, p1, d) in [(bx[0], bx[1], c), (bx[2], bx[3], s)] {
        if d.abs() < 1e-300 {
            if !(p0 <= 0.0 && 0.0 <= p1) {
                return None;
            }
            continue;
        }
        let (ta, tb) = (p0 / d, p1 / d);
        lo = lo.max(ta.min(tb));
        hi = hi.min(ta.max(tb));
    }
    (hi > lo).then_some((lo, hi))
}

fn periodic_spectrum(weights: &[Complex64], n: usize, fft: &Fft2) -> Vec<Complex64> {
    let m = 2 * n;
    let side = 2 * n - 1;
    let mut buf = vec![Complex64::new(0.0, 0.0); m * m];
    for q in 0..side {
        for p in 0..side {
            let dp = p as isize - (n as isize - 1);
            let dq = q as isize - (n as isize - 1);
            let i = dp.rem_euclid(m as isize) as usize;
            let j = dq.rem_euclid(m as isize) as usize;
            buf[j * m + i] = weights[q * side + p];
        }
    }
    fft.forward(&mut buf, m);
    buf
}

/// Two-dimensional FFT on a square row-major array.
pub(crate) struct Fft2 {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    /// Forward transform; only the first `live_rows` rows may be nonzero on input.
    pub(crate) fn forward(&self, buf: &mut [Complex64], live_rows: usize) {
        self.run(buf, live_rows, &self.forward, false);
    }

    /// Inverse transform (unnormalized); only the first `live_rows` rows are needed on output.
    pub(crate) fn inverse(&self, buf: &mut [Complex64], live_rows: usize) {
        self.run(buf, live_rows, &self.inverse, true);
    }

    fn run(&self, buf: &mut [Complex64], live_rows: usize, fft: &Arc<dyn Fft<f64>>, rows_last: bool) {
        let m = self.size;
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        if !rows_last {
            fft.process_with_scratch(&mut buf[..live_rows * m], &mut scratch);
        }
        transpose_square(buf, m);
        fft.process_with_scratch(buf, &mut scratch);
        transpose_square(buf, m);
        if rows_last {
            fft.process_with_scratch(&mut buf[..live_rows * m], &mut scratch);
        }
    }
}

fn transpose_square(buf: &mut [Complex64], m: usize) {
    for j in 0..m {
        for i in j + 1..m {
            buf.swap(j * m + i, i * m + j);
        }
    }
}
