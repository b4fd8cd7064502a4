//! The scattering operator `S_{k,u}`, the soliton family `T(kappa)`, its perturbations,
//! kernel mixed norms and the admissible-pair predicate.
//!
//! The operator is realized as
//! `S_{k,u} = -(1/4) C diag(u) G_k diag(conj u)` with `G_k = e_{-k} C-bar e_k`,
//! whose kernel `e_{-k}(z - w) / (pi conj(z - w))` is discretized directly as a twisted
//! lattice kernel. It factors as `S = W V` with `W = (1/2) C diag(u)` and
//! `V = -(1/2) G_k diag(conj u)`, so that `m_2 = V m_1` and `m_1 = 1 + W m_2`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use faer::Mat;
use num_complex::Complex64;
use num_rational::Ratio;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Domain, GriddedFunction};
use crate::lattice::{CauchyRule, KernelKind, LatticeKernel};

/// A dense matrix acting on grid samples, quadrature weights folded in.
#[derive(Clone)]
pub struct DenseOperator {
    domain: Domain,
    matrix: Mat<Complex64>,
    k: Complex64,
    label: String,
}

impl std::fmt::Debug for DenseOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseOperator")
            .field("domain", &self.domain)
            .field("k", &self.k)
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

impl DenseOperator {
    /// Wraps a square matrix of size `N^2` after checking that its entries are finite.
    pub fn new(domain: Domain, matrix: Mat<Complex64>, k: Complex64, label: impl Into<String>) -> Result<Self> {
        let len = domain.len();
        if matrix.nrows() != len || matrix.ncols() != len {
            return Err(Error::DomainMismatch(format!(
                "matrix is {}x{}, domain has {len} nodes",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let label = label.into();
        for j in 0..len {
            for i in 0..len {
                let v = matrix[(i, j)];
                if !(v.re.is_finite() && v.im.is_finite()) {
                    return Err(Error::NonFinite(format!("operator {label}")));
                }
            }
        }
        Ok(Self { domain, matrix, k, label })
    }

    /// Domain the operator acts on.
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Underlying matrix.
    pub fn matrix(&self) -> &Mat<Complex64> {
        &self.matrix
    }

    /// Consumes the operator and returns its matrix.
    pub fn into_matrix(self) -> Mat<Complex64> {
        self.matrix
    }

    /// Spectral parameter the operator was assembled at.
    pub fn k(&self) -> Complex64 {
        self.k
    }

    /// Human-readable tag.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// Matrix-vector product with samples on the same domain.
    pub fn apply(&self, f: &GriddedFunction) -> Result<GriddedFunction> {
        if f.domain() != &self.domain {
            return Err(Error::DomainMismatch("operator and function domains differ".into()));
        }
        let x = f.values();
        let len = self.domain.len();
        let mut out = vec![Complex64::new(0.0, 0.0); len];
        for (j, xj) in x.iter().enumerate() {
            let col = self.matrix.col(j);
            for (o, a) in out.iter_mut().zip(col.iter()) {
                *o += a * xj;
            }
        }
        GriddedFunction::new(self.domain, out)
    }

    /// Action of the transpose under the bilinear pairing, `<T' f, g> = <f, T g>`.
    pub fn apply_transpose(&self, f: &GriddedFunction) -> Result<GriddedFunction> {
        if f.domain() != &self.domain {
            return Err(Error::DomainMismatch("operator and function domains differ".into()));
        }
        let out = (0..self.domain.len())
            .map(|j| self.matrix.col(j).iter().zip(f.values()).map(|(a, x)| a * x).sum())
            .collect();
        GriddedFunction::new(self.domain, out)
    }

    /// Matrix trace.
    pub fn trace(&self) -> Complex64 {
        (0..self.domain.len()).map(|i| self.matrix[(i, i)]).sum()
    }

    /// Writes `<stem>.bin` (row-major little-endian pairs of `f64`) and `<stem>.hdr`.
    pub fn export(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let bin = stem.with_extension("bin");
        let hdr = stem.with_extension("hdr");
        let len = self.domain.len();
        let mut bytes = Vec::with_capacity(len * len * 16);
        for i in 0..len {
            for j in 0..len {
                let v = self.matrix[(i, j)];
                bytes.extend_from_slice(&v.re.to_le_bytes());
                bytes.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        std::fs::write(&bin, bytes)?;
        let mut text = String::new();
        let _ = writeln!(text, "L = {}", self.domain.half_width());
        let _ = writeln!(text, "N = {}", self.domain.points_per_side());
        let _ = writeln!(text, "k = {} {}", self.k.re, self.k.im);
        let _ = writeln!(text, "label = {}", self.label);
        let _ = writeln!(text, "layout = row-major little-endian complex128 {len}x{len}");
        std::fs::File::create(&hdr)?.write_all(text.as_bytes())?;
        Ok((bin, hdr))
    }
}

/// Reads a matrix written by [`DenseOperator::export`].
pub fn import_matrix(bin: &Path, len: usize) -> Result<Mat<Complex64>> {
    let bytes = std::fs::read(bin)?;
    if bytes.len() != len * len * 16 {
        return Err(Error::Io(format!("expected {} bytes, found {}", len * len * 16, bytes.len())));
    }
    let read = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().expect("eight bytes"));
    Ok(Mat::from_fn(len, len, |i, j| {
        let off = (i * len + j) * 16;
        Complex64::new(read(off), read(off + 8))
    }))
}

/// Assembles scattering operators on one domain, reusing the untwisted Cauchy kernel.
#[derive(Clone)]
pub struct Assembler {
    domain: Domain,
    rule: CauchyRule,
    cauchy: LatticeKernel,
}

impl Assembler {
    /// Assembler using band-limited lattice weights.
    pub fn new(domain: &Domain) -> Self {
        Self::with_rule(domain, CauchyRule::BandLimited)
    }

    /// Assembler using the given lattice rule for both Cauchy kernels.
    pub fn with_rule(domain: &Domain, rule: CauchyRule) -> Self {
        Self {
            domain: *domain,
            rule,
            cauchy: LatticeKernel::with_rule(domain, KernelKind::Cauchy, Complex64::new(0.0, 0.0), rule),
        }
    }

    /// Domain of the assembled operators.
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Lattice rule in use.
    pub fn rule(&self) -> CauchyRule {
        self.rule
    }

    /// The untwisted Cauchy kernel.
    pub fn cauchy(&self) -> &LatticeKernel {
        &self.cauchy
    }

    /// The twisted conjugate kernel `G_k = e_{-k} C-bar e_k`.
    pub fn twisted_conjugate(&self, k: Complex64) -> LatticeKernel {
        LatticeKernel::with_rule(&self.domain, KernelKind::ConjugateCauchy, -k, self.rule)
    }

    /// The twisted Cauchy kernel `e_k C e_{-k}`.
    pub fn twisted_cauchy(&self, k: Complex64) -> LatticeKernel {
        LatticeKernel::with_rule(&self.domain, KernelKind::Cauchy, k, self.rule)
    }

    /// `-(1/4) C diag(a) G_k diag(conj b)`; `S_{k,u}` is the case `a = b = u`.
    pub fn bilinear_block(&self, k: Complex64, a: &GriddedFunction, b: &GriddedFunction) -> Result<Mat<Complex64>> {
        self.check(a)?;
        self.check(b)?;
        let g = self.twisted_conjugate(k);
        Ok(self.block_with(&g, a.values(), b.values()))
    }

    /// `-(1/4) C (a G_k (conj(b) f))` without assembling the matrix.
    pub fn apply_block(
        &self,
        k: Complex64,
        a: &GriddedFunction,
        b: &GriddedFunction,
        f: &GriddedFunction,
    ) -> Result<GriddedFunction> {
        self.check(a)?;
        self.check(b)?;
        self.check(f)?;
        let g = self.twisted_conjugate(k);
        let x: Vec<Complex64> = b.values().iter().zip(f.values()).map(|(b, f)| b.conj() * f).collect();
        let y: Vec<Complex64> = g.apply(&x).into_iter().zip(a.values()).map(|(v, a)| v * a * -0.25).collect();
        GriddedFunction::new(self.domain, self.cauchy.apply(&y))
    }

    fn block_with(&self, g: &LatticeKernel, a: &[Complex64], b: &[Complex64]) -> Mat<Complex64> {
        let len = self.domain.len();
        let columns: Vec<Vec<Complex64>> = (0..len)
            .into_par_iter()
            .map(|col| {
                let scale = b[col].conj() * -0.25;
                let mut v: Vec<Complex64> = (0..len).map(|row| g.entry(row, col) * a[row] * scale).collect();
                if scale == Complex64::new(0.0, 0.0) {
                    v.iter_mut().for_each(|x| *x = Complex64::new(0.0, 0.0));
                    return v;
                }
                let out = self.cauchy.apply(&v);
                v.copy_from_slice(&out);
                v
            })
            .collect();
        Mat::from_fn(len, len, |i, j| columns[j][i])
    }

    /// `S_{k,u}`.
    pub fn assemble_s(&self, k: Complex64, u: &GriddedFunction) -> Result<DenseOperator> {
        let m = self.bilinear_block(k, u, u)?;
        DenseOperator::new(self.domain, m, k, format!("S(k={k})"))
    }

    /// The soliton operator `T(kappa) = S_{k_0 + kappa, u_0}`.
    ///
    /// The plane-wave factors of `u_0` cancel against the twist, so `T` depends on
    /// `kappa` only and is assembled from `u = 2 rho^-2` at `k = kappa`.
    pub fn assemble_t(&self, kappa: Complex64) -> Result<DenseOperator> {
        let u = soliton_profile(&self.domain);
        let m = self.bilinear_block(kappa, &u, &u)?;
        DenseOperator::new(self.domain, m, kappa, format!("T(kappa={kappa})"))
    }

    /// `T(kappa, eps) = S_{k_0 + kappa, u_0 + eps phi}` with `phi` given in the frame where
    /// `k_0 = 0`, i.e. `phi` here is `e_{-k_0}` times the perturbation.
    pub fn assemble_t_perturbed(&self, kappa: Complex64, eps: f64, phi: &GriddedFunction) -> Result<DenseOperator> {
        check_compact_support(phi)?;
        let u0 = soliton_profile(&self.domain);
        let u = &u0 + &(phi * Complex64::new(eps, 0.0));
        let m = self.bilinear_block(kappa, &u, &u)?;
        DenseOperator::new(self.domain, m, kappa, format!("T(kappa={kappa}, eps={eps})"))
    }

    /// The three blocks of `T(kappa, eps) = B_0 + eps B_1 + eps^2 B_2`.
    pub fn perturbation_blocks(&self, kappa: Complex64, phi: &GriddedFunction) -> Result<[Mat<Complex64>; 3]> {
        check_compact_support(phi)?;
        self.check(phi)?;
        let u0 = soliton_profile(&self.domain);
        let g = self.twisted_conjugate(kappa);
        let b0 = self.block_with(&g, u0.values(), u0.values());
        let cross = self.block_with(&g, u0.values(), phi.values()) + self.block_with(&g, phi.values(), u0.values());
        let b2 = self.block_with(&g, phi.values(), phi.values());
        Ok([b0, cross, b2])
    }

    /// The factors `W = (1/2) C diag(u)` and `V = -(1/2) G_k diag(conj u)` with `S = W V`.
    pub fn factors(&self, k: Complex64, u: &GriddedFunction) -> Result<(Mat<Complex64>, Mat<Complex64>)> {
        self.check(u)?;
        let len = self.domain.len();
        let g = self.twisted_conjugate(k);
        let uv = u.values();
        let w = Mat::from_fn(len, len, |i, j| self.cauchy.entry(i, j) * uv[j] * 0.5);
        let v = Mat::from_fn(len, len, |i, j| g.entry(i, j) * uv[j].conj() * -0.5);
        Ok((w, v))
    }

    fn check(&self, f: &GriddedFunction) -> Result<()> {
        if f.domain() != &self.domain {
            return Err(Error::DomainMismatch("function and assembler domains differ".into()));
        }
        Ok(())
    }
}

/// `S_{k,u}` with band-limited weights.
pub fn assemble_s(k: Complex64, u: &GriddedFunction) -> Result<DenseOperator> {
    Assembler::new(u.domain()).assemble_s(k, u)
}

/// `T(kappa)` with band-limited weights.
pub fn assemble_t(domain: &Domain, kappa: Complex64) -> Result<DenseOperator> {
    Assembler::new(domain).assemble_t(kappa)
}

/// `T(kappa, eps)` with band-limited weights.
pub fn assemble_t_perturbed(kappa: Complex64, eps: f64, phi: &GriddedFunction) -> Result<DenseOperator> {
    Assembler::new(phi.domain()).assemble_t_perturbed(kappa, eps, phi)
}

/// The soliton potential in the frame `k_0 = 0`, `2 / (1 + |z|^2)`.
pub fn soliton_profile(d: &Domain) -> GriddedFunction {
    d.sample_real(|z| 2.0 / (1.0 + z.norm_sqr()))
}

/// Rejects perturbations that do not vanish on the outermost ring of cells.
pub fn check_compact_support(phi: &GriddedFunction) -> Result<()> {
    let scale = phi.max_abs();
    let mask = phi.domain().boundary_frame_mask();
    let edge = phi
        .values()
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v.norm())
        .fold(0.0, f64::max);
    if edge > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidParameter(format!(
            "perturbation reaches the boundary (|phi| = {edge:e} on the frame)"
        )));
    }
    Ok(())
}

/// Mixed norm `(int (int |a(z, w)|^q dw)^(p/q) dz)^(1/p)` of the point kernel
/// `a(z_i, w_j) = M_ij / h^2`.
pub fn mixed_norm(kernel: &DenseOperator, outer_p: f64, inner_q: f64) -> Result<f64> {
    mixed_norm_impl(kernel, outer_p, inner_q, false)
}

/// The same mixed norm for the adjoint kernel `a*(z, w) = conj(a(w, z))`.
pub fn mixed_norm_adjoint(kernel: &DenseOperator, outer_p: f64, inner_q: f64) -> Result<f64> {
    mixed_norm_impl(kernel, outer_p, inner_q, true)
}

fn mixed_norm_impl(kernel: &DenseOperator, p: f64, q: f64, adjoint: bool) -> Result<f64> {
    if !(p >= 1.0 && q >= 1.0) {
        return Err(Error::InvalidParameter(format!("mixed norm exponents must be >= 1, got ({p}, {q})")));
    }
    let w = kernel.domain().weight();
    let m = kernel.matrix();
    let len = kernel.domain().len();
    let entry = |z: usize, x: usize| if adjoint { m[(x, z)].norm() } else { m[(z, x)].norm() } / w;
    let outer: f64 = (0..len)
        .into_par_iter()
        .map(|z| {
            let inner: f64 = (0..len).map(|x| entry(z, x).powf(q)).sum::<f64>() * w;
            inner.powf(p / q)
        })
        .sum::<f64>()
        * w;
    Ok(outer.powf(1.0 / p))
}

/// Discrete `L^p` norm `(sum |f|^p h^2)^(1/p)`.
pub fn lp_norm(f: &GriddedFunction, p: f64) -> f64 {
    let w = f.domain().weight();
    (f.values().iter().map(|v| v.norm().powf(p)).sum::<f64>() * w).powf(1.0 / p)
}

/// An exponent pair `(p, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissiblePair {
    /// Lebesgue exponent of the solution space.
    pub p: f64,
    /// Lebesgue exponent of the potential.
    pub t: f64,
}

impl AdmissiblePair {
    /// Accepts the pair only if it is admissible.
    pub fn new(p: f64, t: f64) -> Result<Self> {
        if is_admissible(p, t) {
            Ok(Self { p, t })
        } else {
            Err(Error::InvalidParameter(format!("({p}, {t}) is not an admissible pair")))
        }
    }

    /// Conjugate exponent `t / (t - 1)`.
    pub fn t_dual(&self) -> f64 {
        self.t / (self.t - 1.0)
    }

    /// Conjugate exponent `p / (p - 1)`.
    pub fn p_dual(&self) -> f64 {
        self.p / (self.p - 1.0)
    }
}

/// True iff `p > 2`, `1 < t < 2`, `1/2 + 1/p < 1/t` and `1/p + 1/t > 1`.
pub fn is_admissible(p: f64, t: f64) -> bool {
    if !(p > 2.0 && t > 1.0 && t < 2.0) {
        return false;
    }
    let (x, y) = (1.0 / p, 1.0 / t);
    0.5 + x < y && x + y > 1.0
}

/// Exact admissibility in reciprocal coordinates `x = 1/p`, `y = 1/t`.
pub fn is_admissible_reciprocal(x: Ratio<i64>, y: Ratio<i64>) -> bool {
    let zero = Ratio::from_integer(0);
    let one = Ratio::from_integer(1);
    let half = Ratio::new(1, 2);
    x > zero && x < half && y > half && y < one && half + x < y && x + y > one
}

/// Hermitian defect and spectrum of `diag(rho)^-1 M diag(rho)` for a soliton operator at `kappa = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct HermitianCheck {
    /// `max |A - A^H| / max |A|`.
    pub relative_asymmetry: f64,
    /// Smallest eigenvalue of the Hermitian part.
    pub min_eigenvalue: f64,
    /// Largest eigenvalue of the Hermitian part.
    pub max_eigenvalue: f64,
    /// Eigenvalues of the Hermitian part in decreasing order.
    pub eigenvalues: Vec<f64>,
}

/// Checks that `rho^-1 T(0) rho` is Hermitian positive semidefinite.
pub fn hermitian_similarity_check(t0: &DenseOperator) -> Result<HermitianCheck> {
    let d = *t0.domain();
    let rho: Vec<f64> = d.nodes().map(crate::grid::rho).collect();
    let len = d.len();
    let m = t0.matrix();
    let a = Mat::from_fn(len, len, |i, j| m[(i, j)] * (rho[j] / rho[i]));
    let mut asym = 0.0f64;
    let mut scale = 0.0f64;
    for j in 0..len {
        for i in 0..len {
            asym = asym.max((a[(i, j)] - a[(j, i)].conj()).norm());
            scale = scale.max(a[(i, j)].norm());
        }
    }
    let herm = Mat::from_fn(len, len, |i, j| 0.5 * (a[(i, j)] + a[(j, i)].conj()));
    let mut eig: Vec<f64> = herm
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(HermitianCheck {
        relative_asymmetry: asym / scale,
        min_eigenvalue: *eig.last().expect("nonempty spectrum"),
        max_eigenvalue: eig[0],
        eigenvalues: eig,
    })
}

/// Largest singular value of a matrix.
pub fn spectral_norm(m: &Mat<Complex64>) -> Result<f64> {
    let s = m
        .singular_values()
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    Ok(s.into_iter().fold(0.0, f64::max))
}
