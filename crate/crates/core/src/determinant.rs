//! Renormalized determinants `Det(I - A) = det(I - A) exp(tr A)`, determinant scans over
//! rectangular grids of spectral parameters, zero detection with a local order fit, and
//! the logarithmic-derivative identity.

use std::f64::consts::PI;
use std::io::Write;

use faer::linalg::solvers::{DenseSolveCore, PartialPivLu, Solve};
use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Domain, GriddedFunction};
use crate::operator::{Assembler, DenseOperator};

/// A renormalized determinant stored in log-polar form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetValue {
    /// `Det(I - A)`.
    pub value: Complex64,
    /// `log |Det(I - A)|`.
    pub log_abs: f64,
    /// `arg Det(I - A)`, reduced to `(-pi, pi]`.
    pub arg: f64,
    /// Smallest pivot magnitude of the LU factorization of `I - A`.
    pub min_pivot: f64,
}

impl DetValue {
    fn from_log(log_abs: f64, arg: f64, min_pivot: f64) -> Self {
        let arg = wrap_angle(arg);
        Self {
            value: Complex64::from_polar(log_abs.exp(), arg),
            log_abs,
            arg,
            min_pivot,
        }
    }

    /// `log Det(I - A)` on the principal branch.
    pub fn log(&self) -> Complex64 {
        Complex64::new(self.log_abs, self.arg)
    }

    /// Modulus `|Det(I - A)|`.
    pub fn abs(&self) -> f64 {
        self.log_abs.exp()
    }
}

fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// LU factorization of `I - A` together with the renormalized determinant.
pub struct FactoredResolvent {
    lu: PartialPivLu<Complex64>,
    det: DetValue,
}

impl FactoredResolvent {
    /// Factors `I - A`.
    pub fn new(a: &Mat<Complex64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::InvalidParameter("determinant of a non-square matrix".into()));
        }
        let mut trace = Complex64::new(0.0, 0.0);
        let mut m = Mat::from_fn(n, n, |i, j| -a[(i, j)]);
        for i in 0..n {
            trace += a[(i, i)];
            m[(i, i)] += 1.0;
        }
        let lu = m.partial_piv_lu();
        let u = lu.U();
        let mut log_abs = 0.0;
        let mut arg = 0.0;
        let mut min_pivot = f64::INFINITY;
        for i in 0..n {
            let p = u[(i, i)];
            let mag = p.norm();
            if mag == 0.0 {
                // Later pivots are meaningless after an exact zero; the determinant is exactly 0.
                let det = DetValue::from_log(f64::NEG_INFINITY, 0.0, 0.0);
                return Ok(Self { lu, det });
            }
            min_pivot = min_pivot.min(mag);
            log_abs += mag.ln();
            arg += p.arg();
        }
        if permutation_is_odd(lu.P().arrays().0) {
            arg += PI;
        }
        log_abs += trace.re;
        arg += trace.im;
        // An exactly zero pivot gives log_abs = -inf, which is a legitimate (singular) value.
        if log_abs.is_nan() || log_abs == f64::INFINITY || (log_abs.is_finite() && !arg.is_finite()) {
            return Err(Error::NonFinite("renormalized determinant".into()));
        }
        let det = DetValue::from_log(log_abs, if arg.is_finite() { arg } else { 0.0 }, min_pivot);
        Ok(Self { lu, det })
    }

    /// The renormalized determinant.
    pub fn det(&self) -> DetValue {
        self.det
    }

    /// Solves `(I - A) x = b`.
    pub fn solve(&self, b: &[Complex64]) -> Result<Vec<Complex64>> {
        if self.det.min_pivot == 0.0 {
            return Err(Error::LinearAlgebra("I - A is exactly singular".into()));
        }
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.lu.solve_in_place(&mut rhs);
        let x: Vec<Complex64> = (0..b.len()).map(|i| rhs[(i, 0)]).collect();
        if x.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite("resolvent solve".into()));
        }
        Ok(x)
    }

    /// `(I - A)^-1` as a dense matrix.
    pub fn inverse(&self) -> Mat<Complex64> {
        self.lu.inverse()
    }
}

fn permutation_is_odd(fwd: &[usize]) -> bool {
    let mut seen = vec![false; fwd.len()];
    let mut transpositions = 0usize;
    for start in 0..fwd.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = fwd[i];
            len += 1;
        }
        transpositions += len - 1;
    }
    transpositions % 2 == 1
}

/// `Det(I - A)` for a dense matrix.
pub fn renormalized_det_matrix(a: &Mat<Complex64>) -> Result<DetValue> {
    Ok(FactoredResolvent::new(a)?.det())
}

/// `Det(I - A)` for an assembled operator.
pub fn renormalized_det(a: &DenseOperator) -> Result<DetValue> {
    renormalized_det_matrix(a.matrix())
}

/// A square grid of spectral parameters with an odd or even number of nodes per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KGrid {
    /// Centre of the square.
    pub center: Complex64,
    /// Half side length.
    pub half_width: f64,
    /// Nodes per side, at least two.
    pub nodes_per_side: usize,
}

impl KGrid {
    /// Validated grid.
    pub fn new(center: Complex64, half_width: f64, nodes_per_side: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) || nodes_per_side < 2 {
            return Err(Error::InvalidParameter(format!(
                "k-grid needs positive half-width and at least two nodes, got ({half_width}, {nodes_per_side})"
            )));
        }
        Ok(Self {
            center,
            half_width,
            nodes_per_side,
        })
    }

    /// Node spacing `h_k`.
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.nodes_per_side - 1) as f64
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.nodes_per_side * self.nodes_per_side
    }

    /// True when the grid has no nodes, which validation rules out.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node in column `i`, row `j`.
    pub fn node_at(&self, i: usize, j: usize) -> Complex64 {
        let h = self.spacing();
        self.center + Complex64::new(-self.half_width + i as f64 * h, -self.half_width + j as f64 * h)
    }

    /// Node by row-major index.
    pub fn node(&self, index: usize) -> Complex64 {
        self.node_at(index % self.nodes_per_side, index / self.nodes_per_side)
    }

    /// Nodes in row-major order (real part fastest).
    pub fn nodes(&self) -> impl Iterator<Item = Complex64> + '_ {
        (0..self.len()).map(|i| self.node(i))
    }

    /// Index of the node nearest to `k`.
    pub fn nearest(&self, k: Complex64) -> usize {
        let h = self.spacing();
        let clamp = |v: f64| (v / h).round().clamp(0.0, (self.nodes_per_side - 1) as f64) as usize;
        let off = k - self.center + Complex64::new(self.half_width, self.half_width);
        clamp(off.im) * self.nodes_per_side + clamp(off.re)
    }
}

/// One node of a scattering scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRecord {
    /// Spectral parameter.
    pub k: Complex64,
    /// Renormalized determinant, absent if the evaluation failed.
    pub det: Option<DetValue>,
    /// Scattering coefficient `s(k)`.
    pub s: Option<Complex64>,
    /// Scattering coefficient `r(k)`.
    pub r: Option<Complex64>,
    /// The coefficient `c(k)`.
    pub c: Option<Complex64>,
    /// Residual of the `dbar` equation for `log D`.
    pub dbar_residual: Option<f64>,
    /// Failure message for this node.
    pub error: Option<String>,
}

impl ScanRecord {
    /// Record holding a determinant only.
    pub fn with_det(k: Complex64, det: Result<DetValue>) -> Self {
        let (det, error) = match det {
            Ok(d) => (Some(d), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            k,
            det,
            s: None,
            r: None,
            c: None,
            dbar_residual: None,
            error,
        }
    }

    /// `|D(k)|`, or NaN when unavailable.
    pub fn abs_det(&self) -> f64 {
        self.det.map_or(f64::NAN, |d| d.abs())
    }
}

/// A located zero of the determinant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetZero {
    /// Grid node at which the candidate was detected.
    pub node: Complex64,
    /// Refined location.
    pub k: Complex64,
    /// `|D|` at the refined location.
    pub abs_det: f64,
    /// Fitted vanishing order.
    pub fitted_order: f64,
    /// Radii `[r_min, r_max]` used for the fit.
    pub fit_window: [f64; 2],
}

/// Determinant values and derived data over a k-grid.
#[derive(Debug, Clone, Serialize)]
pub struct ScatteringScan {
    /// Spatial grid of the potential.
    pub domain: Domain,
    /// Spectral grid.
    pub grid: KGrid,
    /// Description of the potential.
    pub potential: String,
    /// Records in grid order.
    pub records: Vec<ScanRecord>,
    /// Zeros found by [`find_zeros`].
    pub zeros: Vec<DetZero>,
}

impl ScatteringScan {
    /// Median of `|D|` over nodes where it is available.
    pub fn median_abs_det(&self) -> f64 {
        let mut v: Vec<f64> = self.records.iter().map(ScanRecord::abs_det).filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        }
    }

    /// Minimum of `|D|` and where it is attained.
    pub fn min_abs_det(&self) -> Option<(Complex64, f64)> {
        self.records
            .iter()
            .filter(|r| r.abs_det().is_finite())
            .map(|r| (r.k, r.abs_det()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Writes the scan as CSV, one row per node, each row tagged with `config_hash`.
    pub fn write_csv<W: Write>(&self, out: W, config_hash: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record([
            "re_k", "im_k", "re_D", "im_D", "abs_D", "re_s", "im_s", "re_r", "im_r", "re_c", "im_c",
            "dbar_residual", "config_hash",
        ])
        .map_err(csv_error)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
        for r in &self.records {
            let d = r.det.map(|d| d.value);
            w.write_record([
                format!("{:e}", r.k.re),
                format!("{:e}", r.k.im),
                opt(d.map(|v| v.re)),
                opt(d.map(|v| v.im)),
                opt(d.map(|v| v.norm())),
                opt(r.s.map(|v| v.re)),
                opt(r.s.map(|v| v.im)),
                opt(r.r.map(|v| v.re)),
                opt(r.r.map(|v| v.im)),
                opt(r.c.map(|v| v.re)),
                opt(r.c.map(|v| v.im)),
                opt(r.dbar_residual),
                config_hash.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the scan and its metadata as JSON.
    pub fn write_json<W: Write>(&self, out: W, config_hash: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Document<'a> {
            config_hash: &'a str,
            half_width: f64,
            points_per_side: usize,
            k_grid: &'a KGrid,
            potential: &'a str,
            zeros: &'a [DetZero],
            records: &'a [ScanRecord],
        }
        let doc = Document {
            config_hash,
            half_width: self.domain.half_width(),
            points_per_side: self.domain.points_per_side(),
            k_grid: &self.grid,
            potential: &self.potential,
            zeros: &self.zeros,
            records: &self.records,
        };
        serde_json::to_writer_pretty(out, &doc)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// `D(k, u)` for one spectral parameter.
pub fn det_at(asm: &Assembler, k: Complex64, u: &GriddedFunction) -> Result<DetValue> {
    renormalized_det(&asm.assemble_s(k, u)?)
}

/// Evaluates `D(k, u)` on every node of `grid`. Failures are recorded per node.
pub fn det_scan(asm: &Assembler, u: &GriddedFunction, grid: &KGrid, potential: &str) -> ScatteringScan {
    let records = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let k = grid.node(i);
            ScanRecord::with_det(k, det_at(asm, k, u))
        })
        .collect();
    ScatteringScan {
        domain: *asm.domain(),
        grid: *grid,
        potential: potential.to_string(),
        records,
        zeros: Vec::new(),
    }
}

/// Parameters of zero detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroSearch {
    /// Candidates satisfy `|D| < threshold * median |D|`.
    pub threshold: f64,
    /// Fit radii are `[inner, outer] * fit_unit`.
    pub fit_inner: f64,
    /// See `fit_inner`.
    pub fit_outer: f64,
    /// Length unit of the fit window as a fraction of the k-grid spacing.
    pub fit_unit_fraction: f64,
    /// Radii sampled in the fit window.
    pub fit_radii: usize,
}

impl Default for ZeroSearch {
    fn default() -> Self {
        Self {
            threshold: 1e-2,
            fit_inner: 2.0,
            fit_outer: 10.0,
            fit_unit_fraction: 0.01,
            fit_radii: 6,
        }
    }
}

/// Locates zeros of `D` in a scan and fits their order.
///
/// A candidate is a grid node that is a local minimum of `|D|` among its neighbours and
/// lies below the threshold. Its location is refined by a compass search on `|D|` and
/// the order is the least-squares slope of `log |D(k* + r e^{i theta}) - D(k*)|` against
/// `log r`, averaged over four directions. Subtracting `D(k*)` removes the floor that the
/// discretization leaves at a zero.
pub fn find_zeros(
    scan: &ScatteringScan,
    search: &ZeroSearch,
    eval: impl Fn(Complex64) -> Result<Complex64> + Sync,
) -> Result<Vec<DetZero>> {
    let median = scan.median_abs_det();
    let n = scan.grid.nodes_per_side;
    let hk = scan.grid.spacing();
    let abs = |i: usize, j: usize| scan.records[j * n + i].abs_det();
    let mut zeros = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let v = abs(i, j);
            if !(v.is_finite() && v < search.threshold * median) {
                continue;
            }
            let is_min = (-1i64..=1)
                .flat_map(|dj| (-1i64..=1).map(move |di| (di, dj)))
                .filter(|&(di, dj)| di != 0 || dj != 0)
                .filter_map(|(di, dj)| {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    (ii >= 0 && jj >= 0 && ii < n as i64 && jj < n as i64).then(|| abs(ii as usize, jj as usize))
                })
                .all(|w| !(w < v));
            if !is_min {
                continue;
            }
            let node = scan.grid.node_at(i, j);
            let unit = search.fit_unit_fraction * hk;
            let (k, d) = compass_refine(&eval, node, 0.25 * hk, unit)?;
            let window = [search.fit_inner * unit, search.fit_outer * unit];
            let fitted_order = fit_order(&eval, k, d, window, search.fit_radii)?;
            zeros.push(DetZero {
                node,
                k,
                abs_det: d.norm(),
                fitted_order,
                fit_window: window,
            });
        }
    }
    Ok(zeros)
}

fn compass_refine(
    eval: &(impl Fn(Complex64) -> Result<Complex64> + Sync),
    start: Complex64,
    initial_step: f64,
    min_step: f64,
) -> Result<(Complex64, Complex64)> {
    let mut k = start;
    let mut d = eval(k)?;
    let mut step = initial_step;
    while step >= min_step {
        let dirs = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0), Complex64::new(-1.0, 0.0), Complex64::new(0.0, -1.0)];
        let trial: Vec<Result<(Complex64, Complex64)>> = dirs
            .par_iter()
            .map(|&dir| {
                let kk = k + dir * step;
                eval(kk).map(|v| (kk, v))
            })
            .collect();
        let mut moved = false;
        for t in trial {
            let (kk, v) = t?;
            if v.norm() < d.norm() {
                k = kk;
                d = v;
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    Ok((k, d))
}

fn fit_order(
    eval: &(impl Fn(Complex64) -> Result<Complex64> + Sync),
    center: Complex64,
    d_center: Complex64,
    window: [f64; 2],
    radii: usize,
) -> Result<f64> {
    let radii = radii.max(2);
    let ratio = (window[1] / window[0]).ln();
    let samples: Vec<Result<(f64, f64)>> = (0..radii)
        .into_par_iter()
        .map(|i| {
            let r = window[0] * (ratio * i as f64 / (radii - 1) as f64).exp();
            let mut mean = 0.0;
            for q in 0..4 {
                let dir = Complex64::from_polar(1.0, PI / 4.0 + q as f64 * PI / 2.0);
                mean += (eval(center + dir * r)? - d_center).norm() / 4.0;
            }
            Ok((r.ln(), mean.ln()))
        })
        .collect();
    let pts: Vec<(f64, f64)> = samples.into_iter().collect::<Result<_>>()?;
    Ok(least_squares_slope(&pts))
}

/// Slope of the least-squares line through `(x, y)` points.
pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Finite-difference and trace-formula values of `d/dt log Det(I - A(t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogDetDerivative {
    /// Centred difference of `log Det(I - A(t))`.
    pub finite_difference: Complex64,
    /// `Tr((I - A)^-1 (-A')) - Tr(-A')`.
    pub trace_formula: Complex64,
    /// Modulus of the difference.
    pub deviation: f64,
}

/// Compares the centred difference of `log Det(I - A(t))` with the trace formula.
pub fn logdet_derivative_check(
    family: impl Fn(f64) -> Mat<Complex64>,
    derivative: impl Fn(f64) -> Mat<Complex64>,
    t: f64,
    step: f64,
) -> Result<LogDetDerivative> {
    let plus = renormalized_det_matrix(&family(t + step))?;
    let minus = renormalized_det_matrix(&family(t - step))?;
    let centre = FactoredResolvent::new(&family(t))?;
    if centre.det().min_pivot < 1e-12 || plus.min_pivot < 1e-12 || minus.min_pivot < 1e-12 {
        return Err(Error::LinearAlgebra("I - A(t) is singular on the sample".into()));
    }
    let jump = Complex64::new(plus.log_abs - minus.log_abs, wrap_angle(plus.arg - minus.arg));
    let finite_difference = jump / (2.0 * step);
    let da = derivative(t);
    let inv = centre.inverse();
    let n = da.nrows();
    let mut tr_inv = Complex64::new(0.0, 0.0);
    let mut tr = Complex64::new(0.0, 0.0);
    for i in 0..n {
        tr += da[(i, i)];
        for j in 0..n {
            tr_inv += inv[(i, j)] * da[(j, i)];
        }
    }
    let trace_formula = -tr_inv + tr;
    Ok(LogDetDerivative {
        finite_difference,
        trace_formula,
        deviation: (finite_difference - trace_formula).norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_domain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, norm: f64) -> Mat<Complex64> {
        let m = Mat::from_fn(n, n, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let fro = m.norm_l2();
        &m * faer::Scale(c(norm / fro, 0.0))
    }

    fn rank_one(lambda: Complex64, n: usize) -> Mat<Complex64> {
        let psi: Vec<Complex64> = (0..n).map(|i| c(1.0 + i as f64, 0.5 * i as f64)).collect();
        let chi: Vec<Complex64> = (0..n).map(|i| c(0.3, -0.2 * i as f64)).collect();
        let norm: Complex64 = chi.iter().zip(&psi).map(|(a, b)| a * b).sum();
        Mat::from_fn(n, n, |i, j| lambda * psi[i] * chi[j] / norm)
    }

    #[test]
    fn zero_matrix_has_unit_determinant() {
        let d = renormalized_det_matrix(&Mat::zeros(4, 4)).unwrap();
        assert!((d.value - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rank_one_closed_form() {
        for lambda in [c(0.3, 0.0), c(-0.7, 0.4), c(2.5, -1.0)] {
            let d = renormalized_det_matrix(&rank_one(lambda, 6)).unwrap();
            let expected = (c(1.0, 0.0) - lambda) * lambda.exp();
            assert!((d.value - expected).norm() < 1e-12 * expected.norm());
        }
    }

    #[test]
    fn multiplicativity_with_trace_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let b = random_matrix(&mut rng, 5, 0.29);
            let cm = random_matrix(&mut rng, 5, 0.29);
            let id = Mat::<Complex64>::identity(5, 5);
            let prod = &id - (&id - &b) * (&id - &cm);
            let lhs = renormalized_det_matrix(&prod).unwrap().value;
            let bc = &b * &cm;
            let tr: Complex64 = (0..5).map(|i| bc[(i, i)]).sum();
            let rhs = renormalized_det_matrix(&b).unwrap().value * renormalized_det_matrix(&cm).unwrap().value * (-tr).exp();
            assert!((lhs - rhs).norm() < 1e-10 * rhs.norm());
        }
    }

    #[test]
    fn permutation_sign_is_tracked() {
        // I - A is a swap of two coordinates, with determinant -1.
        let a = Mat::from_fn(2, 2, |i, j| if i == j { c(1.0, 0.0) } else { c(-1.0, 0.0) });
        let d = renormalized_det_matrix(&a).unwrap();
        assert!((d.value - c(-1.0, 0.0) * c(2.0, 0.0).exp()).norm() < 1e-12);
    }

    #[test]
    fn similarity_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 8, 1.5);
        let s: Vec<f64> = (0..8).map(|i| 1.0 + i as f64).collect();
        let b = Mat::from_fn(8, 8, |i, j| a[(i, j)] * (s[j] / s[i]));
        let da = renormalized_det_matrix(&a).unwrap().value;
        let db = renormalized_det_matrix(&b).unwrap().value;
        assert!((da - db).norm() < 1e-12 * da.norm());
    }

    #[test]
    fn derivative_identity_on_polynomial_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random_matrix(&mut rng, 6, 0.4);
        let a1 = random_matrix(&mut rng, 6, 0.4);
        let a2 = random_matrix(&mut rng, 6, 0.4);
        let fam = |t: f64| &a0 + &a1 * faer::Scale(c(t, 0.0)) + &a2 * faer::Scale(c(t * t, 0.0));
        let der = |t: f64| &a1 + &a2 * faer::Scale(c(2.0 * t, 0.0));
        let res = logdet_derivative_check(fam, der, 0.3, 1e-4).unwrap();
        assert!(res.deviation < 1e-6, "{}", res.deviation);

        let constant = logdet_derivative_check(|_| a0.clone(), |_| Mat::zeros(6, 6), 0.0, 1e-4).unwrap();
        assert!(constant.finite_difference.norm() < 1e-12 && constant.trace_formula.norm() < 1e-12);
    }

    #[test]
    fn derivative_identity_on_rank_one_family() {
        let lambda = |t: f64| c(0.2 + 0.5 * t, 0.1 * t * t);
        let dlambda = |t: f64| c(0.5, 0.2 * t);
        let one = rank_one(c(1.0, 0.0), 5);
        let res = logdet_derivative_check(
            |t| &one * faer::Scale(lambda(t)),
            |t| &one * faer::Scale(dlambda(t)),
            0.4,
            1e-4,
        )
        .unwrap();
        // d/dt log((1 - l) e^l) = l' (1 - 1/(1 - l)).
        let l = lambda(0.4);
        let exact = dlambda(0.4) * (c(1.0, 0.0) - c(1.0, 0.0) / (c(1.0, 0.0) - l));
        assert!((res.trace_formula - exact).norm() < 1e-12);
        assert!((res.finite_difference - exact).norm() < 1e-7);
    }

    #[test]
    fn singular_family_is_rejected() {
        let one = rank_one(c(1.0, 0.0), 4);
        assert!(logdet_derivative_check(|_| one.clone(), |_| Mat::zeros(4, 4), 0.0, 1e-4).is_err());
    }

    #[test]
    fn k_grid_geometry() {
        let g = KGrid::new(c(1.0, -1.0), 5.0, 21).unwrap();
        assert_eq!(g.len(), 441);
        assert!((g.spacing() - 0.5).abs() < 1e-15);
        assert_eq!(g.node(g.nearest(c(1.1, -0.9))), c(1.0, -1.0));
        assert_eq!(g.node(0), c(-4.0, -6.0));
        assert!(KGrid::new(c(0.0, 0.0), 1.0, 1).is_err());
    }

    #[test]
    fn zero_potential_scan_has_unit_determinant_and_no_zeros() {
        let d = make_domain(4.0, 8).unwrap();
        let asm = Assembler::new(&d);
        let grid = KGrid::new(c(0.0, 0.0), 1.0, 3).unwrap();
        let scan = det_scan(&asm, &d.zeros(), &grid, "zero");
        assert!(scan.records.iter().all(|r| (r.det.unwrap().value - c(1.0, 0.0)).norm() < 1e-14));
        let zeros = find_zeros(&scan, &ZeroSearch::default(), |k| Ok(det_at(&asm, k, &d.zeros())?.value)).unwrap();
        assert!(zeros.is_empty());
    }

    #[test]
    fn quadratic_model_zero_is_found_with_order_two() {
        let f = |k: Complex64| Ok(c(1e-4, 0.0) + k.norm_sqr() * (1.0 + k.norm_sqr()).recip() * c(0.0, 1.0).exp());
        let grid = KGrid::new(c(0.0, 0.0), 2.0, 9).unwrap();
        let d = make_domain(1.0, 2).unwrap();
        let records = grid.nodes().map(|k| ScanRecord::with_det(k, Ok(DetValue::from_log(f(k).unwrap().norm().ln(), f(k).unwrap().arg(), 1.0)))).collect();
        let scan = ScatteringScan { domain: d, grid, potential: "model".into(), records, zeros: vec![] };
        let zeros = find_zeros(&scan, &ZeroSearch::default(), f).unwrap();
        assert_eq!(zeros.len(), 1);
        assert!(zeros[0].k.norm() < 1e-12);
        assert!((zeros[0].fitted_order - 2.0).abs() < 0.01, "{}", zeros[0].fitted_order);
    }

    #[test]
    fn csv_and_json_exports() {
        let d = make_domain(4.0, 8).unwrap();
        let asm = Assembler::new(&d);
        let grid = KGrid::new(c(0.0, 0.0), 1.0, 2).unwrap();
        let scan = det_scan(&asm, &d.zeros(), &grid, "zero");
        let mut csv_out = Vec::new();
        scan.write_csv(&mut csv_out, "abc123").unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.starts_with("re_k,im_k,re_D,im_D,abs_D,re_s,im_s,re_r,im_r,re_c,im_c,dbar_residual,config_hash\n"));
        assert_eq!(text.lines().count(), 5);
        assert!(!text.contains('\r'));
        assert!(text.lines().skip(1).all(|l| l.ends_with(",abc123")));
        let mut json = Vec::new();
        scan.write_json(&mut json, "abc123").unwrap();
        let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(v["points_per_side"], 8);
        assert_eq!(v["records"].as_array().unwrap().len(), 4);
    }
}
