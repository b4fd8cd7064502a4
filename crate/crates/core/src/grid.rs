//! Uniform cell-centred grids on a square of the complex plane, sampled
//! functions, midpoint quadrature and the bilinear pairing.
//!
//! Nodes are stored row-major: the node in column `i` (real part) and row `j`
//! (imaginary part) has flat index `j * n + i`.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A square `[-L, L]^2` divided into `n x n` cells, sampled at cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    half_width: f64,
    points_per_side: usize,
}

impl Domain {
    /// Builds a domain with half-width `half_width` and `points_per_side` cells per side.
    ///
    /// The cell count must be even so that no node sits at the origin.
    pub fn new(half_width: f64, points_per_side: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "half-width must be positive and finite, got {half_width}"
            )));
        }
        if points_per_side == 0 || points_per_side % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "points per side must be a positive even integer, got {points_per_side}"
            )));
        }
        Ok(Self {
            half_width,
            points_per_side,
        })
    }

    /// Half-width `L` of the square.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Number of cells `N` along each side.
    pub fn points_per_side(&self) -> usize {
        self.points_per_side
    }

    /// Cell side `h = 2L / N`.
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.points_per_side as f64
    }

    /// Quadrature weight attached to every node, `h^2`.
    pub fn weight(&self) -> f64 {
        let h = self.spacing();
        h * h
    }

    /// Total number of nodes `N^2`.
    pub fn len(&self) -> usize {
        self.points_per_side * self.points_per_side
    }

    /// Always false: a domain has at least one node.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of the cell centre with one-dimensional index `i`.
    pub fn coordinate(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.spacing()
    }

    /// Node with column `i` and row `j`.
    pub fn node_at(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(self.coordinate(i), self.coordinate(j))
    }

    /// Node with flat index `index`.
    pub fn node(&self, index: usize) -> Complex64 {
        let n = self.points_per_side;
        self.node_at(index % n, index / n)
    }

    /// Column and row of a flat index.
    pub fn split_index(&self, index: usize) -> (usize, usize) {
        (
            index % self.points_per_side,
            index / self.points_per_side,
        )
    }

    /// All nodes in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = Complex64> + '_ {
        (0..self.len()).map(move |a| self.node(a))
    }

    /// Samples `f` at every node.
    pub fn sample(&self, f: impl Fn(Complex64) -> Complex64) -> GriddedFunction {
        GriddedFunction {
            domain: *self,
            values: self.nodes().map(f).collect(),
        }
    }

    /// Samples a real-valued function at every node.
    pub fn sample_real(&self, f: impl Fn(Complex64) -> f64) -> GriddedFunction {
        self.sample(|z| Complex64::new(f(z), 0.0))
    }

    /// The zero function on this domain.
    pub fn zeros(&self) -> GriddedFunction {
        GriddedFunction {
            domain: *self,
            values: vec![Complex64::new(0.0, 0.0); self.len()],
        }
    }

    /// Mask selecting the nodes with `|z| <= radius`.
    pub fn disc_mask(&self, radius: f64) -> Vec<bool> {
        self.nodes().map(|z| z.norm() <= radius).collect()
    }

    /// Mask selecting the nodes in the outermost ring of cells.
    pub fn boundary_frame_mask(&self) -> Vec<bool> {
        let n = self.points_per_side;
        (0..self.len())
            .map(|a| {
                let (i, j) = self.split_index(a);
                i == 0 || j == 0 || i == n - 1 || j == n - 1
            })
            .collect()
    }

    /// The cell-centred frequency grid on which [`crate::transforms::fourier`] returns values,
    /// refined by `oversampling` in each direction.
    ///
    /// Frequencies are in the spectral variable `k` of the phase `exp(-i(kz + conj(k z)))`,
    /// whose Nyquist half-width is `pi / (2h)`.
    pub fn dual(&self, oversampling: usize) -> Result<Domain> {
        if oversampling == 0 {
            return Err(Error::InvalidParameter(
                "oversampling factor must be at least 1".into(),
            ));
        }
        let n = self.points_per_side;
        let half = std::f64::consts::PI * n as f64 / (4.0 * self.half_width);
        Domain::new(half, n * oversampling)
    }

    /// Whether `k` lies inside the open Nyquist box of this grid in the spectral variable.
    pub fn in_band(&self, k: Complex64) -> bool {
        let edge = std::f64::consts::PI / (2.0 * self.spacing());
        k.re.abs() < edge && k.im.abs() < edge
    }
}

/// Complex samples of a function on a [`Domain`], stored in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedFunction {
    domain: Domain,
    values: Vec<Complex64>,
}

impl GriddedFunction {
    /// Wraps existing samples, checking length and finiteness.
    pub fn new(domain: Domain, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} samples, got {}",
                domain.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite("gridded samples".into()));
        }
        Ok(Self { domain, values })
    }

    /// Domain the samples live on.
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Samples in node order.
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Mutable samples in node order.
    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    /// Consumes the function and returns its samples.
    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    /// Applies `f` to each sample.
    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            domain: self.domain,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Applies `f` to each sample together with its node.
    pub fn map_with_node(&self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Self {
        Self {
            domain: self.domain,
            values: self
                .values
                .iter()
                .zip(self.domain.nodes())
                .map(|(&v, z)| f(z, v))
                .collect(),
        }
    }

    /// Complex conjugate of every sample.
    pub fn conj(&self) -> Self {
        self.map(|v| v.conj())
    }

    /// Multiplies every sample by `c`.
    pub fn scale(&self, c: Complex64) -> Self {
        self.map(|v| v * c)
    }

    /// Pointwise product with another function on the same domain.
    pub fn pointwise_mul(&self, other: &Self) -> Result<Self> {
        self.check_same_domain(other)?;
        Ok(Self {
            domain: self.domain,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// Fails unless `other` lives on the same domain.
    pub fn check_same_domain(&self, other: &Self) -> Result<()> {
        if self.domain == other.domain {
            Ok(())
        } else {
            Err(Error::DomainMismatch(format!(
                "(L={}, N={}) vs (L={}, N={})",
                self.domain.half_width,
                self.domain.points_per_side,
                other.domain.half_width,
                other.domain.points_per_side
            )))
        }
    }

    /// Discrete `L^2` norm `(sum |f|^2 h^2)^(1/2)` over the nodes selected by `mask`.
    pub fn l2_norm_masked(&self, mask: &[bool]) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v.norm_sqr())
            .sum();
        (s * self.domain.weight()).sqrt()
    }

    /// Discrete `L^2` norm over the whole domain.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.domain.weight()).sqrt()
    }

    /// Largest sample modulus.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

impl Add for &GriddedFunction {
    type Output = GriddedFunction;

    fn add(self, rhs: &GriddedFunction) -> GriddedFunction {
        assert_eq!(self.domain, rhs.domain, "adding functions on different domains");
        GriddedFunction {
            domain: self.domain,
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &GriddedFunction {
    type Output = GriddedFunction;

    fn sub(self, rhs: &GriddedFunction) -> GriddedFunction {
        assert_eq!(self.domain, rhs.domain, "subtracting functions on different domains");
        GriddedFunction {
            domain: self.domain,
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul<Complex64> for &GriddedFunction {
    type Output = GriddedFunction;

    fn mul(self, rhs: Complex64) -> GriddedFunction {
        self.scale(rhs)
    }
}

/// Builds a domain; rejects odd `n` and non-positive `half_width`.
pub fn make_domain(half_width: f64, n: usize) -> Result<Domain> {
    Domain::new(half_width, n)
}

/// The plane wave `e_k(z) = exp(i(kz + conj(kz)))`, which has unit modulus.
pub fn plane_wave(k: Complex64, z: Complex64) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * (k * z).re)
}

/// Samples of `e_k` on the domain.
pub fn e_k_sample(k: Complex64, d: &Domain) -> GriddedFunction {
    d.sample(|z| plane_wave(k, z))
}

/// Japanese bracket `rho(z) = (1 + |z|^2)^(1/2)`.
pub fn rho(z: Complex64) -> f64 {
    (1.0 + z.norm_sqr()).sqrt()
}

/// Samples of `rho` on the domain.
pub fn rho_sample(d: &Domain) -> GriddedFunction {
    d.sample_real(rho)
}

/// Midpoint quadrature `sum f(z) h^2`.
pub fn integrate(f: &GriddedFunction) -> Complex64 {
    f.values.iter().sum::<Complex64>() * f.domain.weight()
}

/// Bilinear pairing `<f, g> = sum f(z) g(z) h^2` (no conjugation).
pub fn pair(f: &GriddedFunction, g: &GriddedFunction) -> Result<Complex64> {
    f.check_same_domain(g)?;
    let s: Complex64 = f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum();
    Ok(s * f.domain.weight())
}

/// Relative discrete `L^2` error `||a - b|| / ||b||` over the nodes selected by `mask`.
pub fn relative_l2_error(a: &GriddedFunction, b: &GriddedFunction, mask: &[bool]) -> Result<f64> {
    a.check_same_domain(b)?;
    let diff = a - b;
    let denom = b.l2_norm_masked(mask);
    if denom == 0.0 {
        return Err(Error::InvalidParameter(
            "reference function vanishes on the mask".into(),
        ));
    }
    Ok(diff.l2_norm_masked(mask) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_by_two_domain_has_four_unit_cells() {
        let d = make_domain(1.0, 2).unwrap();
        assert_eq!(d.spacing(), 1.0);
        let nodes: Vec<_> = d.nodes().collect();
        assert_eq!(nodes, vec![c(-0.5, -0.5), c(0.5, -0.5), c(-0.5, 0.5), c(0.5, 0.5)]);
    }

    #[test]
    fn production_domain_arithmetic() {
        let d = make_domain(20.0, 48).unwrap();
        assert_relative_eq!(d.spacing(), 5.0 / 6.0, epsilon = 1e-15);
        assert_eq!(d.len(), 2304);
        assert!(d.nodes().all(|z| z.re.abs() < 20.0 && z.im.abs() < 20.0));
    }

    #[test]
    fn rejects_odd_and_nonpositive_parameters() {
        assert!(make_domain(1.0, 3).is_err());
        assert!(make_domain(0.0, 8).is_err());
        assert!(make_domain(-1.0, 8).is_err());
        assert!(make_domain(f64::NAN, 8).is_err());
    }

    #[test]
    fn plane_wave_values() {
        let d = make_domain(3.0, 12).unwrap();
        assert!(e_k_sample(c(0.0, 0.0), &d).values().iter().all(|&v| v == c(1.0, 0.0)));
        let e = e_k_sample(c(1.3, -0.7), &d);
        assert!(e.values().iter().all(|v| (v.norm() - 1.0).abs() < 1e-15));
        let v = plane_wave(c(1.0, 0.0), c(PI / 4.0, 0.0));
        assert!((v - c(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn rho_values() {
        assert_eq!(rho(c(0.0, 0.0)), 1.0);
        assert_relative_eq!(rho(c(1.0, 1.0)), 3f64.sqrt(), epsilon = 1e-15);
        let d = make_domain(4.0, 8).unwrap();
        let r = rho_sample(&d);
        let min = r.values().iter().map(|v| v.re).fold(f64::INFINITY, f64::min);
        assert!(r.values().iter().all(|v| v.re >= 1.0));
        assert_relative_eq!(min, rho(c(0.5, 0.5)), epsilon = 1e-15);
    }

    #[test]
    fn integrals_of_soliton_profiles() {
        let d = make_domain(20.0, 48).unwrap();
        let odd = d.sample(|z| z / (1.0 + z.norm_sqr()).powi(2));
        assert!(integrate(&odd).norm() < 1e-13);
        // Box integral of rho^-4 over [-20, 20]^2 from adaptive 2-D quadrature.
        let box_integral = 3.135_179_246_283_831;
        let fine = make_domain(20.0, 96).unwrap();
        let even = fine.sample_real(|z| (1.0 + z.norm_sqr()).powi(-2));
        assert!((integrate(&even).re - box_integral).abs() < 1e-4);
        assert!((box_integral - PI).abs() <= PI / 400.0);
        // At h = 5/6 the aliasing error of the midpoint rule dominates truncation.
        let coarse = d.sample_real(|z| (1.0 + z.norm_sqr()).powi(-2));
        assert!((integrate(&coarse).re - PI).abs() < 0.01 * PI);
        let u0 = d.sample_real(|z| 2.0 / (1.0 + z.norm_sqr()));
        let mass: f64 = u0.values().iter().map(|v| v.norm_sqr()).sum::<f64>() * d.weight();
        assert!((mass / (4.0 * PI) - 1.0).abs() < 0.01);
    }

    #[test]
    fn pairing_rejects_mismatched_domains() {
        let a = make_domain(1.0, 4).unwrap().zeros();
        let b = make_domain(2.0, 4).unwrap().zeros();
        assert!(matches!(pair(&a, &b), Err(Error::DomainMismatch(_))));
    }

    #[test]
    fn pairing_against_zero_vanishes() {
        let d = make_domain(5.0, 16).unwrap();
        let f = d.sample(|z| z.exp());
        assert_eq!(pair(&f, &d.zeros()).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn gridded_function_rejects_bad_samples() {
        let d = make_domain(1.0, 2).unwrap();
        assert!(GriddedFunction::new(d, vec![c(0.0, 0.0); 3]).is_err());
        assert!(GriddedFunction::new(d, vec![c(f64::NAN, 0.0); 4]).is_err());
    }

    #[test]
    fn dual_grid_matches_nyquist_box() {
        let d = make_domain(20.0, 48).unwrap();
        let dual = d.dual(1).unwrap();
        assert_relative_eq!(dual.half_width(), PI / (2.0 * d.spacing()), epsilon = 1e-14);
        assert_relative_eq!(dual.spacing(), PI / (2.0 * 20.0), epsilon = 1e-14);
        assert!(d.in_band(c(1.8, -1.8)));
        assert!(!d.in_band(c(1.9, 0.0)));
    }

    proptest! {
        #[test]
        fn midpoint_rule_is_exact_for_affine_functions(
            a in -3.0..3.0f64, b in -3.0..3.0f64, cc in -3.0..3.0f64,
            l in 0.5..10.0f64, half_n in 1usize..12,
        ) {
            let d = make_domain(l, 2 * half_n).unwrap();
            let f = d.sample_real(|z| a + b * z.re + cc * z.im);
            let exact = a * 4.0 * l * l;
            prop_assert!((integrate(&f).re - exact).abs() <= 1e-10 * (1.0 + exact.abs()));
        }

        #[test]
        fn odd_functions_integrate_to_zero(
            re in -2.0..2.0f64, im in -2.0..2.0f64, half_n in 1usize..16,
        ) {
            let d = make_domain(4.0, 2 * half_n).unwrap();
            let w = c(re, im);
            let f = d.sample(|z| (w * z).sin() * (-z.norm_sqr()).exp());
            prop_assert!(integrate(&f).norm() < 1e-12);
        }

        #[test]
        fn pairing_is_bilinear(
            ar in -2.0..2.0f64, ai in -2.0..2.0f64, br in -2.0..2.0f64, bi in -2.0..2.0f64,
        ) {
            let d = make_domain(3.0, 10).unwrap();
            let (a, b) = (c(ar, ai), c(br, bi));
            let f = d.sample(|z| z.exp() * 0.1);
            let g = d.sample(|z| (z * 0.3).cos());
            let h = d.sample(|z| z.conj() * c(0.2, 1.0));
            let lhs = pair(&(&(&f * a) + &(&g * b)), &h).unwrap();
            let rhs = a * pair(&f, &h).unwrap() + b * pair(&g, &h).unwrap();
            prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
        }
    }
}
