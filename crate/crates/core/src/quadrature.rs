//! Cached Gauss-Legendre rules and small one-dimensional integrators.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::legendre::GaussLegendre;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub type Rule = Arc<Vec<(f64, f64)>>;

/// Returns a Gauss-Legendre rule with at least `min_nodes` nodes.
///
/// Node counts are rounded up to a multiple of eight so that repeated requests
/// share a small set of cached rules.
pub fn gauss_legendre(min_nodes: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let n = min_nodes.max(2).div_ceil(8) * 8;
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().expect("quadrature cache poisoned").get(&n) {
        return rule.clone();
    }
    let rule: Rule = Arc::new(
        GaussLegendre::new(n)
            .expect("rule with at least two nodes")
            .as_node_weight_pairs()
            .to_vec(),
    );
    cache
        .lock()
        .expect("quadrature cache poisoned")
        .insert(n, rule.clone());
    rule
}

/// Integrates `f` over `[a, b]` with an `n`-node Gauss-Legendre rule.
pub fn integrate_interval(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    gauss_legendre(n)
        .iter()
        .map(|&(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

/// Composite Gauss-Legendre integration over consecutive breakpoints.
pub fn integrate_panels(breaks: &[f64], n: usize, f: impl Fn(f64) -> f64) -> f64 {
    breaks
        .windows(2)
        .map(|w| integrate_interval(w[0], w[1], n, &f))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_are_cached_and_rounded() {
        let a = gauss_legendre(5);
        let b = gauss_legendre(8);
        assert_eq!(a.len(), 8);
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn integrates_polynomials_and_exponentials() {
        let v = integrate_interval(0.0, 2.0, 8, |x| x.powi(7));
        assert!((v - 32.0).abs() < 1e-12);
        let e = integrate_panels(&[0.0, 1.0, 3.0], 24, f64::exp);
        assert!((e - (3f64.exp() - 1.0)).abs() < 1e-12);
    }
}
