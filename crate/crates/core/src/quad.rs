//! One-dimensional quadrature helpers.
//!
//! Cell rules here are open (Gauss nodes never sit on a cell boundary), so a
//! partition split at a known discontinuity integrates each side with its own
//! one-sided values.

use gauss_quad::legendre::GaussLegendre;
use std::num::NonZeroUsize;

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gl_rule(n: usize) -> Vec<(f64, f64)> {
    let degree = NonZeroUsize::new(n).expect("quadrature degree must be positive");
    GaussLegendre::new(degree).as_node_weight_pairs().to_vec()
}

/// Sorted nodes of `[a, b]` split into `n_cells` uniform cells, with extra
/// nodes inserted at every break strictly inside the interval.
pub fn partition(a: f64, b: f64, n_cells: usize, breaks: &[f64]) -> Vec<f64> {
    assert!(b > a && n_cells >= 1);
    let h = (b - a) / n_cells as f64;
    let mut nodes: Vec<f64> = (0..=n_cells).map(|i| a + i as f64 * h).collect();
    nodes[n_cells] = b;
    let tol = 1e-12 * (b - a);
    for &x in breaks {
        if x > a + tol && x < b - tol {
            nodes.push(x);
        }
    }
    nodes.sort_by(|p, q| p.total_cmp(q));
    nodes.dedup_by(|p, q| (*p - *q).abs() <= tol);
    nodes
}

/// Two-point Gauss rule on consecutive nodes.
pub fn integrate_cells(nodes: &[f64], mut f: impl FnMut(f64) -> f64) -> f64 {
    const G: f64 = 0.577_350_269_189_625_8;
    nodes
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let half = 0.5 * (w[1] - w[0]);
            half * (f(mid - G * half) + f(mid + G * half))
        })
        .sum()
}

/// Composite trapezoid on a uniform grid of sampled values.
pub fn trapezoid_uniform(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (0.5 * values[0] + values[1..n - 1].iter().sum::<f64>() + 0.5 * values[n - 1]),
    }
}

/// `∫ w v' dx` over `[a, b]` by integration by parts on each piece between
/// consecutive `breaks` of `w`:
/// `Σ [v w]_{a_k+}^{b_k-} − ∫ v w' dx`.
///
/// Only `v` (not `v'`) is evaluated, so integrable singularities of `v'` are
/// handled exactly. `w_left`/`w_right` give one-sided limits of `w`.
pub struct ByParts<'a> {
    pub v: &'a dyn Fn(f64) -> f64,
    pub w_right: &'a dyn Fn(f64) -> f64,
    pub w_left: &'a dyn Fn(f64) -> f64,
    pub w_prime: &'a dyn Fn(f64) -> f64,
}

impl ByParts<'_> {
    pub fn integrate(
        &self,
        a: f64,
        b: f64,
        n_cells: usize,
        w_breaks: &[f64],
        v_kinks: &[f64],
    ) -> f64 {
        let tol = 1e-12 * (b - a);
        let mut pieces: Vec<f64> = vec![a, b];
        pieces.extend(
            w_breaks
                .iter()
                .copied()
                .filter(|&x| x > a + tol && x < b - tol),
        );
        pieces.sort_by(|p, q| p.total_cmp(q));
        pieces.dedup_by(|p, q| (*p - *q).abs() <= tol);

        let mut all_breaks: Vec<f64> = w_breaks.to_vec();
        all_breaks.extend_from_slice(v_kinks);
        let nodes = partition(a, b, n_cells, &all_breaks);

        let mut total = 0.0;
        for piece in pieces.windows(2) {
            let (lo, hi) = (piece[0], piece[1]);
            total += (self.v)(hi) * (self.w_left)(hi) - (self.v)(lo) * (self.w_right)(lo);
        }
        total - integrate_cells(&nodes, |x| (self.v)(x) * (self.w_prime)(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl_rule_integrates_polynomials() {
        let rule = gl_rule(4);
        let integral: f64 = rule.iter().map(|(x, w)| w * x.powi(6)).sum();
        assert!((integral - 2.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn partition_inserts_breaks() {
        let nodes = partition(0.0, 1.0, 4, &[0.3, 0.5, 2.0]);
        assert_eq!(nodes.len(), 6);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert!(nodes.contains(&0.3));
    }

    #[test]
    fn split_cells_integrate_step_exactly() {
        let nodes = partition(-1.0, 1.0, 7, &[0.123]);
        let val = integrate_cells(&nodes, |x| if x > 0.123 { 1.0 } else { 0.0 });
        assert!((val - (1.0 - 0.123)).abs() < 1e-14);
    }

    #[test]
    fn by_parts_handles_sqrt_singularity() {
        // ∫_{-1}^{1} w(x) d/dx[sign(x) sqrt|x|] dx with w = 1 - x^2
        let v = |x: f64| x.signum() * x.abs().sqrt();
        let w = |x: f64| 1.0 - x * x;
        let wp = |x: f64| -2.0 * x;
        let bp = ByParts {
            v: &v,
            w_right: &w,
            w_left: &w,
            w_prime: &wp,
        };
        let got = bp.integrate(-1.0, 1.0, 64, &[], &[0.0]);
        // exact: 2 ∫_0^1 (1-x^2) x^{-1/2}/2 dx = 2 - 2/5
        let exact = 2.0 - 0.4;
        assert!((got - exact).abs() < 1e-4, "{got}");
    }
}
