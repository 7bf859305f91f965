//! Composite Gauss–Legendre quadrature with panel doubling.
//!
//! Every integral in the crate is smooth between known breakpoints (support
//! edges of shifted opponents), so each smooth segment is split into equal
//! panels and the panel count is doubled until two successive totals agree.

use std::sync::OnceLock;

use crate::error::{FairbidError, Result};

/// Nodes per panel.
pub const NODES_PER_PANEL: usize = 32;

/// Fixed Gauss–Legendre rule on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds an `order`-point rule by Newton iteration on `P_order`.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1);
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let n = order as f64;
        for k in 0..order.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(order, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(order, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[k] = -x;
            nodes[order - 1 - k] = x;
            weights[k] = w;
            weights[order - 1 - k] = w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Single-panel estimate of `int_a^b f`.
    pub fn integrate(&self, f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// `panels` equal panels over `[a, b]`.
    pub fn integrate_panels(&self, f: &impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|p| {
                let lo = a + h * p as f64;
                let hi = if p + 1 == panels { b } else { lo + h };
                self.integrate(f, lo, hi)
            })
            .sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let d = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// The shared 32-point rule.
pub fn gauss_legendre_32() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(NODES_PER_PANEL))
}

/// Convergence controls for [`integrate_segments`].
#[derive(Clone, Copy, Debug)]
pub struct QuadratureRule {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_panels: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule {
            rel_tol: 1e-9,
            abs_tol: 1e-13,
            max_panels: 1 << 14,
        }
    }
}

/// Integrates `f` over the ordered `breakpoints` (first and last are the
/// interval ends). Each segment gets the same panel count, doubled from one
/// until successive totals differ by less than `rel_tol * |I| + abs_tol`.
pub fn integrate_segments(
    f: impl Fn(f64) -> f64,
    breakpoints: &[f64],
    rule: &QuadratureRule,
) -> Result<f64> {
    if breakpoints.len() < 2 {
        return Ok(0.0);
    }
    let gl = gauss_legendre_32();
    let estimate = |panels: usize| -> f64 {
        breakpoints
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| gl.integrate_panels(&f, w[0], w[1], panels))
            .sum()
    };
    let mut panels = 1;
    let mut prev = estimate(panels);
    loop {
        panels *= 2;
        let next = estimate(panels);
        if !next.is_finite() {
            return Err(FairbidError::Quadrature {
                estimate: next,
                panels,
            });
        }
        if (next - prev).abs() <= rule.rel_tol * next.abs() + rule.abs_tol {
            return Ok(next);
        }
        if panels >= rule.max_panels {
            return Err(FairbidError::Quadrature {
                estimate: next,
                panels,
            });
        }
        prev = next;
    }
}

/// Sorted, deduplicated breakpoints clipped to `[a, b]`, endpoints included.
pub fn breakpoints_within(a: f64, b: f64, interior: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut pts = vec![a];
    pts.extend(interior.into_iter().filter(|x| x.is_finite() && *x > a && *x < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|x, y| (*x - *y).abs() <= 1e-14 * (1.0 + y.abs()));
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two_and_nodes_symmetric() {
        let gl = GaussLegendre::new(32);
        let s: f64 = gl.weights.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        for k in 0..32 {
            assert!((gl.nodes[k] + gl.nodes[31 - k]).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_for_high_degree_polynomials() {
        let gl = GaussLegendre::new(32);
        // degree 62 is within the 2n-1 exactness bound
        let v = gl.integrate(&|x: f64| x.powi(62), -1.0, 1.0);
        assert!((v - 2.0 / 63.0).abs() < 1e-14);
    }

    #[test]
    fn kinked_integrand_converges_with_breakpoint() {
        let f = |x: f64| (x - 0.3).abs();
        let bps = breakpoints_within(0.0, 1.0, [0.3]);
        let v = integrate_segments(f, &bps, &QuadratureRule::default()).unwrap();
        assert!((v - (0.045 + 0.245)).abs() < 1e-13);
    }

    #[test]
    fn exponential_tail() {
        let v = integrate_segments(|x: f64| (-x).exp(), &[0.0, 40.0], &QuadratureRule::default())
            .unwrap();
        assert!((v - (1.0 - (-40.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn nonconvergence_reports_error() {
        let rule = QuadratureRule {
            max_panels: 4,
            ..QuadratureRule::default()
        };
        let r = integrate_segments(|x: f64| (1.0 / x).sin(), &[1e-6, 1.0], &rule);
        assert!(matches!(r, Err(FairbidError::Quadrature { .. })));
    }
}
