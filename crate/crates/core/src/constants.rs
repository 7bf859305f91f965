//! Grid estimates of the density and coverage constants that set the
//! default step sizes and iteration counts of both solvers.

use serde::Serialize;

use crate::coverage::coverage_of_shift;
use crate::distributions::{TRUNCATION_HI, TRUNCATION_LO};
use crate::error::Result;
use crate::market::{MarketInstance, ShiftMatrix};

/// Points in the quantile grid per distribution.
pub const GRID_SIZE: usize = 512;
/// Coverage floor used for `eta`.
pub const ETA_FLOOR: f64 = 1e-6;
/// `mu_min` below this triggers a warning.
pub const MU_MIN_WARN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AssumptionEstimates {
    pub eta: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub lipschitz_l: f64,
    pub rho: f64,
    /// Lipschitz constant of revenue in coverage space.
    pub g: f64,
    /// Set when `mu_min` is below [`MU_MIN_WARN`].
    pub mu_min_warning: bool,
}

/// Estimates on the standard truncated support.
pub fn estimate(market: &MarketInstance, alpha0: &ShiftMatrix) -> Result<AssumptionEstimates> {
    estimate_with_tail(market, alpha0, TRUNCATION_LO)
}

/// Estimates on the quantile grid `[tail, 1 - tail]` of every `f_ij`.
pub fn estimate_with_tail(market: &MarketInstance, alpha0: &ShiftMatrix, tail: f64) -> Result<AssumptionEstimates> {
    let tail = tail.clamp(TRUNCATION_LO, 0.25);
    let hi = if tail == TRUNCATION_LO { TRUNCATION_HI } else { 1.0 - tail };
    let (n, m) = (market.n(), market.m());
    let mut mu_min = f64::INFINITY;
    let mut mu_max: f64 = 0.0;
    let mut lip: f64 = 0.0;
    let mut rho: f64 = 0.0;
    for i in 0..n {
        for j in 0..m {
            let d = market.dist(i, j);
            let mut prev: Option<(f64, f64)> = None;
            for k in 0..GRID_SIZE {
                let p = tail + (hi - tail) * k as f64 / (GRID_SIZE - 1) as f64;
                let y = d.quantile(p);
                let f = d.density(y);
                mu_min = mu_min.min(f);
                mu_max = mu_max.max(f);
                if let Some((py, pf)) = prev {
                    if y > py {
                        lip = lip.max((f - pf).abs() / (y - py));
                    }
                }
                prev = Some((y, f));
            }
            rho = rho.max(d.mean()?.abs());
        }
    }
    let q = coverage_of_shift(market, alpha0)?;
    let eta = q.matrix().iter().copied().fold(f64::INFINITY, f64::min).max(ETA_FLOOR);
    let g = mu_max * rho / (mu_min * eta) * (n * n) as f64;
    let mu_min_warning = mu_min < MU_MIN_WARN;
    if mu_min_warning {
        log::warn!(
            "density lower bound {mu_min:.3e} is below {MU_MIN_WARN:e}; the estimate-based outer step size is degenerate"
        );
    }
    Ok(AssumptionEstimates {
        eta,
        mu_min,
        mu_max,
        lipschitz_l: lip,
        rho,
        g,
        mu_min_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GivenDensity, VirtualDistribution};

    fn pair(g: GivenDensity) -> MarketInstance {
        let d = VirtualDistribution::virtual_given(g).unwrap();
        MarketInstance::new(vec![1.0], vec![vec![d.clone()], vec![d]]).unwrap()
    }

    #[test]
    fn exponential_pair() {
        let mk = pair(GivenDensity::Exponential { rate: 1.0, loc: 0.0 });
        let est = estimate(&mk, &ShiftMatrix::zeros(2, 1)).unwrap();
        assert!((est.eta - 0.5).abs() < 1e-9);
        assert!((est.rho - 1.0).abs() < 1e-7);
        assert!((est.mu_max - (1.0 - TRUNCATION_LO)).abs() < 1e-12);
        // density at the upper truncation quantile
        assert!((est.mu_min / 1e-10 - 1.0).abs() < 1e-3);
        let expected_g = est.mu_max * est.rho / (est.mu_min * est.eta) * 4.0;
        assert!((est.g - expected_g).abs() <= 1e-12 * expected_g);
    }

    #[test]
    fn uniform_pair_has_flat_density() {
        let mk = pair(GivenDensity::Uniform { lo: -1.0, hi: 1.0 });
        let est = estimate(&mk, &ShiftMatrix::zeros(2, 1)).unwrap();
        assert_eq!(est.mu_min, 0.5);
        assert_eq!(est.mu_max, 0.5);
        assert_eq!(est.lipschitz_l, 0.0);
        assert!(est.rho < 1e-12);
    }

    #[test]
    fn widening_never_raises_mu_min() {
        let mk = pair(GivenDensity::Normal { mu: 0.0, sigma: 1.0 });
        let a = ShiftMatrix::zeros(2, 1);
        let mut last = f64::INFINITY;
        for tail in [0.1, 1e-2, 1e-4, 1e-7, 1e-10] {
            let est = estimate_with_tail(&mk, &a, tail).unwrap();
            assert!(est.mu_min <= last);
            last = est.mu_min;
        }
    }
}
