//! Coverage, revenue and their derivatives as functions of the shifts.
//!
//! Every quantity is a one-dimensional integral over the winner's virtual
//! value `y` of `f_i(y) * prod_k F_k(y + a_i - a_k)`, optionally weighted by
//! `y` or with one CDF factor replaced by the matching density.

use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::VirtualDistribution;
use crate::error::{FairbidError, Result};
use crate::market::{CoverageMatrix, MarketInstance, ShiftMatrix};
use crate::matrix::Matrix;
use crate::quadrature::{breakpoints_within, integrate_segments, QuadratureRule};

const OWN_QUANTILES: [f64; 23] = [
    1e-8, 1e-6, 1e-4, 1e-3, 0.01, 0.03, 0.06, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.94, 0.97, 0.99,
    0.999, 0.9999, 1.0 - 1e-6, 1.0 - 1e-8,
];
const OPPONENT_QUANTILES: [f64; 9] = [1e-6, 1e-3, 0.01, 0.1, 0.5, 0.9, 0.99, 0.999, 1.0 - 1e-6];

/// What to integrate against `f_i(y) dy`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Integrand {
    /// Multiply by the winner's virtual value.
    y_weight: bool,
    /// Replace opponent `s`'s CDF by its density.
    density_of: Option<usize>,
}

/// `int g(y) f_i(y) prod_{k != i} H_k(y + a_i - a_k) dy` for one type, in
/// the base coordinates of advertiser `i`.
fn cell_integral(
    column: &[&VirtualDistribution],
    shifts: &[f64],
    i: usize,
    what: Integrand,
    rule: &QuadratureRule,
) -> Result<f64> {
    let di = column[i];
    let (a, b) = di.base_interval();
    let mut interior: Vec<f64> = OWN_QUANTILES.iter().map(|&p| di.base_quantile(p)).collect();
    for (k, dk) in column.iter().enumerate() {
        if k == i {
            continue;
        }
        let offset = shifts[k] - shifts[i];
        let (lo, hi) = dk.support();
        let quantiles = OPPONENT_QUANTILES.iter().map(|&p| dk.quantile(p));
        for y in [lo, hi].into_iter().chain(quantiles) {
            let y = y + offset;
            let (vlo, vhi) = di.support();
            if y > vlo && y < vhi {
                interior.push(di.base_of_virtual(y));
            }
        }
    }
    let breaks = breakpoints_within(a, b, interior);
    let f = |x: f64| {
        let w = di.base_density(x);
        if w == 0.0 {
            return 0.0;
        }
        let y = di.virtual_at_base(x);
        let mut prod = w;
        for (k, dk) in column.iter().enumerate() {
            if k == i {
                continue;
            }
            let arg = y + shifts[i] - shifts[k];
            prod *= if what.density_of == Some(k) {
                dk.density(arg)
            } else {
                dk.cdf(arg)
            };
            if prod == 0.0 {
                return 0.0;
            }
        }
        if what.y_weight {
            prod * y
        } else {
            prod
        }
    };
    integrate_segments(f, &breaks, rule)
}

fn shifts_of(alpha: &Matrix, j: usize) -> Vec<f64> {
    alpha.col(j)
}

fn check_shape(market: &MarketInstance, alpha: &Matrix) -> Result<()> {
    if alpha.shape() != (market.n(), market.m()) {
        return Err(FairbidError::Shape(format!(
            "shift matrix is {:?}, market is ({}, {})",
            alpha.shape(),
            market.n(),
            market.m()
        )));
    }
    Ok(())
}

/// `q_ij` for one type; the gauge advertiser's entry is recovered as
/// `Pr_j - sum_{i<n-1} q_ij`.
pub fn coverage_of_type(market: &MarketInstance, shifts: &[f64], j: usize) -> Result<Vec<f64>> {
    let rule = QuadratureRule::default();
    let column = market.type_column(j);
    let pr = market.type_prob()[j];
    let n = market.n();
    let mut q = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            cell_integral(&column, shifts, i, Integrand { y_weight: false, density_of: None }, &rule).map(|v| pr * v)
        })
        .collect::<Result<Vec<_>>>()?;
    let rest: f64 = q.iter().sum();
    q.push(pr - rest);
    Ok(q)
}

/// `q(alpha)` as an `n x m` matrix.
pub fn coverage_of_shift(market: &MarketInstance, alpha: &ShiftMatrix) -> Result<CoverageMatrix> {
    check_shape(market, alpha.matrix())?;
    let cols = (0..market.m())
        .into_par_iter()
        .map(|j| coverage_of_type(market, &shifts_of(alpha.matrix(), j), j))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageMatrix::new_unchecked(Matrix::from_fn(market.n(), market.m(), |i, j| cols[j][i])))
}

/// Every entry integrated directly, for any (not necessarily gauge-fixed)
/// shift matrix. Used to check conservation and gauge invariance.
pub fn coverage_all_quadrature(market: &MarketInstance, alpha: &Matrix) -> Result<Matrix> {
    check_shape(market, alpha)?;
    let rule = QuadratureRule::default();
    let (n, m) = (market.n(), market.m());
    let cells = (0..n * m)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c / m, c % m);
            let column = market.type_column(j);
            cell_integral(
                &column,
                &shifts_of(alpha, j),
                i,
                Integrand { y_weight: false, density_of: None },
                &rule,
            )
            .map(|v| market.type_prob()[j] * v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_fn(n, m, |i, j| cells[i * m + j]))
}

/// Expected virtual surplus contributed by type `j` (including `Pr_j`).
pub fn revenue_of_type(market: &MarketInstance, shifts: &[f64], j: usize) -> Result<f64> {
    let rule = QuadratureRule::default();
    let column = market.type_column(j);
    let parts = (0..market.n())
        .into_par_iter()
        .map(|i| cell_integral(&column, shifts, i, Integrand { y_weight: true, density_of: None }, &rule))
        .collect::<Result<Vec<_>>>()?;
    Ok(market.type_prob()[j] * parts.iter().sum::<f64>())
}

/// Expected revenue (virtual surplus) of the shifted mechanism.
pub fn revenue_of_shift(market: &MarketInstance, alpha: &ShiftMatrix) -> Result<f64> {
    revenue_of_matrix(market, alpha.matrix())
}

/// [`revenue_of_shift`] for an arbitrary shift matrix.
pub fn revenue_of_matrix(market: &MarketInstance, alpha: &Matrix) -> Result<f64> {
    check_shape(market, alpha)?;
    let per_type = (0..market.m())
        .into_par_iter()
        .map(|j| revenue_of_type(market, &shifts_of(alpha, j), j))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_type.iter().sum())
}

/// Pairwise tie densities `P[i][s] = Pr_j int f_i(y) f_s(y + a_i - a_s) prod F dy`
/// for one type; symmetric with zero diagonal.
fn pair_densities(market: &MarketInstance, shifts: &[f64], j: usize) -> Result<Vec<Vec<f64>>> {
    let rule = QuadratureRule::default();
    let column = market.type_column(j);
    let n = market.n();
    let pr = market.type_prob()[j];
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |s| (i, s))).collect();
    let vals = pairs
        .par_iter()
        .map(|&(i, s)| {
            cell_integral(&column, shifts, i, Integrand { y_weight: false, density_of: Some(s) }, &rule)
                .map(|v| pr * v)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut p = vec![vec![0.0; n]; n];
    for (&(i, s), v) in pairs.iter().zip(vals) {
        p[i][s] = v;
        p[s][i] = v;
    }
    Ok(p)
}

/// `d rev_shift / d alpha_ij` by the two-integral form: for each opponent
/// `k`, the gain from `i` winning with `k` at its threshold minus the loss
/// from `k` losing to `i` at `i`'s threshold.
pub fn revenue_gradient_of_type(market: &MarketInstance, shifts: &[f64], j: usize) -> Result<Vec<f64>> {
    let rule = QuadratureRule::default();
    let column = market.type_column(j);
    let n = market.n();
    let pr = market.type_prob()[j];
    let cells: Vec<(usize, usize)> = (0..n - 1).flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k))).collect();
    let terms = cells
        .par_iter()
        .map(|&(i, k)| {
            let gain = cell_integral(&column, shifts, i, Integrand { y_weight: true, density_of: Some(k) }, &rule)?;
            let loss = cell_integral(&column, shifts, k, Integrand { y_weight: true, density_of: Some(i) }, &rule)?;
            Ok(gain - loss)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; n];
    for (&(i, _), t) in cells.iter().zip(terms) {
        grad[i] += pr * t;
    }
    Ok(grad)
}

/// Gradient of `rev_shift` as an `n x m` matrix with a zero gauge row.
pub fn revenue_gradient_of_shift(market: &MarketInstance, alpha: &ShiftMatrix) -> Result<Matrix> {
    check_shape(market, alpha.matrix())?;
    let cols = (0..market.m())
        .into_par_iter()
        .map(|j| revenue_gradient_of_type(market, &shifts_of(alpha.matrix(), j), j))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_fn(market.n(), market.m(), |i, j| cols[j][i]))
}

/// Per-type Jacobian blocks of the reduced coverage map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JacobianBlocks {
    /// `blocks[j][(i, s)] = d q_ij / d alpha_sj` for `i, s < n - 1`.
    pub blocks: Vec<Matrix>,
    /// `gauge[j][i] = d q_ij / d alpha_{n-1, j}`.
    pub gauge: Vec<Vec<f64>>,
}

impl JacobianBlocks {
    /// Row sums over all `n` columns, gauge included.
    pub fn full_row_sums(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .zip(&self.gauge)
            .map(|(b, g)| b.row_sums().iter().zip(g).map(|(r, g)| r + g).collect())
            .collect()
    }

    /// Strict diagonal dominance over the reduced columns, per block.
    pub fn check_dominance(&self) -> Result<()> {
        for (j, b) in self.blocks.iter().enumerate() {
            for i in 0..b.rows() {
                let off: f64 = (0..b.cols()).filter(|&s| s != i).map(|s| b[(i, s)].abs()).sum();
                if !(b[(i, i)] > off) {
                    return Err(FairbidError::Degenerate { row: i, type_index: j });
                }
            }
        }
        Ok(())
    }

    /// Dense `(n-1)m` square matrix in reduced ordering.
    pub fn dense(&self) -> Matrix {
        let k = self.blocks.first().map_or(0, Matrix::rows);
        let size = k * self.blocks.len();
        let mut out = Matrix::zeros(size, size);
        for (j, b) in self.blocks.iter().enumerate() {
            for i in 0..k {
                for s in 0..k {
                    out[(j * k + i, j * k + s)] = b[(i, s)];
                }
            }
        }
        out
    }
}

/// Block for one type plus its gauge column, without the dominance check.
pub fn jacobian_of_type(market: &MarketInstance, shifts: &[f64], j: usize) -> Result<(Matrix, Vec<f64>)> {
    let n = market.n();
    let p = pair_densities(market, shifts, j)?;
    let block = Matrix::from_fn(n - 1, n - 1, |i, s| {
        if i == s {
            (0..n).filter(|&t| t != i).map(|t| p[i][t]).sum()
        } else {
            -p[i][s]
        }
    });
    let gauge = (0..n - 1).map(|i| -p[i][n - 1]).collect();
    Ok((block, gauge))
}

/// Jacobian blocks without the dominance check.
pub fn jacobian_unchecked(market: &MarketInstance, alpha: &ShiftMatrix) -> Result<JacobianBlocks> {
    check_shape(market, alpha.matrix())?;
    let parts = (0..market.m())
        .into_par_iter()
        .map(|j| jacobian_of_type(market, &shifts_of(alpha.matrix(), j), j))
        .collect::<Result<Vec<_>>>()?;
    let (blocks, gauge) = parts.into_iter().unzip();
    Ok(JacobianBlocks { blocks, gauge })
}

/// Jacobian blocks; fails if any block is not strictly diagonally dominant.
pub fn jacobian(market: &MarketInstance, alpha: &ShiftMatrix) -> Result<JacobianBlocks> {
    let jb = jacobian_unchecked(market, alpha)?;
    jb.check_dominance()?;
    Ok(jb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GivenDensity, ValuationDistribution};

    fn exp_pair() -> MarketInstance {
        let d = VirtualDistribution::virtual_given(GivenDensity::Exponential { rate: 1.0, loc: 0.0 }).unwrap();
        MarketInstance::new(vec![1.0], vec![vec![d.clone()], vec![d]]).unwrap()
    }

    fn shift1(a: f64) -> ShiftMatrix {
        ShiftMatrix::from_reduced(&[a], 2, 1).unwrap()
    }

    #[test]
    fn exponential_pair_closed_forms() {
        let mk = exp_pair();
        for a in [0.0, 0.5, 1.0, 2.0] {
            let q = coverage_of_shift(&mk, &shift1(a)).unwrap();
            assert!((q.get(0, 0) - (1.0 - 0.5 * (-a).exp())).abs() < 1e-9);
            let r = revenue_of_shift(&mk, &shift1(a)).unwrap();
            // tail truncation at the 1e-10 quantile costs ~y e^-y there
            assert!((r - (1.0 + 0.5 * (a + 1.0) * (-a).exp())).abs() < 1e-8, "{a} {r}");
            let g = revenue_gradient_of_shift(&mk, &shift1(a)).unwrap();
            assert!((g[(0, 0)] + 0.5 * a * (-a).exp()).abs() < 1e-9, "{a} {}", g[(0, 0)]);
            assert_eq!(g[(1, 0)], 0.0);
            let jb = jacobian(&mk, &shift1(a)).unwrap();
            assert!((jb.blocks[0][(0, 0)] - 0.5 * (-a).exp()).abs() < 1e-9, "{a} {}", jb.blocks[0][(0, 0)]);
        }
    }

    #[test]
    fn symmetric_instance_splits_evenly() {
        let d = VirtualDistribution::from_valuation(ValuationDistribution::LogNormal { mu: 0.0, sigma: 0.5 }).unwrap();
        let mk = MarketInstance::new(vec![0.3, 0.7], vec![vec![d.clone(); 2]; 3]).unwrap();
        let q = coverage_of_shift(&mk, &ShiftMatrix::zeros(3, 2)).unwrap();
        for i in 0..3 {
            assert!((q.get(i, 0) - 0.1).abs() < 1e-8);
            assert!((q.get(i, 1) - 0.7 / 3.0).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_virtual_pair_revenue() {
        // E[max(Y1, Y2)] for Y ~ U[-1, 1] is 1/3
        let d = VirtualDistribution::virtual_given(GivenDensity::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let mk = MarketInstance::new(vec![1.0], vec![vec![d.clone()], vec![d]]).unwrap();
        let r = revenue_of_shift(&mk, &ShiftMatrix::zeros(2, 1)).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-10);
    }
}
