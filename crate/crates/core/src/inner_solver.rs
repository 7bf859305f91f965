//! Inversion of the coverage map: find shifts `alpha` with `q(alpha) = delta`
//! by descent on `L(alpha) = sum_{i<n-1, j} (delta_ij - q_ij(alpha))^2`.
//!
//! The loss separates over types, so every type is solved on its own. Each
//! step is a Barzilai-Borwein trial step (falling back to the configured
//! `step_size`) followed by Armijo backtracking.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use crate::constants::AssumptionEstimates;
use crate::coverage::{coverage_of_type, jacobian_of_type};
use crate::error::{FairbidError, Result};
use crate::market::{CoverageMatrix, MarketInstance, ShiftMatrix};
use crate::matrix::Matrix;

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
/// Cap applied to the iteration count derived from the estimates.
pub const MAX_ITERS_CAP: usize = 5_000;

#[derive(Clone, Debug, PartialEq)]
pub struct InnerSolverConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop once the total loss is below this.
    pub target_loss: f64,
    /// Optional CSV trace destination.
    pub trace: Option<PathBuf>,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        InnerSolverConfig {
            step_size: 1.0,
            max_iters: 2_000,
            target_loss: 1e-14,
            trace: None,
        }
    }
}

impl InnerSolverConfig {
    /// `gamma = 1 / (4 n L + 2 n^3 mu_max^2)` and
    /// `T = log(m n^3 L(alpha_1) / eps) (L + n^2 mu_max^2) / (eta mu_min)^2`,
    /// the latter capped at [`MAX_ITERS_CAP`].
    pub fn from_estimates(
        est: &AssumptionEstimates,
        n: usize,
        m: usize,
        initial_loss: f64,
        eps: f64,
        target_loss: f64,
    ) -> Self {
        let nf = n as f64;
        let gamma = 1.0 / (4.0 * nf * est.lipschitz_l + 2.0 * nf.powi(3) * est.mu_max.powi(2));
        let ratio = (m as f64 * nf.powi(3) * initial_loss / eps).max(std::f64::consts::E);
        let t = ratio.ln() * (est.lipschitz_l + nf * nf * est.mu_max.powi(2)) / (est.eta * est.mu_min).powi(2);
        let max_iters = if t.is_finite() && t >= 1.0 {
            (t.ceil() as usize).min(MAX_ITERS_CAP)
        } else {
            MAX_ITERS_CAP
        };
        InnerSolverConfig {
            step_size: if gamma.is_finite() && gamma > 0.0 { gamma } else { 1.0 },
            max_iters,
            target_loss,
            trace: None,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(FairbidError::Parameter("inner step size must be positive".into()));
        }
        if !(self.target_loss > 0.0) {
            return Err(FairbidError::Parameter("inner target loss must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InnerTraceRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerResult {
    pub alpha: ShiftMatrix,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// A type stopped with a vanishing gradient while its loss was above target.
    pub stationary: bool,
    pub trace: Vec<InnerTraceRow>,
}

fn with_gauge(reduced: &[f64]) -> Vec<f64> {
    let mut full = reduced.to_vec();
    full.push(0.0);
    full
}

/// Loss and gradient of one type's subproblem, over the `n - 1` reduced
/// shifts and targets.
pub fn type_loss_and_gradient(market: &MarketInstance, j: usize, delta: &[f64], reduced: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = market.n() - 1;
    let shifts = with_gauge(reduced);
    let shifts = shifts.as_slice();
    let q = coverage_of_type(market, shifts, j)?;
    let r: Vec<f64> = (0..k).map(|i| delta[i] - q[i]).collect();
    let (block, _) = jacobian_of_type(market, shifts, j)?;
    let grad = (0..k).map(|s| -2.0 * (0..k).map(|i| block[(i, s)] * r[i]).sum::<f64>()).collect();
    Ok((r.iter().map(|x| x * x).sum(), grad))
}

/// `L(alpha)` and its gradient, both over reduced coordinates; the gradient
/// has a zero gauge row.
pub fn loss_and_gradient(market: &MarketInstance, delta: &CoverageMatrix, alpha: &ShiftMatrix) -> Result<(f64, Matrix)> {
    let (n, m) = (market.n(), market.m());
    let parts = (0..m)
        .into_par_iter()
        .map(|j| {
            let k = n - 1;
            type_loss_and_gradient(market, j, &delta.matrix().col(j)[..k], &alpha.matrix().col(j)[..k])
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|p| p.0).sum();
    let grad = Matrix::from_fn(n, m, |i, j| if i + 1 == n { 0.0 } else { parts[j].1[i] });
    Ok((loss, grad))
}

struct TypeRun {
    shifts: Vec<f64>,
    loss: f64,
    converged: bool,
    stationary: bool,
    /// `(loss, grad_norm, step)` after each iteration, starting at the initial point.
    history: Vec<(f64, f64, f64)>,
}

fn loss_of(market: &MarketInstance, j: usize, delta: &[f64], reduced: &[f64]) -> Result<f64> {
    let q = coverage_of_type(market, &with_gauge(reduced), j)?;
    Ok((0..delta.len()).map(|i| (delta[i] - q[i]).powi(2)).sum())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn solve_type(market: &MarketInstance, j: usize, delta: &[f64], init: &[f64], cfg: &InnerSolverConfig) -> Result<TypeRun> {
    let target = cfg.target_loss / market.m() as f64;
    let mut x = init.to_vec();
    let (mut loss, mut grad) = type_loss_and_gradient(market, j, delta, &x)?;
    let mut history = vec![(loss, norm(&grad), 0.0)];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut converged = loss < target;
    let mut stationary = false;
    for _ in 0..cfg.max_iters {
        if converged {
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(FairbidError::Numerical(format!("non-finite loss gradient for type {j}")));
        }
        let gsq: f64 = grad.iter().map(|g| g * g).sum();
        if gsq.sqrt() <= 1e-300 {
            stationary = true;
            break;
        }
        let mut step = match &prev {
            Some((px, pg)) => {
                let s: Vec<f64> = x.iter().zip(px).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = grad.iter().zip(pg).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                let ss: f64 = s.iter().map(|a| a * a).sum();
                if sy > 0.0 && (ss / sy).is_finite() {
                    ss / sy
                } else {
                    cfg.step_size
                }
            }
            None => cfg.step_size,
        };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let l = loss_of(market, j, delta, &trial)?;
            if l <= loss - ARMIJO * step * gsq {
                accepted = Some((trial, l));
                break;
            }
            step *= 0.5;
        }
        let Some((next, _)) = accepted else {
            // no decrease at any step length: loss is at the quadrature floor
            break;
        };
        let (nl, ng) = type_loss_and_gradient(market, j, delta, &next)?;
        prev = Some((std::mem::replace(&mut x, next), std::mem::replace(&mut grad, ng)));
        loss = nl;
        history.push((loss, norm(&grad), step));
        converged = loss < target;
    }
    Ok(TypeRun {
        shifts: x,
        loss,
        converged,
        stationary,
        history,
    })
}

/// Finds `alpha` with `q(alpha)` close to `delta` (first `n - 1` rows),
/// starting from `alpha_init`. Returns the final iterate with a convergence
/// flag instead of failing when the target loss is not reached.
pub fn solve_shift(
    market: &MarketInstance,
    delta: &CoverageMatrix,
    alpha_init: &ShiftMatrix,
    cfg: &InnerSolverConfig,
) -> Result<InnerResult> {
    cfg.check()?;
    let (n, m) = (market.n(), market.m());
    if delta.matrix().shape() != (n, m) || alpha_init.matrix().shape() != (n, m) {
        return Err(FairbidError::Shape("target coverage or initial shift does not match the market".into()));
    }
    for j in 0..m {
        let mut total = 0.0;
        for i in 0..n - 1 {
            let d = delta.get(i, j);
            if !(d > 0.0 && d < 1.0) {
                return Err(FairbidError::Parameter(format!("target coverage ({i}, {j}) = {d} outside (0, 1)")));
            }
            total += d;
        }
        if !(total < market.type_prob()[j]) {
            return Err(FairbidError::Parameter(format!(
                "target coverage of type {j} leaves nothing for the gauge advertiser"
            )));
        }
    }
    let runs = (0..m)
        .into_par_iter()
        .map(|j| {
            let d = delta.matrix().col(j);
            solve_type(market, j, &d[..n - 1], &alpha_init.matrix().col(j)[..n - 1], cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let iterations = runs.iter().map(|r| r.history.len() - 1).max().unwrap_or(0);
    let trace = (0..=iterations)
        .map(|t| {
            let at = |r: &TypeRun| r.history[t.min(r.history.len() - 1)];
            let loss = runs.iter().map(|r| at(r).0).sum();
            let grad_norm = runs.iter().map(|r| at(r).1.powi(2)).sum::<f64>().sqrt();
            let step = runs.iter().map(|r| if t < r.history.len() { at(r).2 } else { 0.0 }).fold(0.0, f64::max);
            InnerTraceRow {
                iter: t,
                loss,
                grad_norm,
                step,
            }
        })
        .collect::<Vec<_>>();
    let alpha = ShiftMatrix::new(Matrix::from_fn(n, m, |i, j| if i + 1 == n { 0.0 } else { runs[j].shifts[i] }))?;
    let loss: f64 = runs.iter().map(|r| r.loss).sum();
    let converged = loss < cfg.target_loss || runs.iter().all(|r| r.converged);
    let stationary = runs.iter().any(|r| r.stationary && !r.converged);
    if let Some(path) = &cfg.trace {
        write_trace(path, &trace)?;
    }
    if !converged {
        log::debug!("inner solver stopped at loss {loss:.3e} after {iterations} iterations");
    }
    Ok(InnerResult {
        alpha,
        loss,
        iterations,
        converged,
        stationary,
        trace,
    })
}

pub fn write_trace(path: &std::path::Path, rows: &[InnerTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| FairbidError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::coverage_of_shift;
    use crate::distributions::{GivenDensity, VirtualDistribution};

    fn exp_pair() -> MarketInstance {
        let d = VirtualDistribution::virtual_given(GivenDensity::Exponential { rate: 1.0, loc: 0.0 }).unwrap();
        MarketInstance::new(vec![1.0], vec![vec![d.clone()], vec![d]]).unwrap()
    }

    #[test]
    fn inverts_exponential_pair() {
        let mk = exp_pair();
        let delta = CoverageMatrix::new(Matrix::from_rows(&[vec![0.75], vec![0.25]]).unwrap()).unwrap();
        let res = solve_shift(&mk, &delta, &ShiftMatrix::zeros(2, 1), &InnerSolverConfig::default()).unwrap();
        assert!(res.converged);
        assert!((res.alpha.get(0, 0) - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_takes_zero_iterations() {
        let mk = exp_pair();
        let a = ShiftMatrix::from_reduced(&[0.3], 2, 1).unwrap();
        let q = coverage_of_shift(&mk, &a).unwrap();
        let res = solve_shift(&mk, &q, &a, &InnerSolverConfig::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.alpha, a);
    }

    #[test]
    fn rejects_unreachable_targets() {
        let mk = exp_pair();
        let delta = CoverageMatrix::new(Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap()).unwrap();
        assert!(solve_shift(&mk, &delta, &ShiftMatrix::zeros(2, 1), &InnerSolverConfig::default()).is_err());
    }
}
