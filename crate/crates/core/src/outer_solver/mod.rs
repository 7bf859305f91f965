//! Projected gradient ascent on revenue over the fairness polytope.
//!
//! Iterates live in reduced coverage space (the gauge advertiser's coverage
//! is implied). Each step maps the current shifts to a coverage gradient by
//! solving `J^T g = grad rev_shift` per type, steps, projects, and pulls the
//! new coverage target back to shifts with the inner solver.

pub mod polytope;

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::constants::{estimate, AssumptionEstimates};
use crate::coverage::{coverage_of_shift, jacobian, revenue_gradient_of_shift, revenue_of_shift, JacobianBlocks};
use crate::error::{FairbidError, Result};
use crate::inner_solver::{solve_shift, InnerSolverConfig, MAX_ITERS_CAP};
use crate::market::{CoverageMatrix, FairnessSpec, MarketInstance, ShiftMatrix};

pub use polytope::{Constraint, ConstraintKind, Polytope, Projection};

/// Outer iteration cap applied to the derived default.
pub const MAX_OUTER_ITERS: usize = 500;
/// Consecutive small steps before stopping early.
pub const PATIENCE: usize = 10;
/// Consecutive inner failures before aborting.
pub const MAX_INNER_FAILURES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct OuterSolverConfig {
    pub epsilon: f64,
    pub gamma: Option<f64>,
    pub xi: Option<f64>,
    pub max_iters: Option<usize>,
    pub inner_gamma: Option<f64>,
    pub inner_max_iters: Option<usize>,
    /// Coverage floor as a fraction of each type's probability.
    pub min_coverage: f64,
    pub trace: Option<PathBuf>,
}

impl Default for OuterSolverConfig {
    fn default() -> Self {
        OuterSolverConfig {
            epsilon: 1e-4,
            gamma: None,
            xi: None,
            max_iters: None,
            inner_gamma: None,
            inner_max_iters: None,
            min_coverage: 1e-4,
            trace: None,
        }
    }
}

/// Step size, inner accuracy and iteration cap actually used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResolvedParameters {
    pub gamma: f64,
    pub xi: f64,
    pub max_iters: usize,
    /// `epsilon / (2 G^2)` from the estimates, for reference.
    pub gamma_from_estimates: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OuterTraceRow {
    pub iter: usize,
    pub revenue: f64,
    pub loss_inner: f64,
    pub grad_norm: f64,
    pub n_active_constraints: usize,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug)]
pub struct OuterResult {
    pub alpha: ShiftMatrix,
    /// Coverage realized by `alpha`.
    pub coverage: CoverageMatrix,
    /// Projected coverage target the best iterate was solved for.
    pub target: CoverageMatrix,
    pub revenue: f64,
    pub iterations: usize,
    pub best_iter: usize,
    /// Stopped on the small-step criterion rather than the iteration cap.
    pub converged: bool,
    pub estimates: AssumptionEstimates,
    pub parameters: ResolvedParameters,
    pub trace: Vec<OuterTraceRow>,
}

/// Gradient of revenue with respect to reduced coverage at the coverage
/// realized by `alpha`: per type, `J_j^T g_j = (grad rev_shift)_j`.
pub fn revenue_gradient_in_coverage(market: &MarketInstance, alpha: &ShiftMatrix) -> Result<Vec<f64>> {
    let jb = jacobian(market, alpha)?;
    let grad = revenue_gradient_of_shift(market, alpha)?;
    oracle_from_parts(market, &jb, &grad)
}

fn oracle_from_parts(market: &MarketInstance, jb: &JacobianBlocks, grad: &crate::Matrix) -> Result<Vec<f64>> {
    let k = market.n() - 1;
    let mut out = Vec::with_capacity(k * market.m());
    for (j, block) in jb.blocks.iter().enumerate() {
        let jt = DMatrix::from_fn(k, k, |r, c| block[(c, r)]);
        let rhs = DVector::from_fn(k, |i, _| grad[(i, j)]);
        let sol = jt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| FairbidError::Numerical(format!("singular Jacobian block for type {j}")))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(FairbidError::Numerical(format!("non-finite coverage gradient for type {j}")));
        }
        out.extend(sol.iter());
    }
    Ok(out)
}

/// Smallest eigenvalue over the (symmetric) Jacobian blocks.
fn min_block_eigenvalue(jb: &JacobianBlocks) -> f64 {
    jb.blocks
        .iter()
        .map(|b| {
            let k = b.rows();
            let sym = DMatrix::from_fn(k, k, |r, c| 0.5 * (b[(r, c)] + b[(c, r)]));
            SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

fn resolve(cfg: &OuterSolverConfig, est: &AssumptionEstimates, curvature_step: f64) -> ResolvedParameters {
    let g = est.g;
    let usable = g.is_finite() && g > 0.0;
    let gamma_from_estimates = if usable { cfg.epsilon / (2.0 * g * g) } else { f64::NAN };
    let gamma = cfg.gamma.unwrap_or(curvature_step);
    let xi_cap = (0.1 * cfg.epsilon).powi(2);
    let xi = cfg.xi.unwrap_or_else(|| {
        let from_g = (g * gamma).powi(2);
        if usable && from_g.is_finite() {
            from_g.min(xi_cap)
        } else {
            xi_cap
        }
    });
    let max_iters = cfg.max_iters.unwrap_or_else(|| {
        let t = (std::f64::consts::SQRT_2 * g / cfg.epsilon).powi(2);
        if usable && t.is_finite() {
            (t.ceil() as usize).clamp(1, MAX_OUTER_ITERS)
        } else {
            MAX_OUTER_ITERS
        }
    });
    ResolvedParameters {
        gamma,
        xi,
        max_iters,
        gamma_from_estimates,
    }
}

fn check_config(cfg: &OuterSolverConfig) -> Result<()> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(FairbidError::Config("epsilon must be positive".into()));
    }
    for (name, v) in [("gamma", cfg.gamma), ("xi", cfg.xi), ("inner_gamma", cfg.inner_gamma)] {
        if v.is_some_and(|x| !(x > 0.0 && x.is_finite())) {
            return Err(FairbidError::Config(format!("{name} must be positive")));
        }
    }
    if !(0.0..0.5).contains(&cfg.min_coverage) {
        return Err(FairbidError::Config("min_coverage must lie in [0, 0.5)".into()));
    }
    Ok(())
}

/// Maximizes revenue over the shifted mechanisms whose coverage satisfies
/// `spec`. Returns the best iterate seen.
pub fn solve(market: &MarketInstance, spec: &FairnessSpec, cfg: &OuterSolverConfig) -> Result<OuterResult> {
    check_config(cfg)?;
    let start = Instant::now();
    let (n, m) = (market.n(), market.m());
    let poly = Polytope::new(market, spec, cfg.min_coverage)?;
    let zero = ShiftMatrix::zeros(n, m);
    let estimates = estimate(market, &zero)?;
    let q0 = coverage_of_shift(market, &zero)?;
    let curvature = min_block_eigenvalue(&crate::coverage::jacobian_unchecked(market, &zero)?);
    let curvature_step = if curvature.is_finite() && curvature > 0.0 { curvature } else { 1e-2 };
    let params = resolve(cfg, &estimates, curvature_step);
    let inner_cfg = InnerSolverConfig {
        step_size: cfg.inner_gamma.unwrap_or(1.0),
        max_iters: cfg.inner_max_iters.unwrap_or(MAX_ITERS_CAP),
        target_loss: params.xi,
        trace: None,
    };
    log::info!(
        "outer solver: gamma={:.3e} xi={:.3e} T={} (estimate-based gamma {:.3e})",
        params.gamma,
        params.xi,
        params.max_iters,
        params.gamma_from_estimates
    );

    let mut x = poly.project(&q0.reduced())?.x;
    let to_matrix = |x: &[f64]| CoverageMatrix::from_reduced(x, market.type_prob(), n);
    let first = solve_shift(market, &to_matrix(&x)?, &zero, &inner_cfg)?;
    if !first.converged {
        log::warn!("initial inner solve stopped at loss {:.3e}", first.loss);
    }
    let mut alpha = first.alpha;
    let mut inner_loss = first.loss;
    let mut revenue = revenue_of_shift(market, &alpha)?;
    let mut best = (alpha.clone(), x.clone(), revenue, 0usize);
    let mut trace = vec![OuterTraceRow {
        iter: 0,
        revenue,
        loss_inner: inner_loss,
        grad_norm: f64::NAN,
        n_active_constraints: poly.count_active(&x, 1e-9),
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    }];
    let small_step = 1e-2 * cfg.epsilon;
    let mut quiet = 0;
    let mut failures = 0;
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=params.max_iters {
        iterations = t;
        let jb = jacobian(market, &alpha)?;
        let grad_shift = revenue_gradient_of_shift(market, &alpha)?;
        let g = oracle_from_parts(market, &jb, &grad_shift)?;
        let stepped: Vec<f64> = x.iter().zip(&g).map(|(q, g)| q + params.gamma * g).collect();
        let next = poly.project(&stepped)?.x;
        let dq = next.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let inner = solve_shift(market, &to_matrix(&next)?, &alpha, &inner_cfg)?;
        if inner.converged {
            failures = 0;
        } else {
            failures += 1;
            log::warn!("inner solver did not reach {:.3e} (loss {:.3e}) at outer iteration {t}", params.xi, inner.loss);
            if failures >= MAX_INNER_FAILURES {
                return Err(FairbidError::Numerical(format!(
                    "inner solver failed {MAX_INNER_FAILURES} times in a row (last loss {:.3e}); \
                     the coverage target may be unreachable or the step size too large",
                    inner.loss
                )));
            }
        }
        x = next;
        alpha = inner.alpha;
        inner_loss = inner.loss;
        revenue = revenue_of_shift(market, &alpha)?;
        if inner.converged && revenue > best.2 {
            best = (alpha.clone(), x.clone(), revenue, t);
        }
        trace.push(OuterTraceRow {
            iter: t,
            revenue,
            loss_inner: inner_loss,
            grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            n_active_constraints: poly.count_active(&x, 1e-9),
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        quiet = if dq < small_step { quiet + 1 } else { 0 };
        if quiet >= PATIENCE {
            converged = true;
            break;
        }
    }
    if let Some(path) = &cfg.trace {
        write_trace(path, &trace)?;
    }
    let (alpha, target, revenue, best_iter) = best;
    Ok(OuterResult {
        coverage: coverage_of_shift(market, &alpha)?,
        target: to_matrix(&target)?,
        alpha,
        revenue,
        iterations,
        best_iter,
        converged,
        estimates,
        parameters: params,
        trace,
    })
}

pub fn write_trace(path: &std::path::Path, rows: &[OuterTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| FairbidError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GivenDensity, VirtualDistribution};

    fn exp_pair() -> MarketInstance {
        let d = VirtualDistribution::virtual_given(GivenDensity::Exponential { rate: 1.0, loc: 0.0 }).unwrap();
        MarketInstance::new(vec![1.0], vec![vec![d.clone()], vec![d]]).unwrap()
    }

    #[test]
    fn coverage_gradient_is_minus_alpha_on_exponential_pair() {
        let mk = exp_pair();
        for a in [0.0, std::f64::consts::LN_2, 1.5] {
            let g = revenue_gradient_in_coverage(&mk, &ShiftMatrix::from_reduced(&[a], 2, 1).unwrap()).unwrap();
            assert!((g[0] + a).abs() < 1e-7, "{a}: {}", g[0]);
        }
    }

    #[test]
    fn unconstrained_symmetric_stays_at_zero() {
        let mk = exp_pair();
        let res = solve(&mk, &FairnessSpec::unconstrained(2, 1), &OuterSolverConfig::default()).unwrap();
        assert!(res.alpha.get(0, 0).abs() < 1e-6);
        assert!((res.revenue - 1.5).abs() < 1e-7);
        assert!(res.converged);
    }
}
