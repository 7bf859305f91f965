//! The fairness polytope over reduced coverage and Euclidean projection onto
//! it by a dual active-set method (Goldfarb-Idnani with identity Hessian).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{FairbidError, Result};
use crate::market::{validate, FairnessSpec, MarketInstance};

/// Tolerance for accepting a constraint as satisfied.
pub const FEAS_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ConstraintKind {
    Lower { advertiser: usize, type_index: usize },
    Upper { advertiser: usize, type_index: usize },
    NonNegative { advertiser: usize, type_index: usize },
    Custom,
}

/// `a . x >= b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Constraint {
    pub a: Vec<f64>,
    pub b: f64,
    pub kind: ConstraintKind,
}

impl Constraint {
    pub fn slack(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() - self.b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Polytope {
    dim: usize,
    constraints: Vec<Constraint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub x: Vec<f64>,
    /// Indices of constraints active at the solution.
    pub active: Vec<usize>,
    /// Multipliers of the active constraints, same order.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

/// Affine form `c + a . x` of one advertiser's coverage of one type.
fn coverage_form(n: usize, m: usize, pr: &[f64], i: usize, j: usize) -> (Vec<f64>, f64) {
    let k = n - 1;
    let mut a = vec![0.0; k * m];
    if i < k {
        a[j * k + i] = 1.0;
        (a, 0.0)
    } else {
        for s in 0..k {
            a[j * k + s] = -1.0;
        }
        (a, pr[j])
    }
}

impl Polytope {
    pub fn from_constraints(dim: usize, constraints: Vec<Constraint>) -> Result<Self> {
        if let Some(c) = constraints.iter().find(|c| c.a.len() != dim) {
            return Err(FairbidError::Shape(format!("constraint of width {} in dimension {dim}", c.a.len())));
        }
        if constraints.iter().any(|c| !c.b.is_finite() || c.a.iter().any(|v| !v.is_finite())) {
            return Err(FairbidError::Parameter("non-finite constraint row".into()));
        }
        Ok(Polytope { dim, constraints })
    }

    /// Constraints over reduced coverage: lower and upper proportional
    /// bounds for every advertiser (the gauge one through its implied
    /// coverage `Pr_j - sum x`), and `q_ij >= margin * Pr_j` for all `i`.
    /// Fails with an infeasibility error if the polytope is empty.
    pub fn new(market: &MarketInstance, spec: &FairnessSpec, margin: f64) -> Result<Self> {
        let report = validate(market, spec)?;
        if let Some(v) = report.violations.iter().find(|v| v.infeasible) {
            return Err(FairbidError::Infeasible(v.message.clone()));
        }
        if let Some(v) = report.violations.first() {
            return Err(FairbidError::Parameter(v.message.clone()));
        }
        let (n, m) = (market.n(), market.m());
        let pr = market.type_prob();
        let dim = (n - 1) * m;
        let mut rows = Vec::new();
        for i in 0..n {
            let forms: Vec<(Vec<f64>, f64)> = (0..m).map(|j| coverage_form(n, m, pr, i, j)).collect();
            let total_a: Vec<f64> = (0..dim).map(|c| forms.iter().map(|f| f.0[c]).sum()).collect();
            let total_c: f64 = forms.iter().map(|f| f.1).sum();
            for j in 0..m {
                let (qa, qc) = &forms[j];
                let l = spec.effective_lower(i, j);
                let u = spec.effective_upper(i, j);
                if l > 0.0 {
                    // q_ij - l T_i >= 0
                    rows.push(Constraint {
                        a: qa.iter().zip(&total_a).map(|(q, t)| q - l * t).collect(),
                        b: -(qc - l * total_c),
                        kind: ConstraintKind::Lower { advertiser: i, type_index: j },
                    });
                }
                if u < 1.0 {
                    // u T_i - q_ij >= 0
                    rows.push(Constraint {
                        a: qa.iter().zip(&total_a).map(|(q, t)| u * t - q).collect(),
                        b: -(u * total_c - qc),
                        kind: ConstraintKind::Upper { advertiser: i, type_index: j },
                    });
                }
                rows.push(Constraint {
                    a: qa.clone(),
                    b: margin * pr[j] - qc,
                    kind: ConstraintKind::NonNegative { advertiser: i, type_index: j },
                });
            }
        }
        let poly = Polytope::from_constraints(dim, rows)?;
        let centre: Vec<f64> = (0..dim).map(|c| pr[c / (n - 1)] / n as f64).collect();
        poly.project(&centre)?;
        Ok(poly)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    /// Largest constraint violation at `x` (zero if feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints.iter().map(|c| (-c.slack(x)).max(0.0)).fold(0.0, f64::max)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.max_violation(x) <= tol
    }

    /// Number of constraints with slack below `tol` at `x`.
    pub fn count_active(&self, x: &[f64], tol: f64) -> usize {
        self.constraints.iter().filter(|c| c.slack(x).abs() <= tol).count()
    }

    /// `argmin_{x in Q} ||x - point||`.
    pub fn project(&self, point: &[f64]) -> Result<Projection> {
        if point.len() != self.dim {
            return Err(FairbidError::Shape(format!("point of length {} in dimension {}", point.len(), self.dim)));
        }
        let d = self.dim;
        let cap = 10 * self.constraints.len().max(1);
        let mut x = DVector::from_column_slice(point);
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut iterations = 0;
        let normal = |p: usize| DVector::from_column_slice(&self.constraints[p].a);
        let slack = |x: &DVector<f64>, p: usize| self.constraints[p].slack(x.as_slice());

        loop {
            // most violated constraint, scaled by its normal
            let mut pick: Option<(usize, f64)> = None;
            for p in 0..self.constraints.len() {
                if active.contains(&p) {
                    continue;
                }
                let nrm = normal(p).norm().max(f64::MIN_POSITIVE);
                let s = slack(&x, p) / nrm;
                let tol = FEAS_TOL * (1.0 + self.constraints[p].b.abs() / nrm);
                if s < -tol && pick.is_none_or(|(_, best)| s < best) {
                    pick = Some((p, s));
                }
            }
            let Some((p, _)) = pick else {
                return Ok(Projection {
                    x: x.as_slice().to_vec(),
                    active,
                    multipliers: u,
                    iterations,
                });
            };
            let np = normal(p);
            let mut u_plus = 0.0;
            loop {
                iterations += 1;
                if iterations > cap {
                    return Err(FairbidError::Numerical(format!(
                        "projection did not terminate within {cap} active-set changes"
                    )));
                }
                let (z, r) = directions(&self.constraints, &active, &np, d);
                let z_norm = z.norm();
                let t1 = r
                    .iter()
                    .enumerate()
                    .filter(|&(_, &rj)| rj > 0.0)
                    .map(|(k, &rj)| (u[k] / rj, k))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                // A full active set spans the space, so no primal step is left.
                let full = if active.len() < d && z_norm > 1e-10 * np.norm() {
                    Some(-slack(&x, p) / z.dot(&np))
                } else {
                    None
                };
                match (full, t1) {
                    (None, None) => {
                        return Err(FairbidError::Infeasible(
                            "fairness polytope is empty (constraints are inconsistent)".into(),
                        ))
                    }
                    (None, Some((t, l))) => {
                        // dual-only step, then drop the blocking constraint
                        for (k, rk) in r.iter().enumerate() {
                            u[k] -= t * rk;
                        }
                        u_plus += t;
                        active.remove(l);
                        u.remove(l);
                    }
                    (Some(t2), blocking) => {
                        let (t, drop) = match blocking {
                            Some((t1v, l)) if t1v < t2 => (t1v, Some(l)),
                            _ => (t2, None),
                        };
                        x += &z * t;
                        for (k, rk) in r.iter().enumerate() {
                            u[k] -= t * rk;
                        }
                        u_plus += t;
                        match drop {
                            None => {
                                active.push(p);
                                u.push(u_plus);
                                break;
                            }
                            Some(l) => {
                                active.remove(l);
                                u.remove(l);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Primal step `z = (I - N N^+) n` and dual step `r = N^+ n` for the active
/// normals `N`.
fn directions(constraints: &[Constraint], active: &[usize], np: &DVector<f64>, d: usize) -> (DVector<f64>, Vec<f64>) {
    if active.is_empty() {
        return (np.clone(), Vec::new());
    }
    let nmat = DMatrix::from_fn(d, active.len(), |row, col| constraints[active[col]].a[row]);
    let qr = nmat.clone().qr();
    let rhs = qr.q().transpose() * np;
    let r = qr
        .r()
        .solve_upper_triangular(&rhs)
        .unwrap_or_else(|| DVector::zeros(active.len()));
    let z = np - &nmat * &r;
    (z, r.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GivenDensity, VirtualDistribution};
    use crate::matrix::Matrix;

    fn half_market(n: usize, m: usize) -> MarketInstance {
        let d = VirtualDistribution::virtual_given(GivenDensity::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        MarketInstance::new(vec![1.0 / m as f64; m], vec![vec![d; m]; n]).unwrap()
    }

    #[test]
    fn coupled_upper_bounds_can_empty_the_polytope() {
        // Both advertisers cap their type-0 share near 0.652 while type 0
        // carries 0.679 of the traffic; the vertex at the origin is
        // degenerate and must not overfill the active set.
        let d = VirtualDistribution::virtual_given(GivenDensity::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        let pr0 = 0.6794336622039369;
        let mk = MarketInstance::new(vec![pr0, 1.0 - pr0], vec![vec![d; 2]; 2]).unwrap();
        let upper = Matrix::from_rows(&[vec![0.6517910636827388, 0.6], vec![0.6517818706670249, 0.6]]).unwrap();
        let spec = FairnessSpec::new(Matrix::zeros(2, 2), upper, vec![true, true]).unwrap();
        assert!(matches!(Polytope::new(&mk, &spec, 0.0), Err(FairbidError::Infeasible(_))));
    }

    #[test]
    fn interior_point_is_unchanged() {
        let mk = half_market(2, 2);
        let poly = Polytope::new(&mk, &FairnessSpec::uniform_lower(2, 2, 0.3), 0.0).unwrap();
        let p = poly.project(&[0.25, 0.25]).unwrap();
        assert_eq!(p.x, vec![0.25, 0.25]);
        assert!(p.active.is_empty());
    }

    #[test]
    fn perfect_fairness_segment() {
        let mk = half_market(2, 2);
        let poly = Polytope::new(&mk, &FairnessSpec::uniform_lower(2, 2, 0.5), 0.0).unwrap();
        let p = poly.project(&[0.5, 0.0]).unwrap();
        assert!((p.x[0] - 0.25).abs() < 1e-12 && (p.x[1] - 0.25).abs() < 1e-12);
        assert!(poly.contains(&p.x, 1e-12));
        assert!(p.multipliers.iter().all(|&u| u >= -1e-9));
    }

    #[test]
    fn single_constraint_is_clipping() {
        // only the gauge advertiser's nonnegativity is violated
        let mk = half_market(3, 1);
        let poly = Polytope::new(&mk, &FairnessSpec::unconstrained(3, 1), 0.0).unwrap();
        let p = poly.project(&[0.7, 0.5]).unwrap();
        // clip along (-1, -1) / sqrt 2 by the excess 0.2
        assert!((p.x[0] - 0.6).abs() < 1e-12 && (p.x[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn unequal_types_cannot_be_perfectly_fair() {
        let d = VirtualDistribution::virtual_given(GivenDensity::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        let mk = MarketInstance::new(vec![0.3, 0.7], vec![vec![d; 2]; 2]).unwrap();
        let spec = FairnessSpec::new(Matrix::filled(2, 2, 0.5), Matrix::filled(2, 2, 1.0), vec![true; 2]).unwrap();
        assert!(matches!(Polytope::new(&mk, &spec, 0.0), Err(FairbidError::Infeasible(_))));
    }

    #[test]
    fn infeasible_bounds_are_reported_by_advertiser() {
        let mk = half_market(2, 2);
        let mut lower = Matrix::zeros(2, 2);
        lower[(1, 0)] = 0.6;
        lower[(1, 1)] = 0.6;
        let spec = FairnessSpec::new(lower, Matrix::filled(2, 2, 1.0), vec![true; 2]).unwrap();
        match Polytope::new(&mk, &spec, 0.0) {
            Err(FairbidError::Infeasible(msg)) => assert!(msg.contains("advertiser 1")),
            other => panic!("{other:?}"),
        }
    }
}
