//! Problem instance, fairness bounds and the shift/coverage matrices.

use serde::{Deserialize, Serialize};

use crate::distributions::VirtualDistribution;
use crate::error::{FairbidError, Result};
use crate::matrix::Matrix;

/// `n` advertisers competing for users of `m` types.
#[derive(Clone, Debug)]
pub struct MarketInstance {
    type_prob: Vec<f64>,
    /// Row-major `n x m`.
    dist: Vec<Vec<VirtualDistribution>>,
    advertisers: Vec<String>,
}

impl MarketInstance {
    pub fn new(type_prob: Vec<f64>, dist: Vec<Vec<VirtualDistribution>>) -> Result<Self> {
        let n = dist.len();
        let advertisers = (0..n).map(|i| format!("adv{i}")).collect();
        Self::with_names(type_prob, dist, advertisers)
    }

    pub fn with_names(
        type_prob: Vec<f64>,
        dist: Vec<Vec<VirtualDistribution>>,
        advertisers: Vec<String>,
    ) -> Result<Self> {
        let n = dist.len();
        let m = type_prob.len();
        if n < 2 {
            return Err(FairbidError::Shape(format!("need at least 2 advertisers, got {n}")));
        }
        if m < 1 {
            return Err(FairbidError::Shape("need at least one user type".into()));
        }
        if let Some(i) = dist.iter().position(|row| row.len() != m) {
            return Err(FairbidError::Shape(format!(
                "advertiser {i} has {} distributions, expected {m}",
                dist[i].len()
            )));
        }
        if advertisers.len() != n {
            return Err(FairbidError::Shape(format!("{} advertiser names for {n} advertisers", advertisers.len())));
        }
        if type_prob.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(FairbidError::Parameter("type probabilities must be positive".into()));
        }
        let total: f64 = type_prob.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FairbidError::Parameter(format!("type probabilities sum to {total}, expected 1")));
        }
        Ok(MarketInstance {
            type_prob,
            dist,
            advertisers,
        })
    }

    /// Number of advertisers.
    pub fn n(&self) -> usize {
        self.dist.len()
    }

    /// Number of user types.
    pub fn m(&self) -> usize {
        self.type_prob.len()
    }

    pub fn type_prob(&self) -> &[f64] {
        &self.type_prob
    }

    pub fn dist(&self, i: usize, j: usize) -> &VirtualDistribution {
        &self.dist[i][j]
    }

    /// All advertisers' distributions for type `j`.
    pub fn type_column(&self, j: usize) -> Vec<&VirtualDistribution> {
        self.dist.iter().map(|row| &row[j]).collect()
    }

    pub fn advertisers(&self) -> &[String] {
        &self.advertisers
    }

    /// True when every cell is specified directly in virtual space.
    pub fn is_virtual_given(&self) -> bool {
        self.dist.iter().flatten().all(VirtualDistribution::is_virtual_given)
    }

    /// Index of the gauge advertiser whose shift is pinned to zero.
    pub fn gauge(&self) -> usize {
        self.n() - 1
    }

    /// Length of the reduced (gauge-free) coordinate vector.
    pub fn reduced_len(&self) -> usize {
        (self.n() - 1) * self.m()
    }

    /// Position of `(i, j)`, `i < n - 1`, in reduced vectors: type-major blocks.
    pub fn reduced_index(&self, i: usize, j: usize) -> usize {
        j * (self.n() - 1) + i
    }
}

/// Lower/upper bounds on each advertiser's proportional coverage per type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessSpec {
    pub lower: Matrix,
    pub upper: Matrix,
    /// Advertisers opted out of the constraints get `lower = 0`, `upper = 1`.
    pub constrained: Vec<bool>,
}

impl FairnessSpec {
    pub fn new(lower: Matrix, upper: Matrix, constrained: Vec<bool>) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(FairbidError::Shape(format!(
                "lower is {:?} but upper is {:?}",
                lower.shape(),
                upper.shape()
            )));
        }
        if constrained.len() != lower.rows() {
            return Err(FairbidError::Shape(format!(
                "{} constrained flags for {} advertisers",
                constrained.len(),
                lower.rows()
            )));
        }
        Ok(FairnessSpec {
            lower,
            upper,
            constrained,
        })
    }

    /// No constraints: `lower = 0`, `upper = 1`.
    pub fn unconstrained(n: usize, m: usize) -> Self {
        FairnessSpec {
            lower: Matrix::zeros(n, m),
            upper: Matrix::filled(n, m, 1.0),
            constrained: vec![true; n],
        }
    }

    /// The same lower bound `ell` for every advertiser and type, no upper bound.
    pub fn uniform_lower(n: usize, m: usize, ell: f64) -> Self {
        FairnessSpec {
            lower: Matrix::filled(n, m, ell),
            upper: Matrix::filled(n, m, 1.0),
            constrained: vec![true; n],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.lower.shape()
    }

    /// Bounds after applying the opt-out mask.
    pub fn effective_lower(&self, i: usize, j: usize) -> f64 {
        if self.constrained[i] {
            self.lower[(i, j)]
        } else {
            0.0
        }
    }

    pub fn effective_upper(&self, i: usize, j: usize) -> f64 {
        if self.constrained[i] {
            self.upper[(i, j)]
        } else {
            1.0
        }
    }
}

/// One violated invariant found by [`validate`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    /// Advertiser concerned, if the violation is per-advertiser.
    pub advertiser: Option<usize>,
    /// True for violations that make the polytope empty.
    pub infeasible: bool,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_infeasibility(&self) -> bool {
        self.violations.iter().any(|v| v.infeasible)
    }
}

/// Checks bound ranges and the per-advertiser feasibility sums
/// `sum_j lower_ij <= 1 <= sum_j upper_ij`.
pub fn validate(market: &MarketInstance, spec: &FairnessSpec) -> Result<ValidationReport> {
    let (n, m) = (market.n(), market.m());
    if spec.shape() != (n, m) {
        return Err(FairbidError::Shape(format!(
            "fairness bounds are {:?}, market is ({n}, {m})",
            spec.shape()
        )));
    }
    if spec.constrained.len() != n {
        return Err(FairbidError::Shape(format!(
            "{} constrained flags for {n} advertisers",
            spec.constrained.len()
        )));
    }
    let mut report = ValidationReport::default();
    for i in 0..n {
        let name = &market.advertisers()[i];
        for j in 0..m {
            let (l, u) = (spec.effective_lower(i, j), spec.effective_upper(i, j));
            if !(0.0..=1.0).contains(&l) || !(0.0..=1.0).contains(&u) {
                report.violations.push(Violation {
                    advertiser: Some(i),
                    infeasible: false,
                    message: format!("bounds for advertiser {i} ({name}), type {j} outside [0, 1]: [{l}, {u}]"),
                });
            }
            if l > u {
                report.violations.push(Violation {
                    advertiser: Some(i),
                    infeasible: true,
                    message: format!("lower > upper for advertiser {i} ({name}), type {j}: {l} > {u}"),
                });
            }
        }
        let lsum: f64 = (0..m).map(|j| spec.effective_lower(i, j)).sum();
        let usum: f64 = (0..m).map(|j| spec.effective_upper(i, j)).sum();
        if lsum > 1.0 + 1e-12 {
            report.violations.push(Violation {
                advertiser: Some(i),
                infeasible: true,
                message: format!("sum_j lower_ij <= 1 violated for advertiser {i} ({name}): {lsum}"),
            });
        }
        if usum < 1.0 - 1e-12 {
            report.violations.push(Violation {
                advertiser: Some(i),
                infeasible: true,
                message: format!("sum_j upper_ij >= 1 violated for advertiser {i} ({name}): {usum}"),
            });
        }
    }
    Ok(report)
}

/// Per-advertiser, per-type additive shifts of the virtual values, with the
/// last advertiser's row pinned to zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftMatrix(Matrix);

impl ShiftMatrix {
    pub fn zeros(n: usize, m: usize) -> Self {
        ShiftMatrix(Matrix::zeros(n, m))
    }

    /// Rejects a matrix whose last row is not exactly zero.
    pub fn new(alpha: Matrix) -> Result<Self> {
        if alpha.rows() < 2 {
            return Err(FairbidError::Shape("shift matrix needs at least 2 rows".into()));
        }
        if !alpha.all_finite() {
            return Err(FairbidError::Parameter("shift matrix has non-finite entries".into()));
        }
        let g = alpha.rows() - 1;
        if alpha.row(g).iter().any(|&x| x != 0.0) {
            return Err(FairbidError::Parameter(
                "gauge violated: the last advertiser's shifts must be zero".into(),
            ));
        }
        Ok(ShiftMatrix(alpha))
    }

    /// Subtracts the last row from every row; the allocation is unchanged.
    pub fn gauge_fixed(alpha: &Matrix) -> Result<Self> {
        let g = alpha.rows().saturating_sub(1);
        let fixed = Matrix::from_fn(alpha.rows(), alpha.cols(), |i, j| {
            if i == g {
                0.0
            } else {
                alpha[(i, j)] - alpha[(g, j)]
            }
        });
        Self::new(fixed)
    }

    /// Inverse of [`ShiftMatrix::reduced`].
    pub fn from_reduced(reduced: &[f64], n: usize, m: usize) -> Result<Self> {
        if reduced.len() != (n - 1) * m {
            return Err(FairbidError::Shape(format!(
                "reduced vector has {} entries, expected {}",
                reduced.len(),
                (n - 1) * m
            )));
        }
        Self::new(Matrix::from_fn(n, m, |i, j| if i + 1 == n { 0.0 } else { reduced[j * (n - 1) + i] }))
    }

    /// Non-gauge entries, type-major.
    pub fn reduced(&self) -> Vec<f64> {
        reduced_of(&self.0)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn m(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

impl<'de> Deserialize<'de> for ShiftMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Matrix::deserialize(d)?;
        ShiftMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Joint probabilities `q_ij` that advertiser `i` wins and the user has type `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageMatrix(Matrix);

impl CoverageMatrix {
    pub fn new(q: Matrix) -> Result<Self> {
        if q.iter().any(|&x| !(x >= -1e-12 && x <= 1.0 + 1e-12)) {
            return Err(FairbidError::Parameter("coverage entries must lie in [0, 1]".into()));
        }
        Ok(CoverageMatrix(q))
    }

    /// Skips the range check; for matrices produced by quadrature.
    pub(crate) fn new_unchecked(q: Matrix) -> Self {
        CoverageMatrix(q)
    }

    /// Rebuilds the full matrix from reduced coordinates; the gauge
    /// advertiser gets `type_prob[j] - sum_{i<n-1} q_ij`.
    pub fn from_reduced(reduced: &[f64], type_prob: &[f64], n: usize) -> Result<Self> {
        let m = type_prob.len();
        if reduced.len() != (n - 1) * m {
            return Err(FairbidError::Shape(format!(
                "reduced vector has {} entries, expected {}",
                reduced.len(),
                (n - 1) * m
            )));
        }
        let q = Matrix::from_fn(n, m, |i, j| {
            if i + 1 == n {
                type_prob[j] - (0..n - 1).map(|k| reduced[j * (n - 1) + k]).sum::<f64>()
            } else {
                reduced[j * (n - 1) + i]
            }
        });
        Ok(CoverageMatrix(q))
    }

    pub fn reduced(&self) -> Vec<f64> {
        reduced_of(&self.0)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// `q_ij / sum_t q_it`, zero for advertisers that never win.
    pub fn proportional(&self) -> Matrix {
        let sums = self.0.row_sums();
        Matrix::from_fn(self.0.rows(), self.0.cols(), |i, j| {
            if sums[i] > 0.0 {
                self.0[(i, j)] / sums[i]
            } else {
                0.0
            }
        })
    }
}

fn reduced_of(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut out = Vec::with_capacity((n - 1) * m.cols());
    for j in 0..m.cols() {
        for i in 0..n - 1 {
            out.push(m[(i, j)]);
        }
    }
    out
}
