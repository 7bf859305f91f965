//! Monte-Carlo auction campaigns and the fairness metrics comparing two
//! mechanisms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FairbidError, Result};
use crate::market::{CoverageMatrix, MarketInstance, ShiftMatrix};
use crate::matrix::Matrix;
use crate::mechanism::allocate_shifted;

/// Samples per RNG stream.
pub const CHUNK: u64 = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    fn from_sums(sum: f64, sum_sq: f64, count: u64) -> Self {
        let nf = count as f64;
        let mean = sum / nf;
        let var = if count > 1 {
            ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / nf).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationReport {
    pub samples: u64,
    pub seed: u64,
    pub empirical_q: Matrix,
    /// `sqrt(p (1 - p) / samples)` per entry.
    pub q_stderr: Matrix,
    /// Mean virtual value of the winner, the estimator of `rev_shift`.
    pub revenue: Estimate,
    /// Mean threshold payment.
    pub payment: Estimate,
    /// Payments are virtual-space amounts (every cell given in virtual space).
    pub payments_in_virtual_space: bool,
    pub win_counts: Vec<Vec<u64>>,
    pub wins_per_advertiser: Vec<u64>,
}

#[derive(Clone)]
struct Tally {
    counts: Vec<u64>,
    surplus: f64,
    surplus_sq: f64,
    pay: f64,
    pay_sq: f64,
}

impl Tally {
    fn new(cells: usize) -> Self {
        Tally {
            counts: vec![0; cells],
            surplus: 0.0,
            surplus_sq: 0.0,
            pay: 0.0,
            pay_sq: 0.0,
        }
    }

    fn merge(mut self, other: &Tally) -> Tally {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.surplus += other.surplus;
        self.surplus_sq += other.surplus_sq;
        self.pay += other.pay;
        self.pay_sq += other.pay_sq;
        self
    }
}

fn run_chunk(market: &MarketInstance, alpha: &ShiftMatrix, cumulative: &[f64], seed: u64, chunk: u64, count: u64) -> Result<Tally> {
    let (n, m) = (market.n(), market.m());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    let mut tally = Tally::new(n * m);
    let mut shifted = vec![0.0; n];
    for _ in 0..count {
        let u: f64 = rng.random();
        let j = cumulative.partition_point(|&c| c <= u).min(m - 1);
        for (i, s) in shifted.iter_mut().enumerate() {
            let d = market.dist(i, j);
            let bid = d.sample_bid(&mut rng);
            *s = d.virtual_of_bid(bid)? + alpha.get(i, j);
        }
        let out = allocate_shifted(market, alpha, j, &shifted, &mut rng)?;
        tally.counts[out.winner * m + j] += 1;
        let phi = out.winning_virtual - alpha.get(out.winner, j);
        tally.surplus += phi;
        tally.surplus_sq += phi * phi;
        tally.pay += out.payment;
        tally.pay_sq += out.payment * out.payment;
    }
    Ok(tally)
}

/// Runs `n_samples` auctions under `alpha`. Deterministic in `seed`
/// regardless of thread count.
pub fn simulate(market: &MarketInstance, alpha: &ShiftMatrix, n_samples: u64, seed: u64) -> Result<SimulationReport> {
    if n_samples == 0 {
        return Err(FairbidError::Parameter("need at least one sample".into()));
    }
    let (n, m) = (market.n(), market.m());
    if alpha.matrix().shape() != (n, m) {
        return Err(FairbidError::Shape("shift matrix does not match the market".into()));
    }
    let mut cumulative = Vec::with_capacity(m);
    let mut acc = 0.0;
    for &p in market.type_prob() {
        acc += p;
        cumulative.push(acc);
    }
    let chunks = n_samples.div_ceil(CHUNK);
    let tallies = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(n_samples - c * CHUNK);
            run_chunk(market, alpha, &cumulative, seed, c, count)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = tallies.iter().fold(Tally::new(n * m), |a, t| a.merge(t));
    let nf = n_samples as f64;
    let empirical_q = Matrix::from_fn(n, m, |i, j| total.counts[i * m + j] as f64 / nf);
    let q_stderr = empirical_q.map(|p| (p * (1.0 - p) / nf).sqrt());
    let win_counts: Vec<Vec<u64>> = (0..n).map(|i| total.counts[i * m..(i + 1) * m].to_vec()).collect();
    let wins_per_advertiser = win_counts.iter().map(|r| r.iter().sum()).collect();
    Ok(SimulationReport {
        samples: n_samples,
        seed,
        empirical_q,
        q_stderr,
        revenue: Estimate::from_sums(total.surplus, total.surplus_sq, n_samples),
        payment: Estimate::from_sums(total.pay, total.pay_sq, n_samples),
        payments_in_virtual_space: market.is_virtual_given(),
        win_counts,
        wins_per_advertiser,
    })
}

/// Coverage and revenue of one mechanism, exact or simulated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MechanismSummary {
    pub coverage: Matrix,
    pub revenue: f64,
}

impl MechanismSummary {
    pub fn exact(coverage: &CoverageMatrix, revenue: f64) -> Self {
        MechanismSummary {
            coverage: coverage.matrix().clone(),
            revenue,
        }
    }
}

impl From<&SimulationReport> for MechanismSummary {
    fn from(r: &SimulationReport) -> Self {
        MechanismSummary {
            coverage: r.empirical_q.clone(),
            revenue: r.revenue.mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FairnessMetrics {
    /// `rev_F / rev_M`.
    pub kappa: f64,
    /// Half the l1 distance between the advertisers' total win shares.
    pub d_tv: f64,
    /// Selection lift of `F` on proportional coverage.
    pub slift: f64,
}

/// `1/2 sum_i |sum_j a_ij - sum_j b_ij|`.
pub fn total_variation(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(FairbidError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(0.5 * a.row_sums().iter().zip(b.row_sums()).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// `min_ij p_ij / (1 - p_ij)` over proportional coverage
/// `p_ij = q_ij / sum_t q_it`.
pub fn selection_lift(q: &Matrix) -> f64 {
    let p = CoverageMatrix::new_unchecked(q.clone()).proportional();
    p.iter().map(|&x| x / (1.0 - x)).fold(f64::INFINITY, f64::min)
}

/// Compares the fair mechanism `f` against the unconstrained `m`.
pub fn metrics(m: &MechanismSummary, f: &MechanismSummary) -> Result<FairnessMetrics> {
    if m.revenue == 0.0 {
        return Err(FairbidError::UndefinedKappa);
    }
    Ok(FairnessMetrics {
        kappa: f.revenue / m.revenue,
        d_tv: total_variation(&m.coverage, &f.coverage)?,
        slift: selection_lift(&f.coverage),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GivenDensity, VirtualDistribution};

    fn summary(rows: &[Vec<f64>], revenue: f64) -> MechanismSummary {
        MechanismSummary {
            coverage: Matrix::from_rows(rows).unwrap(),
            revenue,
        }
    }

    #[test]
    fn identical_mechanisms() {
        let a = summary(&[vec![0.3, 0.2], vec![0.2, 0.3]], 1.2);
        let mt = metrics(&a, &a).unwrap();
        assert_eq!(mt.kappa, 1.0);
        assert_eq!(mt.d_tv, 0.0);
        assert_eq!(mt.slift, selection_lift(&a.coverage));
    }

    #[test]
    fn balanced_coverage_has_unit_slift() {
        assert!((selection_lift(&Matrix::from_rows(&[vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tv_of_win_shares() {
        let a = Matrix::from_rows(&[vec![0.6], vec![0.4]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.55], vec![0.45]]).unwrap();
        assert!((total_variation(&a, &b).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_reference_revenue() {
        let a = summary(&[vec![0.5], vec![0.5]], 0.0);
        assert!(matches!(metrics(&a, &a), Err(FairbidError::UndefinedKappa)));
    }

    #[test]
    fn seeded_runs_are_identical_and_sum_to_one() {
        let d = VirtualDistribution::virtual_given(GivenDensity::Exponential { rate: 1.0, loc: 0.0 }).unwrap();
        let mk = MarketInstance::new(vec![1.0], vec![vec![d.clone()], vec![d]]).unwrap();
        let a = simulate(&mk, &ShiftMatrix::zeros(2, 1), 50_000, 3).unwrap();
        let b = simulate(&mk, &ShiftMatrix::zeros(2, 1), 50_000, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.wins_per_advertiser.iter().sum::<u64>(), 50_000);
        assert!((a.revenue.mean - 1.5).abs() < 4.0 * a.revenue.stderr);
    }
}
