//! Random instances shared by the integration tests.
#![allow(dead_code)]

use fairbid::distributions::{GivenDensity, ValuationDistribution, VirtualDistribution};
use fairbid::{MarketInstance, Matrix, ShiftMatrix};
use rand::Rng;

pub fn exp_given(rate: f64) -> VirtualDistribution {
    VirtualDistribution::virtual_given(GivenDensity::Exponential { rate, loc: 0.0 }).unwrap()
}

/// Two identical unit-rate exponential virtual values, one type.
pub fn exp_pair() -> MarketInstance {
    MarketInstance::new(vec![1.0], vec![vec![exp_given(1.0)], vec![exp_given(1.0)]]).unwrap()
}

/// The same pair on two equally likely types.
pub fn exp_pair_two_types() -> MarketInstance {
    let d = exp_given(1.0);
    MarketInstance::new(vec![0.5, 0.5], vec![vec![d.clone(), d.clone()], vec![d.clone(), d]]).unwrap()
}

pub fn random_valuation<R: Rng>(rng: &mut R) -> ValuationDistribution {
    match rng.random_range(0..4) {
        0 => ValuationDistribution::Exponential {
            rate: rng.random_range(0.7..1.5),
        },
        1 => {
            let lo = rng.random_range(0.0..0.5);
            ValuationDistribution::Uniform {
                lo,
                hi: lo + rng.random_range(1.0..2.0),
            }
        }
        2 => ValuationDistribution::LogNormal {
            mu: rng.random_range(-0.3..0.3),
            sigma: rng.random_range(0.3..0.6),
        },
        _ => {
            let mu = rng.random_range(0.8..1.2);
            let sigma = rng.random_range(0.3..0.6);
            ValuationDistribution::TruncatedNormal {
                mu,
                sigma,
                lo: 0.0,
                hi: mu + 3.0 * sigma,
            }
        }
    }
}

pub fn random_cell<R: Rng>(rng: &mut R, allow_given: bool) -> VirtualDistribution {
    if allow_given && rng.random_bool(0.25) {
        let g = if rng.random_bool(0.5) {
            GivenDensity::Normal {
                mu: rng.random_range(0.0..0.5),
                sigma: rng.random_range(0.3..0.7),
            }
        } else {
            GivenDensity::Uniform {
                lo: rng.random_range(-1.0..-0.5),
                hi: rng.random_range(0.8..1.5),
            }
        };
        return VirtualDistribution::virtual_given(g).unwrap();
    }
    VirtualDistribution::from_valuation(random_valuation(rng)).unwrap()
}

pub fn random_type_prob<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Mixed-family market with valuation-derived cells and, if allowed,
/// some cells given directly in virtual space.
pub fn random_market<R: Rng>(rng: &mut R, n: usize, m: usize, allow_given: bool) -> MarketInstance {
    let dist = (0..n)
        .map(|_| (0..m).map(|_| random_cell(rng, allow_given)).collect())
        .collect();
    MarketInstance::new(random_type_prob(rng, m), dist).unwrap()
}

/// Shifts uniform in `[-width, width]` with the gauge row at zero.
pub fn random_alpha<R: Rng>(rng: &mut R, n: usize, m: usize, width: f64) -> ShiftMatrix {
    let a = Matrix::from_fn(n, m, |i, _| if i + 1 == n { 0.0 } else { rng.random_range(-width..width) });
    ShiftMatrix::new(a).unwrap()
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
}
