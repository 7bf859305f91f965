mod common;

use fairbid::constants::estimate;
use fairbid::distributions::{GivenDensity, VirtualDistribution};
use fairbid::{MarketInstance, ShiftMatrix};

#[test]
fn uniform_pair_constants() {
    // Flat density 1/2 on [-1, 1], zero mean, even split at zero shift.
    let d = VirtualDistribution::virtual_given(GivenDensity::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
    let mk = MarketInstance::new(vec![1.0], vec![vec![d.clone()], vec![d]]).unwrap();
    let est = estimate(&mk, &ShiftMatrix::zeros(2, 1)).unwrap();
    assert!((est.mu_min - 0.5).abs() < 1e-12 && (est.mu_max - 0.5).abs() < 1e-12);
    assert!(est.lipschitz_l.abs() < 1e-9);
    assert!(est.rho.abs() < 1e-7);
    assert!((est.eta - 0.5).abs() < 1e-9);
    assert!(!est.mu_min_warning);
}

#[test]
fn normal_pair_lipschitz_constant() {
    // Largest slope of the standard normal density is exp(-1/2) / sqrt(2 pi).
    let d = VirtualDistribution::virtual_given(GivenDensity::Normal { mu: 0.0, sigma: 1.0 }).unwrap();
    let mk = MarketInstance::new(vec![1.0], vec![vec![d.clone()], vec![d]]).unwrap();
    let est = estimate(&mk, &ShiftMatrix::zeros(2, 1)).unwrap();
    let expected = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    assert!((est.lipschitz_l - expected).abs() < 1e-2 * expected);
    assert!((est.mu_max - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-4);
}
