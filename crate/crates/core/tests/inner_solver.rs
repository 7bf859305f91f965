mod common;

use common::*;
use fairbid::coverage::coverage_of_shift;
use fairbid::inner_solver::{solve_shift, write_trace, InnerSolverConfig};
use fairbid::{CoverageMatrix, Matrix, ShiftMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn three_quarters_coverage_needs_log_two() {
    // q = 1 - exp(-alpha) / 2 = 3/4 gives alpha = ln 2.
    let mk = exp_pair();
    let delta = CoverageMatrix::new(Matrix::from_rows(&[vec![0.75], vec![0.25]]).unwrap()).unwrap();
    let res = solve_shift(&mk, &delta, &ShiftMatrix::zeros(2, 1), &InnerSolverConfig::default()).unwrap();
    assert!(res.converged);
    assert!((res.alpha.get(0, 0) - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn target_outside_the_simplex_is_rejected() {
    let mk = exp_pair();
    let delta = CoverageMatrix::new(Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap()).unwrap();
    assert!(solve_shift(&mk, &delta, &ShiftMatrix::zeros(2, 1), &InnerSolverConfig::default()).is_err());
}

#[test]
fn warm_start_at_the_answer_stops_immediately() {
    let mk = exp_pair_two_types();
    let alpha = ShiftMatrix::new(Matrix::from_rows(&[vec![0.4, -0.3], vec![0.0, 0.0]]).unwrap()).unwrap();
    let delta = coverage_of_shift(&mk, &alpha).unwrap();
    let res = solve_shift(&mk, &delta, &alpha, &InnerSolverConfig::default()).unwrap();
    assert!(res.converged);
    assert!(res.iterations <= 1);
}

#[test]
fn trace_is_written() {
    let mk = exp_pair();
    let delta = CoverageMatrix::new(Matrix::from_rows(&[vec![0.6], vec![0.4]]).unwrap()).unwrap();
    let cfg = InnerSolverConfig {
        trace: None,
        ..Default::default()
    };
    let res = solve_shift(&mk, &delta, &ShiftMatrix::zeros(2, 1), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inner.csv");
    write_trace(&path, &res.trace).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("iter,loss,grad_norm,step"));
    assert_eq!(text.lines().count(), res.trace.len() + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn recovers_random_shifts(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = random_market(&mut rng, 3, 2, true);
        let truth = random_alpha(&mut rng, 3, 2, 0.5);
        let delta = coverage_of_shift(&mk, &truth).unwrap();
        let res = solve_shift(&mk, &delta, &ShiftMatrix::zeros(3, 2), &InnerSolverConfig::default()).unwrap();
        prop_assert!(res.converged);
        prop_assert!(res.alpha.matrix().max_abs_diff(truth.matrix()) < 1e-4);
    }
}
