mod common;

use common::*;
use fairbid::market::validate;
use fairbid::{CoverageMatrix, FairbidError, FairnessSpec, Matrix, ShiftMatrix};

#[test]
fn lower_bounds_summing_past_one_name_the_advertiser() {
    let mk = exp_pair_two_types();
    let spec = FairnessSpec::new(
        Matrix::from_rows(&[vec![0.0, 0.0], vec![0.6, 0.5]]).unwrap(),
        Matrix::filled(2, 2, 1.0),
        vec![true, true],
    )
    .unwrap();
    let report = validate(&mk, &spec).unwrap();
    assert!(report.has_infeasibility());
    let v = report.violations.iter().find(|v| v.infeasible).unwrap();
    assert_eq!(v.advertiser, Some(1));
    assert!(v.message.contains("advertiser 1"));
}

#[test]
fn upper_bounds_summing_below_one_are_infeasible() {
    let mk = exp_pair_two_types();
    let spec = FairnessSpec::new(
        Matrix::zeros(2, 2),
        Matrix::from_rows(&[vec![0.4, 0.5], vec![1.0, 1.0]]).unwrap(),
        vec![true, true],
    )
    .unwrap();
    assert!(validate(&mk, &spec).unwrap().has_infeasibility());
}

#[test]
fn perfect_fairness_is_feasible() {
    let mk = exp_pair_two_types();
    let report = validate(&mk, &FairnessSpec::uniform_lower(2, 2, 0.5)).unwrap();
    assert!(!report.has_infeasibility());
}

#[test]
fn gauge_row_must_be_zero() {
    let bad = Matrix::from_rows(&[vec![0.1], vec![0.2]]).unwrap();
    assert!(ShiftMatrix::new(bad.clone()).is_err());
    let fixed = ShiftMatrix::gauge_fixed(&bad).unwrap();
    assert!((fixed.get(0, 0) + 0.1).abs() < 1e-15);
    assert_eq!(fixed.get(1, 0), 0.0);
}

#[test]
fn coverage_outside_unit_interval_is_rejected() {
    assert!(CoverageMatrix::new(Matrix::from_rows(&[vec![1.2], vec![-0.2]]).unwrap()).is_err());
}

#[test]
fn type_probabilities_must_sum_to_one() {
    let d = exp_given(1.0);
    let r = fairbid::MarketInstance::new(vec![0.5, 0.6], vec![vec![d.clone(), d.clone()], vec![d.clone(), d]]);
    assert!(matches!(r, Err(FairbidError::Parameter(_)) | Err(FairbidError::Shape(_))));
}

#[test]
fn proportional_coverage_rows_sum_to_one() {
    let q = CoverageMatrix::new(Matrix::from_rows(&[vec![0.3, 0.1], vec![0.2, 0.4]]).unwrap()).unwrap();
    let p = q.proportional();
    for s in p.row_sums() {
        assert!((s - 1.0).abs() < 1e-15);
    }
    assert!((p[(0, 0)] - 0.75).abs() < 1e-15);
}
