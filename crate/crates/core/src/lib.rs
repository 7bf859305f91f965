//! Fairness-constrained revenue-optimal single-slot ad auctions.
//!
//! The optimal mechanism under per-advertiser proportional coverage bounds
//! allocates to the highest *shifted* virtual value `phi_ij(v) + alpha_ij`.
//! Finding the shifts is done in coverage space: projected gradient ascent
//! on the (concave) revenue-of-coverage over the fairness polytope, with
//! the coverage map inverted at every step by a first-order descent on
//! `||delta - q(alpha)||^2`.
//!
//! Module map:
//!
//! * [`distributions`]: valuation distributions, virtual valuations, regularity.
//! * [`market`]: problem instance, fairness bounds, shift/coverage matrices.
//! * [`mechanism`]: a single shifted auction with threshold payments.
//! * [`coverage`]: `q(alpha)`, `rev_shift(alpha)`, gradients and Jacobian blocks.
//! * [`constants`]: grid estimates of the regularity constants used for step sizes.
//! * [`inner_solver`]: inversion of the coverage map.
//! * [`outer_solver`]: projected gradient ascent and the polytope projection.
//! * [`simulator`]: Monte-Carlo campaigns and fairness metrics.
//! * [`ingest`]: bid-log parsing, filtering, keyword pairing and fitting.
//! * [`cli`]: the `fairbid` command-line driver.

pub mod cli;
pub mod config;
pub mod constants;
pub mod coverage;
pub mod distributions;
pub mod error;
pub mod ingest;
pub mod inner_solver;
pub mod market;
pub mod matrix;
pub mod mechanism;
pub mod outer_solver;
pub mod quadrature;
pub mod simulator;

pub use error::{FairbidError, Result};
pub use market::{CoverageMatrix, FairnessSpec, MarketInstance, ShiftMatrix};
pub use matrix::Matrix;
