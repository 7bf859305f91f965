//! A single shifted auction: allocation by shifted virtual value and the
//! threshold payment.

use rand::Rng;
use serde::Serialize;

use crate::error::{FairbidError, Result};
use crate::market::{MarketInstance, ShiftMatrix};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuctionOutcome {
    pub winner: usize,
    /// Smallest bid that would still have won; virtual-space when the
    /// winner's distribution is given in virtual space.
    pub payment: f64,
    /// Highest shifted virtual value among the losers.
    pub threshold_virtual: f64,
    /// Winner's shifted virtual value.
    pub winning_virtual: f64,
    pub payment_in_virtual_space: bool,
}

/// Runs one auction for a user of type `type_j`. Ties are broken uniformly
/// at random.
pub fn allocate<R: Rng + ?Sized>(
    market: &MarketInstance,
    alpha: &ShiftMatrix,
    type_j: usize,
    bids: &[f64],
    rng: &mut R,
) -> Result<AuctionOutcome> {
    let n = market.n();
    if bids.len() != n {
        return Err(FairbidError::Shape(format!("{} bids for {n} advertisers", bids.len())));
    }
    if type_j >= market.m() {
        return Err(FairbidError::Shape(format!("type {type_j} out of range for m={}", market.m())));
    }
    let mut shifted = Vec::with_capacity(n);
    for (i, &b) in bids.iter().enumerate() {
        shifted.push(market.dist(i, type_j).virtual_of_bid(b)? + alpha.get(i, type_j));
    }
    allocate_shifted(market, alpha, type_j, &shifted, rng)
}

/// Same as [`allocate`] with the shifted virtual values already computed.
pub(crate) fn allocate_shifted<R: Rng + ?Sized>(
    market: &MarketInstance,
    alpha: &ShiftMatrix,
    type_j: usize,
    shifted: &[f64],
    rng: &mut R,
) -> Result<AuctionOutcome> {
    let best = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..shifted.len()).filter(|&i| shifted[i] == best).collect();
    let winner = match tied.len() {
        0 => return Err(FairbidError::Numerical("no finite shifted virtual value".into())),
        1 => tied[0],
        k => tied[rng.random_range(0..k)],
    };
    let threshold = shifted
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != winner)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let dist = market.dist(winner, type_j);
    let target = threshold - alpha.get(winner, type_j);
    let payment = dist.phi_inverse(target).max(dist.bid_infimum());
    Ok(AuctionOutcome {
        winner,
        payment,
        threshold_virtual: threshold,
        winning_virtual: best,
        payment_in_virtual_space: dist.is_virtual_given(),
    })
}

/// Quasi-linear utility of advertiser `i` with true value `value`.
pub fn utility(outcome: &AuctionOutcome, i: usize, value: f64) -> f64 {
    if outcome.winner == i {
        value - outcome.payment
    } else {
        0.0
    }
}
