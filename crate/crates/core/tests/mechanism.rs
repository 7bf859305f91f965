mod common;

use common::*;
use fairbid::mechanism::{allocate, utility};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn winner_has_highest_shifted_value(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = random_market(&mut rng, 3, 2, false);
        let alpha = random_alpha(&mut rng, 3, 2, 0.5);
        let bids: Vec<f64> = (0..3).map(|i| mk.dist(i, 1).sample_bid(&mut rng)).collect();
        let out = allocate(&mk, &alpha, 1, &bids, &mut rng).unwrap();
        for (i, &b) in bids.iter().enumerate() {
            let s = mk.dist(i, 1).virtual_of_bid(b).unwrap() + alpha.get(i, 1);
            prop_assert!(s <= out.winning_virtual + 1e-12);
        }
        // The winner never pays more than its bid.
        prop_assert!(out.payment <= bids[out.winner] + 1e-9);
        prop_assert!(utility(&out, out.winner, bids[out.winner]) >= -1e-9);
    }

    #[test]
    fn overbidding_never_helps(seed in 0u64..100_000, factor in 1.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = random_market(&mut rng, 2, 1, false);
        let alpha = random_alpha(&mut rng, 2, 1, 0.5);
        let mut bids: Vec<f64> = (0..2).map(|i| mk.dist(i, 0).sample_bid(&mut rng)).collect();
        let value = bids[0];
        let truthful = utility(&allocate(&mk, &alpha, 0, &bids, &mut rng).unwrap(), 0, value);
        let src = mk.dist(0, 0).source().unwrap();
        let (_, hi) = src.truncated_support();
        bids[0] = (value * factor).min(hi);
        let lie = utility(&allocate(&mk, &alpha, 0, &bids, &mut rng).unwrap(), 0, value);
        prop_assert!(lie <= truthful + 1e-9);
    }
}
