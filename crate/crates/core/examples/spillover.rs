//! Two advertisers with equal budgets; the highest bid wins and ties are
//! broken at random. The first only bids on women, the second bids on
//! everyone; men and women arrive alternately. The second advertiser runs
//! out of budget having mostly reached men.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BUDGET: u32 = 30;

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spent = [0u32; 2];
    // shown[advertiser][0 = man, 1 = woman]
    let mut shown = [[0u32; 2]; 2];
    let mut visitor = 0usize;
    while spent.iter().any(|&s| s < BUDGET) {
        let woman = visitor % 2 == 1;
        visitor += 1;
        let bids: Vec<usize> = (0..2)
            .filter(|&a| spent[a] < BUDGET && (woman || a == 1))
            .collect();
        if bids.is_empty() {
            continue;
        }
        let winner = bids[rng.random_range(0..bids.len())];
        spent[winner] += 1;
        shown[winner][woman as usize] += 1;
        if spent[winner] == BUDGET {
            println!("advertiser {} exhausts its budget after {visitor} visitors", winner + 1);
        }
    }
    println!("{:<12}{:>6}{:>8}{:>14}", "advertiser", "men", "women", "women share");
    for (a, s) in shown.iter().enumerate() {
        let share = s[1] as f64 / (s[0] + s[1]) as f64;
        println!("{:<12}{:>6}{:>8}{:>14.3}", a + 1, s[0], s[1], share);
    }
}
