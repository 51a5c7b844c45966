//! Shared fixtures for the criterion benches.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fasw_core::data::Label;
use fasw_core::metrics::ScoreSet;

/// `n` scores, half spoof, spoof scores shifted up by `shift`.
pub fn score_set(n: usize, shift: f64, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let spoof = i % 2 == 0;
        let s: f64 = rng.random_range(0.0..1.0);
        scores.push(if spoof { s + shift } else { s });
        labels.push(if spoof { Label::Spoof } else { Label::Live });
    }
    ScoreSet::new(scores, labels).expect("non-empty score set")
}

pub fn images(n: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, 3, h, w), |_| rng.random_range(0.0..1.0))
}
