//! Shared training-loop helpers: deterministic epoch orders and schedules.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for a named stream of a run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shuffled sample order for one epoch. Depends only on `(seed, epoch)`,
/// so a resumed run sees the same order as an uninterrupted one.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 1_000 + epoch as u64));
    order
}

/// Learning rate after `epoch` full epochs of multiplicative decay.
pub fn decayed_lr(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}
