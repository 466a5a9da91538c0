use rand::seq::SliceRandom;

use crate::data::derive_rng;

/// Deterministic stratified interleave of batch slots over data components.
///
/// Slot `n` goes to the component with the largest deficit
/// `fraction · (n + 1) − count`, ties to the lowest index. After any number of
/// slots every count is within one of its exact share, and exact whenever the
/// share is an integer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interleave {
    counts: Vec<u64>,
}

impl Interleave {
    pub fn new(components: usize) -> Self {
        Self {
            counts: vec![0; components],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Picks the next slot's component and returns it together with how many
    /// earlier slots that component had (its draw number).
    pub fn next(&mut self, fractions: &[f64]) -> (usize, u64) {
        let n = self.total() + 1;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (i, (&f, &c)) in fractions.iter().zip(&self.counts).enumerate() {
            let deficit = f * n as f64 - c as f64;
            if f > 0.0 && deficit > best_deficit {
                best = i;
                best_deficit = deficit;
            }
        }
        let draw = self.counts[best];
        self.counts[best] += 1;
        (best, draw)
    }
}

/// Dataset index for draw `k` of a component: epoch-wise shuffles, each
/// seeded by `(seed, component, epoch)`.
pub fn draw_index(seed: u64, component: usize, k: u64, len: usize) -> usize {
    let epoch = k / len as u64;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut derive_rng(&[seed, component as u64, epoch]));
    order[(k % len as u64) as usize]
}
