//! SplitMix64 random streams.
//!
//! The generator is Steele, Lea and Flood's SplitMix64: the state advances by
//! the golden-ratio increment `0x9E3779B97F4A7C15` and each output is the
//! state passed through the `mix64` finalizer below. It is platform
//! independent by construction (wrapping 64-bit integer arithmetic only).
//!
//! Independent streams are derived with [`Rng::fork`], which hashes the
//! parent state together with a caller-chosen key and does *not* advance the
//! parent. Every stochastic call site forks its own stream from a run-level
//! root, so the order in which modules draw numbers cannot perturb results.
//!
//! Uniform doubles take the top 53 bits of an output: `(x >> 11) · 2⁻⁵³`.

use serde::{Deserialize, Serialize};

use super::NumError;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Child stream keyed by `key`; the parent is left untouched.
    pub fn fork(&self, key: u64) -> Rng {
        Rng::new(mix64(self.state ^ mix64(key.wrapping_add(GOLDEN_GAMMA))))
    }

    /// Child stream keyed by a path of integers, e.g. `[STREAM, t, batch]`.
    pub fn fork_path(&self, keys: &[u64]) -> Rng {
        keys.iter().fold(self.clone(), |r, &k| r.fork(k))
    }

    /// Uniform double in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64, NumError> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(NumError::BadRange { lo, hi });
        }
        let v = lo + (hi - lo) * self.next_f64();
        // guard against rounding up to `hi`
        Ok(if v < hi { v } else { lo })
    }

    /// Uniform integer in `0..n` (Lemire's multiply-high reduction).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box–Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` in ascending order (all of them when `k ≥ n`).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        if k < n {
            // partial Fisher–Yates
            for i in 0..k {
                let j = i + self.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx.sort_unstable();
        }
        idx
    }
}
