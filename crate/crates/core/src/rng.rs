//! Seeded random streams.
//!
//! Every random choice in the toolkit draws from SplitMix64 (Steele, Lea and
//! Flood's 64-bit counter-based generator: the state advances by the golden
//! gamma `0x9e3779b97f4a7c15` and each output is the MurmurHash3-style
//! finalizer of the counter). The derived quantities below are defined
//! directly on the raw `u64` stream so that any language can reproduce them:
//!
//! * `uniform()`: `(x >> 11) * 2^-53`, in `[0, 1)`.
//! * `below(n)`: `(x as u128 * n as u128) >> 64`.
//! * `normal()`: Box-Muller cosine branch on two uniforms, `u1` mapped to `1 - u1`.
//!
//! Sub-streams are keyed with [`derive_seed`], which folds a tag into the
//! parent seed with FNV-1a and finalizes with the SplitMix64 mixer.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Derives an independent seed for a named sub-task.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    mix64(fnv1a(&bytes))
}

/// Deterministic random stream.
#[derive(Debug, Clone)]
pub struct Stream {
    inner: SplitMix64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn derived(seed: u64, tag: &str) -> Self {
        Self::new(derive_seed(seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle, last index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Chooses `k` distinct indices out of `0..n` by a partial Fisher-Yates
    /// pass; returned in selection order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
