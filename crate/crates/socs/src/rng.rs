//! Deterministic, keyed random streams.
//!
//! Every source of randomness in the crate is a ChaCha stream keyed by
//! `(seed, stream index, subsystem tag)`. Streams derived from the same key
//! are identical across runs and independent of the order in which other
//! streams are consumed, so parallel or reordered generation cannot change
//! the output.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Deterministic random stream.
pub struct Stream {
    rng: ChaCha12Rng,
    cached_normal: Option<f64>,
}

impl Stream {
    /// Derive a stream from `(seed, index, tag)`. The tag names the
    /// subsystem ("scene", "init", "noise", ...), the index distinguishes
    /// parallel units (sequence number, training step, ...).
    pub fn derive(seed: u64, index: u64, tag: &str) -> Self {
        let mut state = seed ^ fnv1a(tag).rotate_left(17) ^ index.wrapping_mul(0xa24b_aed4_963e_e407);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Stream {
            rng: ChaCha12Rng::from_seed(key),
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits from the top of a u64.
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi). A point-valued range returns lo.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Unbiased via rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        loop {
            let u1 = self.uniform();
            let u2 = self.uniform();
            if u1 > 1e-300 {
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * u2;
                self.cached_normal = Some(r * theta.sin());
                return r * theta.cos();
            }
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// In-place Fisher-Yates shuffle with explicit index draws, so the
    /// permutation is pinned by this crate rather than a library version.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Sample `n` distinct indices from [0, total) via a partial
    /// Fisher-Yates pass. `n == total` yields a full permutation.
    pub fn sample_without_replacement(&mut self, n: usize, total: usize) -> Vec<usize> {
        assert!(n <= total);
        let mut pool: Vec<usize> = (0..total).collect();
        for i in 0..n {
            let j = i + self.below((total - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    }
}
