//! Seeded deterministic randomness.
//!
//! The generator is SplitMix64 (the 64-bit mixing generator of Steele,
//! Lea and Flood, also used as the seeding procedure of the xoshiro
//! family): `state += 0x9E3779B97F4A7C15`, then two xor-shift-multiply
//! rounds. It is documented here so that the synthetic corpora and
//! training runs can be regenerated bit-for-bit by any implementation.
//! Identical seeds produce identical streams on every platform.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Deterministic 64-bit generator (SplitMix64).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derives an independent sub-stream from a master seed. Stream ids
    /// are small constants chosen by the caller; the mapping is
    /// `mix64(seed ^ mix64(stream_id + 1))`, so distinct ids give
    /// unrelated streams.
    pub fn derive(seed: u64, stream_id: u64) -> Self {
        Rng::new(mix64(seed ^ mix64(stream_id.wrapping_add(1))))
    }

    /// Raw generator state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) {
            return Err(Error::InvalidRange(format!(
                "uniform bounds lo={lo} hi={hi}"
            )));
        }
        Ok(lo + self.next_f64() * (hi - lo))
    }

    /// Gaussian draw via Box-Muller. `sigma == 0` returns `mean` exactly.
    pub fn gaussian(&mut self, mean: f64, sigma: f64) -> Result<f64> {
        if sigma < 0.0 {
            return Err(Error::InvalidRange(format!("gaussian sigma={sigma}")));
        }
        if sigma == 0.0 {
            return Ok(mean);
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        Ok(mean + sigma * z)
    }

    /// Uniform integer in `[0, n)` via the 128-bit multiply-shift map.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }
}

/// The SplitMix64 output mix.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
