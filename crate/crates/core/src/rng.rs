//! SplitMix64 stream used for every seeded draw in the crate.
//!
//! The generator is fully specified by three constants so other
//! implementations can reproduce the exact streams:
//!
//! ```text
//! state  = state + 0x9E3779B97F4A7C15            (wrapping)
//! z      = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
//! z      = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)
//! ```
//!
//! Uniform reals take the top 53 bits: `(output >> 11) * 2^-53`. Normal
//! draws use Box-Muller on two consecutive uniforms.

use serde::{Deserialize, Serialize};

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX2: u64 = 0x94D0_49BB_1331_11EB;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for `(seed, index)`; used to make per-iteration and
    /// per-window draws a pure function of their position.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut base = Self::new(seed ^ index.wrapping_mul(MIX2));
        Self::new(base.next_u64() ^ index)
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(MIX1);
        z = (z ^ (z >> 27)).wrapping_mul(MIX2);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        num_traits::Float::sqrt(-2.0 * num_traits::Float::ln(u1))
            * num_traits::Float::cos(core::f64::consts::TAU * u2)
    }
}
