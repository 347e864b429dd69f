//! Portable seeded random stream.
//!
//! The generator is PCG-XSL-RR-128/64 (`rand_pcg::Pcg64`) constructed with
//! `state = seed` and the reference stream constant [`PCG_STREAM`]. Uniform
//! doubles take the top 53 bits of each 64-bit output, `u = (x >> 11) · 2⁻⁵³`.
//! Normal deviates use the Box–Muller transform on `(u₁, u₂)` with
//! `r = √(−2 ln(1 − u₁))`; each pair yields `r·cos(2πu₂)` first and then
//! `r·sin(2πu₂)`. Any reimplementation of these three steps reproduces the
//! same streams bit for bit.

use rand_core::Rng;
use rand_pcg::Pcg64;

/// Stream tags for [`SeededRng::derive`].
pub const TAG_BACKBONE: u64 = 1;
pub const TAG_ADAPTER: u64 = 2;
pub const TAG_SHUFFLE: u64 = 3;

pub const PCG_STREAM: u128 = 0x0a02_bdbf_7bb3_c0a7_ac28_fa16_a64a_bf96;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Pcg64,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: Pcg64::new(seed as u128, PCG_STREAM),
            spare: None,
        }
    }

    /// Independent stream for a labelled sub-task of the same seed.
    pub fn derive(seed: u64, tag: u64) -> Self {
        SeededRng {
            inner: Pcg64::new(((tag as u128) << 64) | seed as u128, PCG_STREAM),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal deviate.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}
