//! Counter-based SplitMix64 streams.
//!
//! A stream is identified by a 64-bit key; its `i`-th output (0-based) is
//! `mix(key + (i + 1) · 0x9E3779B97F4A7C15)` with wrapping arithmetic, where
//!
//! ```text
//! mix(z): z = (z ^ (z >> 30)) · 0xBF58476D1CE4E5B9
//!         z = (z ^ (z >> 27)) · 0x94D049BB133111EB
//!         return z ^ (z >> 31)
//! ```
//!
//! This is exactly the SplitMix64 generator seeded with `key`. Keys for
//! sub-streams are derived with [`stream_key`]: starting from `mix(seed)`,
//! each tag `t` is folded in as `key = mix(key ^ mix(t + 0x9E3779B97F4A7C15))`.
//!
//! Conversions: a uniform in `[0, 1)` is `(x >> 11) · 2⁻⁵³`. A standard normal
//! draw is the Irwin–Hall sum of twelve uniforms minus 6, which only needs IEEE
//! additions and so reproduces bit-exactly in any language.

use rand::{Error as RandError, RngCore, SeedableRng};

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_key(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(seed), |key, &t| mix64(key ^ mix64(t.wrapping_add(GOLDEN_GAMMA))))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    key: u64,
    counter: u64,
}

impl SplitMix64 {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// Stream for `seed` specialized by `tags` (scene index, purpose, ...).
    pub fn stream(seed: u64, tags: &[u64]) -> Self {
        Self::new(stream_key(seed, tags))
    }

    /// Output at an arbitrary position, independent of the cursor.
    pub fn at(&self, index: u64) -> u64 {
        mix64(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Integer in `[0, n)` by multiply-shift on the high 32 bits.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next() >> 32).wrapping_mul(n)) >> 32
    }

    pub fn normal(&mut self) -> f64 {
        let mut s = 0.0;
        for _ in 0..12 {
            s += self.uniform();
        }
        s - 6.0
    }
}

impl RngCore for SplitMix64 {
    fn next_u32(&mut self) -> u32 {
        (self.next() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let v = self.next().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), RandError> {
        self.fill_bytes(dest);
        Ok(())
    }
}

impl SeedableRng for SplitMix64 {
    type Seed = [u8; 8];

    fn from_seed(seed: Self::Seed) -> Self {
        Self::new(u64::from_le_bytes(seed))
    }

    fn seed_from_u64(state: u64) -> Self {
        Self::new(state)
    }
}
