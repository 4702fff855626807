//! Splittable random streams.
//!
//! Every estimator in this crate draws from a [`Stream`]. A stream is
//! identified by a 64-bit key; `substream(k)` derives a child key by mixing,
//! never by consuming draws, so the substream tree is a pure function of the
//! root seed. Sharded Monte Carlo runs give shard `s` the substream `s` of the
//! estimator stream, which makes results independent of worker count and of
//! how many draws any other shard performs.
//!
//! The generator behind a key is ChaCha8 keyed by an expansion of the key.
//! This is a statistical RNG choice, not a cryptographic guarantee.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; standard constants.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent key with a branch index into a child key.
#[inline]
fn mix(parent: u64, branch: u64) -> u64 {
    splitmix64(splitmix64(parent ^ 0xA076_1D64_78BD_642F) ^ splitmix64(branch ^ 0xE703_7ED1_A0B4_28DB))
}

/// A splittable random stream.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    rng: ChaCha8Rng,
}

impl Stream {
    /// Root stream for a user-facing seed.
    pub fn new(seed: u64) -> Self {
        Self::from_key(splitmix64(seed ^ 0x6C62_272E_07BB_0142))
    }

    fn from_key(key: u64) -> Self {
        let mut bytes = [0u8; 32];
        let mut s = key;
        for chunk in bytes.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Stream { key, rng: ChaCha8Rng::from_seed(bytes) }
    }

    /// Derives an independent child stream. Depends only on the stream key
    /// and `branch`, not on how many draws have been made.
    pub fn substream(&self, branch: u64) -> Self {
        Self::from_key(mix(self.key, branch))
    }

    /// Uniform draw on [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on (0, 1]; safe as a `ln` argument.
    #[inline]
    pub fn next_f64_open(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    /// Uniform draw on [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut self.rng)
    }

    /// Poisson draw with the given mean.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let d = rand_distr::Poisson::new(mean).expect("poisson mean must be positive and finite");
        rand_distr::Distribution::sample(&d, &mut self.rng) as u64
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Rejection-free modulo bias is negligible for desk-scale n; use
        // multiply-shift which is exact for n << 2^64.
        ((self.rng.next_u64() >> 11) as u128 * n as u128 >> 53) as u64
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}
