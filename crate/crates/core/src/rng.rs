//! Keyed deterministic random streams.
//!
//! Every random draw in a simulation comes from a stream identified by
//! `(seed, round, client, purpose)`. The 64-bit key is derived with the
//! SplitMix64 finalizer applied in sequence to each component:
//!
//! ```text
//! h0 = mix(seed + G)
//! h1 = mix(h0 ^ (round  + 2G))
//! h2 = mix(h1 ^ (client + 3G))
//! h3 = mix(h2 ^ (tag    + 4G))
//! ```
//!
//! with `G = 0x9E3779B97F4A7C15` and `mix` the finalizer
//! `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31`.
//! The ChaCha8 seed is the four words `mix(h3 + k·G)` for `k = 0..4`, little endian.
//! This derivation is part of the reproducibility contract and must not change.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Client slot used for server-side streams (client sampling, shared init).
pub const SERVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Minibatch,
    Compression,
    Sampling,
    Partition,
    InitNoise,
    Evaluation,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Minibatch => 1,
            Purpose::Compression => 2,
            Purpose::Sampling => 3,
            Purpose::Partition => 4,
            Purpose::InitNoise => 5,
            Purpose::Evaluation => 6,
        }
    }
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_key(seed: u64, round: u64, client: u64, purpose: Purpose) -> u64 {
    let h = mix64(seed.wrapping_add(GOLDEN));
    let h = mix64(h ^ round.wrapping_add(GOLDEN.wrapping_mul(2)));
    let h = mix64(h ^ client.wrapping_add(GOLDEN.wrapping_mul(3)));
    mix64(h ^ purpose.tag().wrapping_add(GOLDEN.wrapping_mul(4)))
}

/// A reproducible random stream bound to one `(seed, round, client, purpose)` key.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, round: u64, client: u64, purpose: Purpose) -> Self {
        let key = stream_key(seed, round, client, purpose);
        let mut bytes = [0u8; 32];
        for (k, chunk) in bytes.chunks_exact_mut(8).enumerate() {
            let word = mix64(key.wrapping_add(GOLDEN.wrapping_mul(k as u64)));
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            inner: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Stream for ad-hoc use (tests, validators) keyed only by a seed.
    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0, 0, Purpose::InitNoise)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
