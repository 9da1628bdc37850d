//! Deterministic random number generation.
//!
//! Everything random in this crate flows through [`Frng`], a ChaCha8 stream
//! cipher generator. ChaCha is counter-based: the stream position is a plain
//! integer, which makes the full generator state (key + position) trivially
//! serializable into checkpoints and bitwise reproducible across platforms.
//! The platform default RNG is never used.
//!
//! Sub-streams (dataset sampling, weight init, the training loop, ...) are
//! derived from the run seed with [`mix`], a SplitMix64 finalizer, so that
//! adding a consumer never shifts the draws seen by another.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// One SplitMix64 step: advances `state` and returns the next output.
///
/// Constants are the standard SplitMix64 ones (Steele, Lea, Flood 2014).
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from `(seed, index)`.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut s = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    splitmix64(&mut s)
}

/// Size in bytes of a serialized [`Frng`] state: 32-byte key + 16-byte position.
pub const RNG_STATE_LEN: usize = 48;

/// Seeded, serializable random generator (ChaCha8 core).
#[derive(Clone, Debug)]
pub struct Frng {
    key: [u8; 32],
    rng: ChaCha8Rng,
}

impl Frng {
    /// Builds a generator from a 64-bit seed; the 256-bit key is expanded
    /// from the seed with SplitMix64.
    pub fn from_seed(seed: u64) -> Frng {
        let mut s = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        Frng {
            key,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform double in `[0, 1)` built from the top 53 bits of one draw.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. Uses two uniforms per value and
    /// discards the sine partner so the generator state stays a pure
    /// function of the number of draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.uniform()).max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `0..n`. Rejection-free modulo is fine here: draws are
    /// 64-bit and `n` is small, so the bias is unobservable; determinism is
    /// what matters.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Bernoulli draw with probability `p`.
    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Serializes the full generator state (key + word position).
    pub fn state(&self) -> [u8; RNG_STATE_LEN] {
        let mut out = [0u8; RNG_STATE_LEN];
        out[..32].copy_from_slice(&self.key);
        out[32..].copy_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    /// Restores a generator from [`Frng::state`] output.
    pub fn restore(state: &[u8; RNG_STATE_LEN]) -> Frng {
        let mut key = [0u8; 32];
        key.copy_from_slice(&state[..32]);
        let mut pos = [0u8; 16];
        pos.copy_from_slice(&state[32..]);
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_word_pos(u128::from_le_bytes(pos));
        Frng { key, rng }
    }
}
