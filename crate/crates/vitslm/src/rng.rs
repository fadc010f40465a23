//! Counter-based seed splitting.
//!
//! All randomness in the crate flows from one `u64` seed. Each consumer
//! derives its own ChaCha8 stream from `(seed, tags...)` so that toggling
//! one stochastic component (e.g. MixUp) never perturbs the draws seen by
//! another (e.g. parameter init). Tags are folded through a splitmix64
//! chain; the final state expands into the 32-byte ChaCha key.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream tags. One constant per independent consumer of randomness.
pub mod stream {
    /// Parameter initialization. Sub-tagged per tensor ordinal.
    pub const INIT: u64 = 1;
    /// Per-epoch shuffle of training indices. Sub-tagged by epoch.
    pub const DATA_ORDER: u64 = 2;
    /// Per-sample augmentation. Sub-tagged by (epoch, dataset index).
    pub const AUGMENT: u64 = 3;
    /// Residual-branch drop decisions. Sub-tagged by (epoch, batch).
    pub const DROPPATH: u64 = 4;
    /// MixUp/CutMix draws. Sub-tagged by (epoch, batch).
    pub const MIXUP: u64 = 5;
    /// Synthetic dataset class templates. Sub-tagged by resample round.
    pub const SYNTH_TEMPLATE: u64 = 6;
    /// Synthetic dataset per-image noise. Sub-tagged by image index.
    pub const SYNTH_NOISE: u64 = 7;
    /// Gradient-check probe batches and element sampling.
    pub const GRADCHECK: u64 = 8;
    /// Throughput benchmark input images.
    pub const BENCH_DATA: u64 = 9;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const DOMAIN: u64 = 0xA076_1D64_78BD_642F;

/// splitmix64 output function applied to a raw state word.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream for `(seed, tags...)`.
///
/// Deterministic and platform-independent: pure integer arithmetic into a
/// fixed 32-byte key. Distinct tag sequences give unrelated streams.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ DOMAIN);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
