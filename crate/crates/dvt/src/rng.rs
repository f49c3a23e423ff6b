//! Seeded RNG streams.
//!
//! Every stochastic consumer (init, batch sampling, reparameterization noise,
//! Gumbel draws, data splits) gets its own ChaCha stream derived from the run
//! seed and a fixed salt. Streams advance independently, so e.g. a run with
//! gamma = 0 draws nothing from the unsupervised streams and its trace is
//! unaffected by unsupervised data entirely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream salts. Values are part of the determinism contract: changing them
/// changes every seeded artifact.
pub mod salt {
    pub const INIT: u64 = 0x01;
    pub const SUP_BATCH: u64 = 0x02;
    pub const UNSUP_BATCH: u64 = 0x03;
    pub const EPS: u64 = 0x04;
    pub const GUMBEL: u64 = 0x05;
    pub const SPLIT: u64 = 0x06;
    pub const DATA: u64 = 0x07;
    pub const SUP_MASK: u64 = 0x08;
    /// Per-domain streams offset by the domain index times this stride.
    pub const DOMAIN_STRIDE: u64 = 0x100;
}

pub fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}
