//! Seeded randomness. Everything random in the crate flows from a `u64` seed
//! through ChaCha8 so runs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose from a base seed.
pub fn derive(seed: u64, stream: &str) -> Rng {
    let mut h = crate::tokenizer::fnv1a64(&seed.to_le_bytes());
    h = crate::tokenizer::fnv1a64_extend(h, stream.as_bytes());
    ChaCha8Rng::seed_from_u64(h)
}
