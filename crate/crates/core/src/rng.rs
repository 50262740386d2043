//! Seedable, splittable random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, purpose, index)`,
//! so work keyed by an index (a task, an episode, an image) draws the same
//! numbers no matter the order or thread it runs on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Batches = 2,
    Episodes = 3,
    Tasks = 4,
    Glyphs = 5,
    Implants = 6,
    Eval = 7,
}

/// Independent stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}
