//! Seeded random streams.
//!
//! Every run derives its generators from one 64-bit seed. Each purpose gets
//! its own ChaCha8 stream, so drawing more dropout masks never shifts the
//! sampler and vice versa.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sample = 2,
    Dropout = 3,
    EvalSubsample = 4,
    Batches = 5,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Position of a stream, enough to restore it together with the seed.
pub fn position(rng: &StreamRng) -> u128 {
    rng.get_word_pos()
}

pub fn restore(seed: u64, which: Stream, word_pos: u128) -> StreamRng {
    let mut rng = stream(seed, which);
    rng.set_word_pos(word_pos);
    rng
}
