//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by the 64-bit seed and selected
//! by a 64-bit stream id, so the values drawn for one purpose (say layer 3's
//! feedback matrix) never depend on how many values other purposes consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PURPOSE_SHIFT: u32 = 56;
const LAYER_SHIFT: u32 = 40;

/// Stream ids used by the engine. Layout: purpose (8 bits) | layer (16 bits) | counter (40 bits).
pub mod streams {
    use super::{LAYER_SHIFT, PURPOSE_SHIFT};

    const WEIGHT: u64 = 1;
    const FEEDBACK: u64 = 2;
    const SHUFFLE: u64 = 3;
    const SYNTHETIC: u64 = 4;

    fn compose(purpose: u64, layer: usize, counter: u64) -> u64 {
        debug_assert!(layer < 1 << 16 && counter < 1 << 40);
        (purpose << PURPOSE_SHIFT) | ((layer as u64) << LAYER_SHIFT) | counter
    }

    /// Initial weights of layer `layer`.
    pub fn weight(layer: usize) -> u64 {
        compose(WEIGHT, layer, 0)
    }

    /// Feedback matrix of layer `layer` at draw `iteration` (0 for fixed matrices).
    pub fn feedback(layer: usize, iteration: u64) -> u64 {
        compose(FEEDBACK, layer, iteration)
    }

    /// Batch order of epoch `epoch`.
    pub fn shuffle(epoch: u64) -> u64 {
        compose(SHUFFLE, 0, epoch)
    }

    /// Free-form streams for synthetic data in tests and benches.
    pub fn synthetic(index: u64) -> u64 {
        compose(SYNTHETIC, 0, index)
    }
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(self.seed, stream)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
