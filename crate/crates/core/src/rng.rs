//! Seeded random source shared by sampling, data loading and initialization.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A reproducible random stream. Not `Sync`-shared: every lane owns its own.
#[derive(Debug, Clone)]
pub struct RandomSource(ChaCha8Rng);

/// Serializable position of a [`RandomSource`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RandomSource {
    pub fn seed_from(seed: u64) -> Self {
        RandomSource(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Source for worker lane `lane` of a run seeded with `seed`.
    pub fn for_lane(seed: u64, lane: u64) -> Self {
        Self::seed_from(seed ^ lane)
    }

    /// Independent child stream, used where one draw would otherwise
    /// shift every later draw (e.g. per-network initialization).
    pub fn fork(&mut self) -> Self {
        Self::seed_from(self.0.next_u64())
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.0.gen_range(lo..=hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.0.gen_bool(p)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.0.get_seed(),
            stream: self.0.get_stream(),
            word_pos: self.0.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        RandomSource(rng)
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}
