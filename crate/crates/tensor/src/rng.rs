//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream addressed by `(seed, stream id)`. Substreams are
//! derived by hashing the parent id with a child key, so a consumer can address e.g.
//! "reset noise for batch slot 3 of optimizer step 120" directly, independent of the
//! order in which other consumers drew their values.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Top-level purposes; each owns a disjoint family of substreams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    UpdateMask = 2,
    ResetNoise = 3,
    Pool = 4,
    Data = 5,
    State = 6,
    Eval = 7,
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn for_purpose(seed: u64, purpose: Purpose) -> Self {
        Self::new(seed, mix(purpose as u64))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Fresh stream addressed by `(self.stream, key)`, starting at draw 0.
    pub fn substream(&self, key: u64) -> Self {
        Self::new(self.seed, mix(self.stream ^ mix(key.wrapping_add(1))))
    }

    /// Substream addressed by a path of keys.
    pub fn path(&self, keys: &[u64]) -> Self {
        keys.iter().fold(self.clone_fresh(), |s, &k| s.substream(k))
    }

    fn clone_fresh(&self) -> Self {
        Self::new(self.seed, self.stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.rng.random_range(lo..=hi)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
