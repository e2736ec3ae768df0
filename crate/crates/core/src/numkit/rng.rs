use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A seeded ChaCha stream identified by `(seed, stream)`.
///
/// Streams are counter based: two instances with the same pair produce the
/// same sequence, and distinct stream ids select disjoint keystreams. Child
/// streams are derived by mixing a tag into the id, so work items can be
/// given their own stream and evaluated in any order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Fresh child stream; independent of how much of `self` was consumed.
    pub fn derive(&self, tag: u64) -> Self {
        Self::new(self.seed, splitmix(self.stream ^ splitmix(tag)))
    }

    /// Child stream keyed by a path of tags, e.g. `[epoch, purpose, index]`.
    pub fn derive_path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(self.clone(), |s, &t| s.derive(t))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
