//! Seeded random streams.
//!
//! Every generator is ChaCha8 keyed by a 64-bit seed. Independent consumers
//! (corpus generation, initialization, sampling, search) draw from distinct
//! ChaCha stream ids derived from the same seed, so adding draws to one
//! consumer never shifts another's sequence.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;

/// Well-known stream ids.
pub mod streams {
    pub const CORPUS_TRAIN: u64 = 1;
    pub const CORPUS_VAL: u64 = 2;
    pub const PRETRAIN_INIT: u64 = 3;
    pub const PRETRAIN_BATCHES: u64 = 4;
    pub const ADAPTER_INIT: u64 = 5;
    pub const TRAIN_SAMPLER: u64 = 6;
    pub const TRAIN_BATCHES: u64 = 7;
    pub const SEARCH: u64 = 8;
    pub const ANALYSIS: u64 = 9;
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Rng::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// Generator for item `index` of stream `id`, independent of every other
    /// index. Used for per-step draws so a resumed run replays exactly.
    pub fn derive(seed: u64, id: u64, index: u64) -> Rng {
        let mixed = splitmix64(seed ^ splitmix64(index.wrapping_add(0x5EED)));
        let mut r = Rng::with_stream(mixed, id);
        r.seed = seed;
        r
    }

    /// A fresh generator on stream `id` of the same seed.
    pub fn stream(&self, id: u64) -> Rng {
        Rng::with_stream(self.seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Draws an index from unnormalized non-negative weights by inversion.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &p) in probs.iter().enumerate() {
            if u < p {
                return i;
            }
            u -= p;
        }
        // Round-off can leave u just above the last bucket.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// i.i.d. `Normal(0, std²)` matrix. `std == 0` yields exact zeros.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f32) -> Matrix {
        if std == 0.0 {
            return Matrix::zeros(rows, cols);
        }
        Matrix::from_fn(rows, cols, |_, _| {
            (self.standard_normal() * std as f64) as f32
        })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
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

/// `rng_normal`: an i.i.d. normal matrix with the given standard deviation.
pub fn rng_normal(rng: &mut Rng, rows: usize, cols: usize, std: f32) -> crate::Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(crate::QfaError::Domain(format!(
            "normal std must be finite and non-negative, got {std}"
        )));
    }
    Ok(rng.normal_matrix(rows, cols, std))
}
