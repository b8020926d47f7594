//! Seeded, counter-based random streams.
//!
//! A stream is identified by `(seed, stream_id)` and backed by ChaCha8, whose
//! keystream position is the counter. Two streams never share state, so a
//! consumer can own one stream per trajectory (or per purpose) and stay
//! reproducible regardless of how work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Well-known stream ids. Each training or sampling routine derives its
/// streams from these so that adding a consumer never perturbs another.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TIMES: u64 = 3;
    pub const FORWARD_NOISE: u64 = 4;
    pub const SOLVER_NOISE: u64 = 5;
    pub const LABEL_DROP: u64 = 6;
    pub const SAMPLING: u64 = 7;
    pub const DISCRIMINATOR: u64 = 8;
    pub const REFERENCE: u64 = 9;
    pub const PROJECTIONS: u64 = 10;
    /// Per-trajectory streams are `TRAJECTORY_BASE + index`.
    pub const TRAJECTORY_BASE: u64 = 1 << 32;
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
    gauss_calls: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
            gauss_calls: 0,
        }
    }

    /// A fresh stream with the same seed and a different id.
    pub fn sibling(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Position in the keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Number of Gaussian batch draws (`gauss_draw`/`fill_gauss` calls) so far.
    pub fn gauss_calls(&self) -> u64 {
        self.gauss_calls
    }

    pub fn gauss_draw(&mut self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        self.fill_gauss(&mut out);
        out
    }

    /// Fills `out` in order; splitting a request into several smaller ones
    /// yields the same sequence.
    pub fn fill_gauss(&mut self, out: &mut [f64]) {
        self.gauss_calls += 1;
        for v in out.iter_mut() {
            *v = self.inner.sample(StandardNormal);
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}
