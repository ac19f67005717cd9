//! Random number streams.
//!
//! Every random draw in the crate comes from ChaCha8 seeded with a single
//! 64-bit value. Derived work (simulation replication `r`, bootstrap
//! resample `b`, Monte Carlo chunk `c`) uses the seed `root + index`, and the
//! consumer selects a ChaCha stream id so that two consumers sharing a seed
//! never see the same keystream. Results therefore do not depend on how work
//! is scheduled across threads.
//!
//! Standard normal variates use the Marsaglia polar transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids, one per consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Sample = 0,
    Bootstrap = 1,
    Model = 2,
    MonteCarlo = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed for the `index`-th derived unit of work.
#[inline]
pub fn derive_seed(root: u64, index: u64) -> u64 {
    root.wrapping_add(index)
}

/// Marsaglia polar method; draws come in pairs and the spare is cached.
#[derive(Debug, Clone)]
pub struct PolarNormal<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> PolarNormal<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u: f64 = self.rng.random_range(-1.0..1.0);
            let v: f64 = self.rng.random_range(-1.0..1.0);
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * m);
                return u * m;
            }
        }
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next();
        }
    }
}
