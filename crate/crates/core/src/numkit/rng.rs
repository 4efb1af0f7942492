//! Counter-based random streams.
//!
//! A stream is identified by `(seed, stream_id)`; its position is the ChaCha
//! word counter. Two streams with the same identity produce the same sequence
//! on every platform, and distinct `stream_id`s select disjoint keystreams.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::tensor::Tensor;

/// Stream-id namespaces so that different consumers of one seed never share draws.
pub mod streams {
    pub const SIM_PATIENT: u64 = 0x0001 << 48;
    pub const SPLIT: u64 = 0x0002 << 48;
    pub const INIT: u64 = 0x0003 << 48;
    pub const SHUFFLE: u64 = 0x0004 << 48;
    pub const BALANCE: u64 = 0x0005 << 48;
    pub const PROBE: u64 = 0x0006 << 48;
    pub const EVAL: u64 = 0x0007 << 48;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box–Muller cosine branch.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Unbiased integer in `0..n` (rejection on the widening multiply).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX - n64 + 1) % n64;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n64 as u128);
            if (m as u64) <= zone {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

pub fn rng_uniform(stream: &mut RngStream, n: usize) -> Tensor {
    Tensor::from_vec((0..n).map(|_| stream.uniform()).collect())
}

pub fn rng_standard_normal(stream: &mut RngStream, n: usize) -> Tensor {
    Tensor::from_vec((0..n).map(|_| stream.standard_normal()).collect())
}
