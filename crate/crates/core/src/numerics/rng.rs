use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;

/// Stream-id namespaces. Each consumer derives its stream as
/// `stream_id(NAMESPACE, index)` so that no two consumers share draws.
pub mod streams {
    pub const TASK_PARAMS: u64 = 1;
    pub const LATENTS: u64 = 2;
    pub const MIXER: u64 = 3;
    pub const FLOW_INIT: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const REPLAY: u64 = 6;
    pub const EXPORT: u64 = 7;
    pub const EMBEDDINGS: u64 = 8;
    pub const HEAD_INIT: u64 = 9;
    pub const VERIFY: u64 = 10;
    pub const GRAD_CHECK: u64 = 11;
}

/// Combines a namespace and an index into a single stream id.
pub const fn stream_id(namespace: u64, index: u64) -> u64 {
    (namespace << 40) | (index & ((1 << 40) - 1))
}

/// Reproducible random stream keyed by `(seed, stream)`.
///
/// Backed by ChaCha8, whose output is specified bit-for-bit, so identical
/// keys give identical draws on every platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
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

    /// A fresh stream with the same seed.
    pub fn derive(&self, stream: u64) -> RngStream {
        RngStream::new(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `k` distinct indices from `0..n`, in random order. `k` is clamped to `n`.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut p = self.permutation(n);
        p.truncate(k.min(n));
        p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
