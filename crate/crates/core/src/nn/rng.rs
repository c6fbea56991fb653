use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

/// Counter-based random stream addressed by `(seed, stream id, counter)`.
///
/// Backed by ChaCha8: the seed selects the key, the stream id selects the
/// ChaCha stream, and the counter is the 32-bit word position. Reconstructing
/// a stream from the same triple yields the same sequence on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::at(seed, stream, 0)
    }

    pub fn at(seed: u64, stream: u64, counter: u128) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(counter);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 24 bits of precision.
    pub fn next_uniform(&mut self) -> f32 {
        (self.rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn next_gaussian(&mut self) -> f32 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.next_gaussian()).collect()
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, self.gaussian_vec(n)).expect("shape matches generated data")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stream id for `index` within a named purpose, so each consumer gets a
/// disjoint family of streams from one seed.
pub fn stream_id(purpose: u32, index: u32) -> u64 {
    ((purpose as u64) << 32) | index as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_output() {
        let a = RngStream::new(42, 1).gaussian(&[4, 4]);
        let b = RngStream::new(42, 1).gaussian(&[4, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn resume_from_counter() {
        let mut r = RngStream::new(9, 3);
        let _ = r.gaussian_vec(17);
        let c = r.counter();
        let tail = r.gaussian_vec(5);
        let mut resumed = RngStream::at(9, 3, c);
        assert_eq!(resumed.gaussian_vec(5), tail);
    }

    #[test]
    fn counter_advances() {
        let mut r = RngStream::new(1, 0);
        let before = r.counter();
        let _ = r.gaussian(&[3]);
        assert!(r.counter() > before);
    }

    #[test]
    fn moments_of_standard_normal() {
        let mut r = RngStream::new(2024, 0);
        let xs = r.gaussian_vec(100_000);
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let a = RngStream::new(5, 0).gaussian_vec(10_000);
        let b = RngStream::new(5, 1).gaussian_vec(10_000);
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (&x, &y) in a.iter().zip(&b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        let r = sab / (saa * sbb).sqrt();
        assert!(r.abs() < 0.05, "correlation {r}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        RngStream::new(7, 0).shuffle(&mut v);
        let mut s = v.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
