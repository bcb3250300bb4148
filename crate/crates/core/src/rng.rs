//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`Stream`]. Independent
//! streams are derived from a base seed and a label path, so concurrent
//! workers (per-video synthesis, per-window sampling) stay deterministic
//! regardless of scheduling order.

use ndarray::{Array3, Array4};
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// A deterministic random stream.
pub struct Stream {
    rng: ChaCha12Rng,
}

/// Derived child seed for (seed, label, index); composable for nested
/// stream hierarchies.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = seed;
    for b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(*b));
    }
    splitmix64(h ^ index)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        Stream {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child stream keyed by a label and an index.
    ///
    /// Children with distinct (label, index) pairs are independent of each
    /// other and of the parent's future output.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        Stream::from_seed(derive_seed(seed, label, index))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Standard-normal tensor filled in row-major order.
    pub fn normal_array4(&mut self, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Array4::from_shape_vec(shape, data).expect("shape matches length")
    }

    pub fn normal_array3(&mut self, shape: (usize, usize, usize)) -> Array3<f64> {
        let n = shape.0 * shape.1 * shape.2;
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Array3::from_shape_vec(shape, data).expect("shape matches length")
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
