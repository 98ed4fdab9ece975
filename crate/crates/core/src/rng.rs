//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a [`StreamKey`]: the master
//! seed selects the ChaCha key and `(purpose, index)` selects the stream
//! id, so the numbers a task sees do not depend on how work is scheduled
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;

pub type Stream = ChaCha8Rng;

/// What a stream is used for. Each purpose owns a disjoint stream-id range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    InitWeights = 1,
    InitBias = 2,
    InitGamma = 3,
    Stage1Data = 4,
    BiasReinit = 5,
    Stage2Data = 6,
    Validation = 7,
    ValidationQueries = 8,
    Baseline = 9,
    Diagnostic = 10,
    Rotation = 11,
    Solver = 12,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub index: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose, index: u64) -> Self {
        Self {
            seed,
            purpose,
            index,
        }
    }

    pub fn stream(&self) -> Stream {
        stream(self.seed, self.purpose, self.index)
    }
}

/// Open the stream for `(seed, purpose, index)`. Indices above 2^56 alias.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Derive a child seed, e.g. one per sweep cell.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn normal<T: Real, R: rand::Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::from_f64_lossy(z)
}

pub fn fill_normal<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [T]) {
    for v in out.iter_mut() {
        *v = normal(rng);
    }
}

/// Uniform draw from `[lo, hi)`.
#[inline]
pub fn uniform<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> T {
    let u: f64 = rng.random();
    T::from_f64_lossy(lo + (hi - lo) * u)
}

/// Uniform draw from `{-1, +1}`.
#[inline]
pub fn sign<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Uniform point on the unit sphere in `R^n` (normalized Gaussian).
pub fn unit_sphere<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return g.into_iter().map(|v| T::from_f64_lossy(v / norm)).collect();
        }
    }
}
