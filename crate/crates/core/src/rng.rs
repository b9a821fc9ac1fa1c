//! Named, counter-based random substreams.
//!
//! Every stream is a ChaCha20 generator keyed by the master seed, with the
//! 64-bit stream id derived from a label and an index. Two streams with
//! different (label, index) pairs never share keystream, so sample `i` of a
//! dataset draws the same numbers no matter which thread generates it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::{ComplexMatrix, C64};

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream id for `(label, index)`.
pub fn stream_id(label: &str, index: u64) -> u64 {
    splitmix(fnv1a(label.as_bytes()) ^ splitmix(index))
}

/// Derive a child seed, e.g. a per-sweep-point seed from the master seed.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    splitmix(master ^ stream_id(label, index))
}

#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha20Rng,
}

impl Stream {
    pub fn new(master_seed: u64, label: &str, index: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id(label, index));
        Self { rng }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Circular complex Gaussian with `E|z|² = variance`.
    pub fn complex_normal(&mut self, variance: f64) -> C64 {
        let s = (variance / 2.0).sqrt();
        C64::new(s * self.normal(), s * self.normal())
    }

    pub fn complex_normal_matrix(&mut self, rows: usize, cols: usize, variance: f64) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| self.complex_normal(variance))
    }

    pub fn unit_phase(&mut self) -> C64 {
        C64::from_polar(1.0, self.uniform(0.0, std::f64::consts::TAU))
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}
