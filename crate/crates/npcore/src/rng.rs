// SPDX-License-Identifier: Apache-2.0

//! Seeded sampling helpers. Every randomized routine in the crate draws from a
//! `ChaCha8Rng` built here so that a `u64` seed fully determines its output.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed`; used per restart so results do
/// not depend on evaluation order.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Uniform sample from the unit sphere in `R^n` (normalized Gaussian).
pub fn unit_sphere(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v = normal_vec(rng, n);
        let nv = crate::mat::norm(&v);
        if nv > 1e-300 {
            for x in &mut v {
                *x /= nv;
            }
            return v;
        }
    }
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn sign(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}
