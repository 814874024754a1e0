//! Reproducible random streams keyed by `(seed, name)`.
//!
//! Every parameter tensor draws from its own ChaCha stream, so adding or
//! reordering parameters never perturbs the initial values of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

/// 64-bit FNV-1a.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
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

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(name_hash(name))))
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}
