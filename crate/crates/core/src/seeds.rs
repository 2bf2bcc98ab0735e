//! Named sub-seed derivation from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Mixes `master` with a component name so that components can be perturbed independently.
pub fn derive(master: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer over the combination.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(master ^ splitmix(h))
}

/// Derives an indexed child seed, e.g. one per training step.
pub fn derive_indexed(master: u64, name: &str, index: u64) -> u64 {
    splitmix(derive(master, name) ^ splitmix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Unit-norm Gaussian direction of length `n`, as an `n×1` column.
pub fn unit_column(n: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    loop {
        let v = normal_tensor(&mut r, &[n, 1], 1.0);
        let norm = v.frobenius_norm();
        if norm > 1e-6 {
            return v.scale(1.0 / norm);
        }
    }
}
