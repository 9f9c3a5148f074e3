//! Parameter initialization.
//!
//! Samples are drawn at f32 precision and widened to f64. Parameters are
//! stored at f32 precision throughout (the optimizer re-quantizes at the end
//! of training), which keeps the 32-bit model archive bit-exact on reload.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// He-style fan-in scaled normal init for convolution / linear weights.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0f32 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = rng.sample(StandardNormal);
            (z * std) as f64
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape is valid")
}

/// Deterministic per-purpose seed derivation from a master seed. FNV-1a over
/// the tag plus the index keeps streams independent across columns/streams.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ master;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= index;
    h = h.wrapping_mul(0x100000001b3);
    h
}
