#![allow(dead_code)]

pub mod audit;
pub mod grad;
pub mod oracle;

use rand::Rng as _;
use sscd::rng::Rng;
use sscd::Tensor;

pub fn uniform(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[lo, hi)` and a random sign.
pub fn away_from_zero(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}
