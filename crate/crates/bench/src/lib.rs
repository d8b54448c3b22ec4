//! Shared fixtures for the benchmarks.

use fedsim_core::nn::{Batch, Labels};
use fedsim_core::presets::{benchmark_model, INPUT_DIM, NUM_CLASSES};
use fedsim_core::rng::rng_for;
use fedsim_core::{ModelSpec, ParamSet, Tensor};
use rand::Rng;

pub fn model() -> ModelSpec {
    benchmark_model()
}

pub fn params(seed: u64) -> ParamSet {
    model()
        .init_params(&mut rng_for(&[seed]))
        .expect("benchmark model initializes")
}

pub fn batch(n: usize, seed: u64) -> Batch {
    let mut r = rng_for(&[seed, 1]);
    let x = (0..n * INPUT_DIM)
        .map(|_| r.random_range(-2.0..2.0))
        .collect();
    let y = (0..n).map(|i| i % NUM_CLASSES).collect();
    Batch::new(
        Tensor::new(vec![n, INPUT_DIM], x).expect("shape"),
        Labels::Classes(y),
    )
    .expect("batch")
}

pub fn scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng_for(&[seed, 2]);
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let scores = labels
        .iter()
        .map(|&l| r.random_range(0.0..1.0) + if l { 0.3 } else { 0.0 })
        .collect();
    (scores, labels)
}
