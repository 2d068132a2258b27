//! Shared fixtures for the criterion benches.

use rand::Rng;
use transdeeplab_core::model::{Model, ModelConfig};
use transdeeplab_core::nn::{Builder, ParamStore};
use transdeeplab_core::rng;
use transdeeplab_core::swin::WindowAttention;
use transdeeplab_core::train::data::{synth_dataset, Sample};
use transdeeplab_core::{Element, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn filled<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut r = rng::stream(seed, "bench");
    let data: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("extents")
}

pub fn window_attention<T: Element>(dim: usize, heads: usize, window: usize) -> (ParamStore<T>, WindowAttention) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(0, rng::INIT);
    let attn = WindowAttention::new(&mut Builder::new(&mut store, &mut r).sub("attn"), dim, heads, window)
        .expect("valid attention");
    (store, attn)
}

pub fn tiny_model<T: Element>() -> Model<T> {
    Model::build(&ModelConfig::tiny()).expect("tiny config is valid")
}

pub fn tiny_batch(n: usize) -> Vec<Sample> {
    synth_dataset(n, 32, 32, 2, 0).expect("valid synth parameters")
}
