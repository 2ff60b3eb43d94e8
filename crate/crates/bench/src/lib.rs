//! Shared fixtures for the criterion benchmarks.

use mfpnet_core::network::{Model, ModelConfig};
use mfpnet_core::rng::Rng;
use mfpnet_core::tensor::Tensor;

/// Tiny model plus a matching random input batch.
pub fn tiny_model_and_input(batch: usize) -> (Model, Tensor) {
    let cfg = ModelConfig::tiny();
    let model = Model::build_with_seed(&cfg, 0).expect("tiny config builds");
    let mut rng = Rng::new(42);
    let input = Tensor::random([batch, 3, 32, 32], 0.0, 1.0, &mut rng);
    (model, input)
}
