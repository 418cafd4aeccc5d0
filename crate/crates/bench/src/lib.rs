//! Shared fixtures for the criterion benchmarks.

use gemma_mini::{Model, ModelConfig};

/// Byte-level model with `n_layers` at the given local:global ratio.
pub fn bench_model(n_layers: usize, ratio: usize, window: usize) -> Model {
    Model::init(ModelConfig::tiny(n_layers, ratio, window), 0).expect("tiny config is valid")
}
