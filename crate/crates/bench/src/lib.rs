//! Shared fixtures for benchmarks.

use urmf_core::data::generate_synthetic;
use urmf_core::rng::{normal_tensor, stream};
use urmf_core::{Dataset, SynthSpec, Tensor, TrainConfig};

/// Standard-normal tensor from a fixed stream.
pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    normal_tensor(&mut stream(seed, &[0xbe4c]), shape)
}

/// Default model size with a single epoch.
pub fn bench_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    }
}

/// Reference-shaped synthetic data with `samples` records.
pub fn bench_dataset(samples: usize) -> Dataset {
    generate_synthetic(&SynthSpec {
        samples,
        ..SynthSpec::default()
    })
    .expect("default spec is valid")
}
