//! Shared fixtures for the benchmarks.

use selfres_core::model::{init_weights, ModelConfig, Weights};
use selfres_core::vision::{generate_planted_video, PlantedEvent, SyntheticVideo};

pub const SYSTEM: &[u32] = &[1, 2, 3, 4];
pub const QUERY: &[u32] = &[5, 6, 7];

pub fn bench_config() -> ModelConfig {
    ModelConfig {
        num_layers: 6,
        num_heads: 4,
        model_dim: 32,
        head_dim: 8,
        vocab_size: 64,
        vision_dim: 48,
        default_context: 4096,
        reflection_layer: 3,
        rope_base: 10_000.0,
        weight_scale: 0.05,
        seed: 7,
    }
}

pub fn bench_weights() -> Weights {
    init_weights(&bench_config()).expect("valid bench config")
}

/// A noise video sized for `frames` sampled frames at 8 patches per frame.
pub fn bench_video(frames: usize) -> SyntheticVideo {
    let dim = bench_config().vision_dim;
    let mut direction = vec![0.0; dim];
    direction[0] = 1.0;
    generate_planted_video(
        99,
        frames,
        8,
        dim,
        PlantedEvent { frame_range: (0, 0), patch_range: (0, 0), direction, bias: 0.0 },
    )
    .expect("valid bench video")
}
