//! Deterministic inputs shared by the benchmarks.

use mvfa_core::{BackboneConfig, Stage, Tensor};

/// Benchmark-sized backbone: 64x64 input to 16x16x16 features.
pub fn backbone() -> BackboneConfig {
    BackboneConfig {
        input_height: 64,
        input_width: 64,
        stages: vec![
            Stage { out_channels: 8, kernel: 3, stride: 2 },
            Stage { out_channels: 16, kernel: 3, stride: 2 },
        ],
    }
}

/// Smooth pseudo-random values in `[0, 1)` without an RNG dependency.
pub fn pattern(shape: &[usize], salt: u64) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        (h >> 11) as f64 / (1u64 << 53) as f64
    })
}
