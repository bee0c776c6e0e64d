//! Shared fixtures for the kernel benchmarks.

use lc_core::{BackboneConfig, ConvSpec, RegionMask, Shape4, Tensor};
use rand::SeedableRng;

pub fn conv_fixture(
    size: usize,
    in_c: usize,
    out_c: usize,
    kernel: usize,
) -> (ConvSpec, Tensor<f32>, Tensor<f32>) {
    let spec = ConvSpec::new(in_c, out_c, (kernel, kernel)).with_padding(kernel / 2);
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2024);
    let x = Tensor::randn(Shape4::new(1, in_c, size, size), 1.0, &mut rng);
    let w = Tensor::randn(spec.weight_shape(), 0.1, &mut rng);
    (spec, x, w)
}

/// Evenly scattered mask with an exact active count.
pub fn scattered_mask(size: usize, density: f64) -> RegionMask {
    let target = ((size * size) as f64 * density).round() as usize;
    let mut mask = RegionMask::empty(size, size);
    let mut placed = 0usize;
    let mut idx = 0u64;
    while placed < target {
        let pos = (idx.wrapping_mul(2654435761) % (size * size) as u64) as usize;
        let (y, x) = (pos / size, pos % size);
        if !mask.get(y, x) {
            mask.set(y, x, true);
            placed += 1;
        }
        idx += 1;
    }
    mask
}

pub fn bench_backbone() -> BackboneConfig {
    BackboneConfig {
        class_count: 4,
        stem_channels: vec![8, 16],
        stage_blocks: vec![1, 1, 2],
        stage_channels: vec![16, 24, 32],
        stage_dilations: vec![1, 2, 4],
        rho: 0.985,
        seed: 7,
        ..Default::default()
    }
}
