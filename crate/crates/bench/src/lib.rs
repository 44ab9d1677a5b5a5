//! Benchmark-only crate; see `benches/`.

use turbkit::{Rng, Tensor};

/// Uniform random `[h, w, c]` image with a fixed seed.
pub fn image(h: usize, w: usize, c: usize) -> Tensor<f32> {
    Rng::new(1).uniform_tensor(&[h, w, c], 0.0, 1.0)
}
