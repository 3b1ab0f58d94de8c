//! Shared inputs for the criterion benchmarks.

use gas_core::eval::random_params;
use gas_core::synth::synthetic_render;
use gas_core::{ImageBuf, PipelineParams};

/// Frame sizes timed by the runtime benchmarks.
pub const SIZES: [(usize, usize); 3] = [(320, 180), (1280, 720), (1920, 1080)];

/// A perturbed, non-identity parameter set with visible sensor noise, so no
/// stage is skipped.
pub fn bench_params() -> PipelineParams {
    let mut p = random_params(1);
    p.noise.gamma_raw = -5.0;
    p.noise.sigma_raw = -5.0;
    p
}

pub fn frame(w: usize, h: usize) -> ImageBuf {
    synthetic_render(w, h, 42)
}
