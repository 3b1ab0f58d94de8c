//! The four learnable shaders, each with a forward pass that records a
//! single-use tape and a backward pass that consumes it.

pub mod bloom;
pub mod color;
pub mod lens;
pub mod noise;

pub use bloom::{
    bloom_apply, bloom_bwd, bloom_fwd, gaussian_kernel, glow_mask, glow_mask_bwd, BloomLevelParams,
    BloomTape, BloomToneParams, GlowTape, ToneCurve, BLOOM_LEVELS, GAUSS_RADIUS,
};
pub use color::{color_map_apply, color_map_bwd, color_map_fwd, ColorMapParams, ColorMapTape};
pub use lens::{lens_blur_apply, lens_blur_bwd, lens_blur_fwd, LensBlurParams, LensBlurTape, LENS_TAPS};
pub use noise::{noise_apply, noise_bwd, noise_draws, noise_fwd, noise_sample, NoiseParams, NoiseTape};
