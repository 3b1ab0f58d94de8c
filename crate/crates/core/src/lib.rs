//! Differentiable camera post-processing (lens blur, color mapping, bloom,
//! sensor noise) trained as the generator of an adversarial pair, plus a
//! fused single-precision runtime for applying trained parameters.

pub mod deploy;
pub mod disc;
pub mod error;
pub mod eval;
pub mod filter;
pub mod image;
pub mod io;
pub mod kv;
pub mod math;
pub mod pipeline;
pub mod resample;
pub mod rng;
pub mod stages;
pub mod synth;
pub mod train;

#[cfg(test)]
mod testutil;

pub use disc::{disc_bwd, disc_fwd, DiscArch, DiscGrads, DiscTape, DiscriminatorNet};
pub use error::{Error, Result};
pub use image::{crop, luma, to_gamma, to_linear, ColorSpace, ImageBuf};
pub use io::{load_png, save_png};
pub use resample::{downsample_half, upsample_to};
pub use rng::{rng_normal, CounterRng};
pub use pipeline::{
    load_params, pipeline_apply, pipeline_bwd, pipeline_fwd, save_params, PipelineGrads,
    PipelineParams, PipelineTape, PARAM_COUNT,
};
pub use train::{
    adam_step, ralsgan_losses, sample_crop, train, train_on, AdamConfig, AdamState, StepMetrics,
    TrainConfig, TrainOutcome,
};
pub use deploy::{bench, compile, frame_rng, CompiledPipeline, FrameScratch, FrameStats};
pub use eval::{eval_run, gradcheck, hist_distance, GradCheckReport, HistogramSet};
