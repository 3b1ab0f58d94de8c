//! Learnable separable lens blur with sum-normalized 5-tap kernels.

use crate::error::{Error, Result};
use crate::filter::{separable_conv, separable_conv_bwd};
use crate::image::ImageBuf;

pub const LENS_TAPS: usize = 5;
const MIN_KERNEL_SUM: f64 = 1e-6;

pub const IMPULSE: [f64; LENS_TAPS] = [0.0, 0.0, 1.0, 0.0, 0.0];

/// Raw (unnormalized) horizontal and vertical kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LensBlurParams {
    pub kx_raw: [f64; LENS_TAPS],
    pub ky_raw: [f64; LENS_TAPS],
}

impl Default for LensBlurParams {
    fn default() -> Self {
        Self {
            kx_raw: IMPULSE,
            ky_raw: IMPULSE,
        }
    }
}

impl LensBlurParams {
    pub fn zeros() -> Self {
        Self {
            kx_raw: [0.0; LENS_TAPS],
            ky_raw: [0.0; LENS_TAPS],
        }
    }

    /// The effective kernels, each scaled to sum to one.
    pub fn kernels(&self) -> Result<([f64; LENS_TAPS], [f64; LENS_TAPS])> {
        Ok((
            normalize(&self.kx_raw, "horizontal lens")?,
            normalize(&self.ky_raw, "vertical lens")?,
        ))
    }
}

pub fn normalize(raw: &[f64; LENS_TAPS], which: &'static str) -> Result<[f64; LENS_TAPS]> {
    let sum: f64 = raw.iter().sum();
    if !(sum.abs() > MIN_KERNEL_SUM) {
        return Err(Error::DegenerateKernel { which, sum });
    }
    Ok(raw.map(|v| v / sum))
}

/// Pulls a gradient on normalized weights back to the raw weights:
/// `d(w_i / S) / d w_j = (delta_ij S - w_i) / S^2`.
fn normalize_bwd(raw: &[f64; LENS_TAPS], grad_norm: &[f64]) -> [f64; LENS_TAPS] {
    let sum: f64 = raw.iter().sum();
    let proj: f64 = grad_norm.iter().zip(raw).map(|(g, r)| g * r).sum::<f64>() / sum;
    let mut out = [0.0; LENS_TAPS];
    for (o, g) in out.iter_mut().zip(grad_norm) {
        *o = (g - proj) / sum;
    }
    out
}

#[derive(Debug)]
pub struct LensBlurTape {
    input: ImageBuf,
    params: LensBlurParams,
    kx: [f64; LENS_TAPS],
    ky: [f64; LENS_TAPS],
}

pub fn lens_blur_apply(img: &ImageBuf, p: &LensBlurParams) -> Result<ImageBuf> {
    img.ensure_channels(3)?;
    let (kx, ky) = p.kernels()?;
    Ok(separable_conv(img, &kx, &ky))
}

pub fn lens_blur_fwd(img: &ImageBuf, p: &LensBlurParams) -> Result<(ImageBuf, LensBlurTape)> {
    img.ensure_channels(3)?;
    let (kx, ky) = p.kernels()?;
    let out = separable_conv(img, &kx, &ky);
    Ok((
        out,
        LensBlurTape {
            input: img.clone(),
            params: *p,
            kx,
            ky,
        },
    ))
}

/// Returns `(grad_input, grad_params)`.
pub fn lens_blur_bwd(grad_out: &ImageBuf, tape: LensBlurTape) -> (ImageBuf, LensBlurParams) {
    let (grad_in, gkx, gky) = separable_conv_bwd(grad_out, &tape.input, &tape.kx, &tape.ky);
    let grads = LensBlurParams {
        kx_raw: normalize_bwd(&tape.params.kx_raw, &gkx),
        ky_raw: normalize_bwd(&tape.params.ky_raw, &gky),
    };
    (grad_in, grads)
}
