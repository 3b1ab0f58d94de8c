//! Sensor noise in linear light: a Gaussian stand-in for shot noise with
//! variance `gamma * I` plus read noise of standard deviation `sigma`.
//!
//! The draws are reparameterized (`sqrt(gamma I) n1 + sigma n2`) so the
//! output is differentiable in `gamma` and `sigma` for frozen `n1`, `n2`.

use crate::error::Result;
use crate::image::ImageBuf;
use crate::math::{sigmoid, softplus};
use crate::rng::CounterRng;

/// Raw value giving gain and read noise of about 6e-6 after softplus.
pub const INIT_NOISE_RAW: f64 = -12.0;
/// Floor on `lin` in the `1 / sqrt(lin)` term of the input derivative.
const LIN_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Gain `gamma = softplus(gamma_raw)`.
    pub gamma_raw: f64,
    /// Read-noise deviation `sigma = softplus(sigma_raw)`.
    pub sigma_raw: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            gamma_raw: INIT_NOISE_RAW,
            sigma_raw: INIT_NOISE_RAW,
        }
    }
}

impl NoiseParams {
    pub fn zeros() -> Self {
        Self {
            gamma_raw: 0.0,
            sigma_raw: 0.0,
        }
    }

    /// Exactly zero gain and read noise.
    pub fn off() -> Self {
        Self {
            gamma_raw: f64::NEG_INFINITY,
            sigma_raw: f64::NEG_INFINITY,
        }
    }

    pub fn gain(&self) -> f64 {
        softplus(self.gamma_raw)
    }

    pub fn sigma(&self) -> f64 {
        softplus(self.sigma_raw)
    }
}

/// Draws `(n1, n2)` for planar sample `idx`.
///
/// Keyed by absolute sample index so any tiling reproduces them.
#[inline]
pub fn noise_draws(rng: &CounterRng, idx: usize) -> (f64, f64) {
    rng.normal_pair(idx as u64)
}

/// Noise value for one gamma-encoded sample `v` given its draws.
///
/// Negative inputs are treated as black. When the noise term is exactly zero
/// the sample passes through without a gamma round trip.
#[inline]
pub fn noise_sample(v: f64, gain: f64, sigma: f64, gamma: f64, n1: f64, n2: f64) -> f64 {
    let p = v.max(0.0);
    let lin = p.powf(gamma);
    let term = (gain * lin).sqrt() * n1 + sigma * n2;
    if term == 0.0 {
        return p;
    }
    (lin + term).max(0.0).powf(1.0 / gamma)
}

#[derive(Debug)]
pub struct NoiseTape {
    input: ImageBuf,
    params: NoiseParams,
    gamma: f64,
    draws: Option<Vec<(f64, f64)>>,
}

fn draw_all(img: &ImageBuf, rng: Option<&CounterRng>) -> Option<Vec<(f64, f64)>> {
    rng.map(|r| {
        let key = r.stream_key();
        (0..img.data().len()).map(|i| key.normal_pair(i as u64)).collect()
    })
}

/// Applies noise to a gamma-encoded image. `rng = None` disables the draws.
pub fn noise_apply(
    img: &ImageBuf,
    p: &NoiseParams,
    gamma: f64,
    rng: Option<&CounterRng>,
) -> Result<ImageBuf> {
    let (gain, sigma) = (p.gain(), p.sigma());
    let mut out = img.clone();
    match rng {
        Some(r) => {
            let key = r.stream_key();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let (n1, n2) = key.normal_pair(i as u64);
                *v = noise_sample(*v, gain, sigma, gamma, n1, n2);
            }
        }
        None => out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
    }
    Ok(out)
}

pub fn noise_fwd(
    img: &ImageBuf,
    p: &NoiseParams,
    gamma: f64,
    rng: Option<&CounterRng>,
) -> Result<(ImageBuf, NoiseTape)> {
    let draws = draw_all(img, rng);
    let (gain, sigma) = (p.gain(), p.sigma());
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (n1, n2) = draws.as_ref().map_or((0.0, 0.0), |d| d[i]);
        *v = noise_sample(*v, gain, sigma, gamma, n1, n2);
    }
    Ok((
        out,
        NoiseTape {
            input: img.clone(),
            params: *p,
            gamma,
            draws,
        },
    ))
}

/// Returns `(grad_input, grad_params)` with the tape's draws held fixed.
pub fn noise_bwd(grad_out: &ImageBuf, tape: NoiseTape) -> (ImageBuf, NoiseParams) {
    let NoiseTape {
        input,
        params,
        gamma,
        draws,
    } = tape;
    let (gain, sigma) = (params.gain(), params.sigma());
    let inv_g = 1.0 / gamma;
    let mut grad_in = input.zeros_like();
    let (mut g_gain, mut g_sigma) = (0.0, 0.0);
    for (i, ((gi, &v), &g)) in grad_in
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(grad_out.data())
        .enumerate()
    {
        let (n1, n2) = draws.as_ref().map_or((0.0, 0.0), |d| d[i]);
        if v <= 0.0 {
            // Black input: the output no longer depends on the input, but the
            // read-noise term still reaches it.
            let out_lin = sigma * n2;
            if out_lin > 0.0 {
                g_sigma += g * inv_g * out_lin.powf(inv_g - 1.0) * n2;
            }
            continue;
        }
        let lin = v.powf(gamma);
        let term = (gain * lin).sqrt() * n1 + sigma * n2;
        if term == 0.0 {
            *gi = g;
            continue;
        }
        let out_lin = lin + term;
        if out_lin <= 0.0 {
            continue;
        }
        let g_lin_out = g * inv_g * out_lin.powf(inv_g - 1.0);
        if gain > 0.0 {
            g_gain += g_lin_out * 0.5 * (lin / gain).sqrt() * n1;
        }
        g_sigma += g_lin_out * n2;
        let d_lin = 1.0 + n1 * gain.sqrt() / (2.0 * lin.max(LIN_FLOOR).sqrt());
        *gi = g_lin_out * d_lin * gamma * v.powf(gamma - 1.0);
    }
    let grads = NoiseParams {
        gamma_raw: g_gain * sigmoid(params.gamma_raw),
        sigma_raw: g_sigma * sigmoid(params.sigma_raw),
    };
    (grad_in, grads)
}
