//! Multi-resolution bloom: sigmoid glow extraction, per-level Gaussian blur,
//! and an exponential saturating tone curve.

use crate::error::Result;
use crate::filter::{separable_conv, separable_conv_bwd};
use crate::image::{luma, ImageBuf, LUMA_WEIGHTS};
use crate::math::{sigmoid, softplus, softplus_inv};
use crate::resample::{downsample_half, downsample_half_adjoint, upsample_to, upsample_to_adjoint};

/// Full, half, quarter and eighth resolution.
pub const BLOOM_LEVELS: usize = 4;
/// Gaussian support radius at each level's own resolution.
pub const GAUSS_RADIUS: usize = 6;

pub const INIT_THRESHOLD: f64 = 1.5;
pub const INIT_STEEPNESS: f64 = 20.0;
pub const INIT_EXPOSURE: f64 = 0.01;
pub const INIT_SATURATION: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BloomLevelParams {
    /// Luma threshold `a`.
    pub a_thresh: f64,
    /// Steepness `b = softplus(b_steep_raw)`.
    pub b_steep_raw: f64,
    /// `sigma_x^2 = exp(logvar_x)`.
    pub logvar_x: f64,
    pub logvar_y: f64,
}

impl Default for BloomLevelParams {
    fn default() -> Self {
        Self {
            a_thresh: INIT_THRESHOLD,
            b_steep_raw: softplus_inv(INIT_STEEPNESS),
            logvar_x: 0.0,
            logvar_y: 0.0,
        }
    }
}

impl BloomLevelParams {
    pub fn zeros() -> Self {
        Self {
            a_thresh: 0.0,
            b_steep_raw: 0.0,
            logvar_x: 0.0,
            logvar_y: 0.0,
        }
    }

    pub fn steepness(&self) -> f64 {
        softplus(self.b_steep_raw)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.a_thresh, self.b_steep_raw, self.logvar_x, self.logvar_y]
    }

    pub fn from_array(v: &[f64; 4]) -> Self {
        Self {
            a_thresh: v[0],
            b_steep_raw: v[1],
            logvar_x: v[2],
            logvar_y: v[3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BloomToneParams {
    /// Exposure `eps = softplus(eps_raw)`.
    pub eps_raw: f64,
    /// Saturation point `s = softplus(s_raw)`.
    pub s_raw: f64,
}

impl Default for BloomToneParams {
    fn default() -> Self {
        Self {
            eps_raw: softplus_inv(INIT_EXPOSURE),
            s_raw: softplus_inv(INIT_SATURATION),
        }
    }
}

impl BloomToneParams {
    pub fn zeros() -> Self {
        Self {
            eps_raw: 0.0,
            s_raw: 0.0,
        }
    }

    pub fn curve(&self) -> ToneCurve {
        ToneCurve::new(softplus(self.eps_raw), softplus(self.s_raw))
    }
}

/// `f(I) = e^{eps s} / (e^{eps s} - 1) * (1 - e^{-eps I})`, clamped above at 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToneCurve {
    pub eps: f64,
    pub s: f64,
    /// `e^{eps s} / (e^{eps s} - 1)`.
    pub scale: f64,
}

impl ToneCurve {
    pub fn new(eps: f64, s: f64) -> Self {
        Self {
            eps,
            s,
            scale: 1.0 / -(-eps * s).exp_m1(),
        }
    }

    /// The curve before the `min(., 1)`.
    #[inline]
    pub fn eval_unclamped(&self, i: f64) -> f64 {
        self.scale * -(-self.eps * i).exp_m1()
    }

    #[inline]
    pub fn eval(&self, i: f64) -> f64 {
        self.eval_unclamped(i).min(1.0)
    }

    /// `(df/dI, df/deps, df/ds)` of the unclamped curve.
    #[inline]
    pub fn partials(&self, i: f64) -> (f64, f64, f64) {
        let (eps, s, k) = (self.eps, self.s, self.scale);
        let e_i = (-eps * i).exp();
        let q = -(-eps * i).exp_m1();
        let dk_common = -(-eps * s).exp() * k * k;
        let d_i = k * eps * e_i;
        let d_eps = dk_common * s * q + k * i * e_i;
        let d_s = dk_common * eps * q;
        (d_i, d_eps, d_s)
    }
}

/// Discrete Gaussian on `[-radius, radius]` normalized to sum one, with
/// variance `exp(logvar)`, and the derivative of each weight wrt `logvar`.
pub fn gaussian_kernel(logvar: f64, radius: usize) -> (Vec<f64>, Vec<f64>) {
    let var = logvar.exp();
    let r = radius as isize;
    // q_i = i^2 / (2 var); u_i = exp(-q_i); du_i/dlogvar = u_i q_i.
    let q: Vec<f64> = (-r..=r).map(|i| (i * i) as f64 / (2.0 * var)).collect();
    let u: Vec<f64> = q.iter().map(|&q| (-q).exp()).collect();
    let z: f64 = u.iter().sum();
    let w: Vec<f64> = u.iter().map(|u| u / z).collect();
    let mean_q: f64 = w
        .iter()
        .zip(&q)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, q)| w * q)
        .sum();
    let jac = w
        .iter()
        .zip(&q)
        .map(|(&w, &q)| if w > 0.0 { w * (q - mean_q) } else { 0.0 })
        .collect();
    (w, jac)
}

#[derive(Debug)]
pub struct GlowTape {
    input: ImageBuf,
    luma: ImageBuf,
    mask: Vec<f64>,
    level: BloomLevelParams,
}

/// `I_glow = I_in * sigmoid(b (luma - a))`, the factor shared across channels.
pub fn glow_mask(img: &ImageBuf, level: &BloomLevelParams) -> Result<(ImageBuf, GlowTape)> {
    let l = luma(img)?;
    let (a, b) = (level.a_thresh, level.steepness());
    let mask: Vec<f64> = l.data().iter().map(|&v| sigmoid(b * (v - a))).collect();
    let mut out = img.clone();
    for c in 0..3 {
        for (o, m) in out.plane_mut(c).iter_mut().zip(&mask) {
            *o *= m;
        }
    }
    Ok((
        out,
        GlowTape {
            input: img.clone(),
            luma: l,
            mask,
            level: *level,
        },
    ))
}

/// Returns `(grad_input, grad_level)`; only `a_thresh` and `b_steep_raw` of
/// the level gradient are populated.
pub fn glow_mask_bwd(grad_out: &ImageBuf, tape: GlowTape) -> (ImageBuf, BloomLevelParams) {
    let (a, b) = (tape.level.a_thresh, tape.level.steepness());
    let n = tape.input.plane_len();
    let src = tape.input.data();
    let g = grad_out.data();
    let mut grad_in = tape.input.zeros_like();
    let gi = grad_in.data_mut();
    let (mut ga, mut gb) = (0.0, 0.0);
    for i in 0..n {
        let m = tape.mask[i];
        let gm: f64 = (0..3).map(|c| g[c * n + i] * src[c * n + i]).sum();
        let gz = gm * m * (1.0 - m);
        let l = tape.luma.data()[i];
        ga -= b * gz;
        gb += (l - a) * gz;
        let gl = b * gz;
        for c in 0..3 {
            gi[c * n + i] = g[c * n + i] * m + gl * LUMA_WEIGHTS[c];
        }
    }
    let mut grads = BloomLevelParams::zeros();
    grads.a_thresh = ga;
    grads.b_steep_raw = gb * sigmoid(tape.level.b_steep_raw);
    (grad_in, grads)
}

fn pyramid(img: &ImageBuf) -> Result<Vec<ImageBuf>> {
    let mut levels = Vec::with_capacity(BLOOM_LEVELS);
    levels.push(img.clone());
    for l in 1..BLOOM_LEVELS {
        let next = downsample_half(&levels[l - 1])?;
        levels.push(next);
    }
    Ok(levels)
}

/// Sum of the upsampled, blurred glow maps of every level.
fn bloom_map(pyr: &[ImageBuf], levels: &[BloomLevelParams; BLOOM_LEVELS]) -> Result<ImageBuf> {
    let (w, h) = (pyr[0].width(), pyr[0].height());
    let mut map = pyr[0].zeros_like();
    for (d, lp) in pyr.iter().zip(levels) {
        let (glow, _) = glow_mask(d, lp)?;
        let (kx, _) = gaussian_kernel(lp.logvar_x, GAUSS_RADIUS);
        let (ky, _) = gaussian_kernel(lp.logvar_y, GAUSS_RADIUS);
        let blurred = separable_conv(&glow, &kx, &ky);
        if d.width() == w && d.height() == h {
            map.add_assign(&blurred);
        } else {
            map.add_assign(&upsample_to(&blurred, w, h)?);
        }
    }
    Ok(map)
}

#[derive(Debug)]
pub struct BloomTape {
    input: ImageBuf,
    levels: [BloomLevelParams; BLOOM_LEVELS],
    tone: BloomToneParams,
}

pub fn bloom_apply(
    img: &ImageBuf,
    levels: &[BloomLevelParams; BLOOM_LEVELS],
    tone: &BloomToneParams,
) -> Result<ImageBuf> {
    img.ensure_channels(3)?;
    let pyr = pyramid(img)?;
    let mut out = bloom_map(&pyr, levels)?;
    out.add_assign(img);
    let curve = tone.curve();
    for v in out.data_mut() {
        *v = curve.eval(*v);
    }
    Ok(out)
}

pub fn bloom_fwd(
    img: &ImageBuf,
    levels: &[BloomLevelParams; BLOOM_LEVELS],
    tone: &BloomToneParams,
) -> Result<(ImageBuf, BloomTape)> {
    let out = bloom_apply(img, levels, tone)?;
    Ok((
        out,
        BloomTape {
            input: img.clone(),
            levels: *levels,
            tone: *tone,
        },
    ))
}

/// Returns `(grad_input, grad_levels, grad_tone)`.
pub fn bloom_bwd(
    grad_out: &ImageBuf,
    tape: BloomTape,
) -> Result<(ImageBuf, [BloomLevelParams; BLOOM_LEVELS], BloomToneParams)> {
    let BloomTape {
        input,
        levels,
        tone,
    } = tape;
    let (w, h) = (input.width(), input.height());
    let pyr = pyramid(&input)?;
    let mut bloomed = bloom_map(&pyr, &levels)?;
    bloomed.add_assign(&input);

    // Tone curve; samples clamped by min(., 1) pass no gradient.
    let curve = tone.curve();
    let mut grad_bloom = input.zeros_like();
    let (mut g_eps, mut g_s) = (0.0, 0.0);
    for ((gb, &i), &g) in grad_bloom
        .data_mut()
        .iter_mut()
        .zip(bloomed.data())
        .zip(grad_out.data())
    {
        if curve.eval_unclamped(i) > 1.0 {
            continue;
        }
        let (d_i, d_eps, d_s) = curve.partials(i);
        *gb = g * d_i;
        g_eps += g * d_eps;
        g_s += g * d_s;
    }
    let grad_tone = BloomToneParams {
        eps_raw: g_eps * sigmoid(tone.eps_raw),
        s_raw: g_s * sigmoid(tone.s_raw),
    };

    let mut grad_levels = [BloomLevelParams::zeros(); BLOOM_LEVELS];
    let mut grad_pyr = Vec::with_capacity(BLOOM_LEVELS);
    for ((d, lp), gl) in pyr.iter().zip(&levels).zip(grad_levels.iter_mut()) {
        let grad_blurred = if d.width() == w && d.height() == h {
            grad_bloom.clone()
        } else {
            upsample_to_adjoint(&grad_bloom, d.width(), d.height())
        };
        let (glow, glow_tape) = glow_mask(d, lp)?;
        let (kx, jx) = gaussian_kernel(lp.logvar_x, GAUSS_RADIUS);
        let (ky, jy) = gaussian_kernel(lp.logvar_y, GAUSS_RADIUS);
        let (grad_glow, gkx, gky) = separable_conv_bwd(&grad_blurred, &glow, &kx, &ky);
        let (grad_d, g_mask) = glow_mask_bwd(&grad_glow, glow_tape);
        gl.a_thresh = g_mask.a_thresh;
        gl.b_steep_raw = g_mask.b_steep_raw;
        gl.logvar_x = gkx.iter().zip(&jx).map(|(a, b)| a * b).sum();
        gl.logvar_y = gky.iter().zip(&jy).map(|(a, b)| a * b).sum();
        grad_pyr.push(grad_d);
    }

    // Back down the pyramid: level l was produced from level l-1.
    let mut carry: Option<ImageBuf> = None;
    for l in (1..BLOOM_LEVELS).rev() {
        let mut g = grad_pyr.pop().expect("one gradient per level");
        if let Some(c) = carry.take() {
            g.add_assign(&c);
        }
        carry = Some(downsample_half_adjoint(&g, pyr[l - 1].width(), pyr[l - 1].height()));
    }
    let mut grad_in = grad_bloom;
    grad_in.add_assign(&grad_pyr.pop().expect("level 0 gradient"));
    if let Some(c) = carry {
        grad_in.add_assign(&c);
    }
    Ok((grad_in, grad_levels, grad_tone))
}
