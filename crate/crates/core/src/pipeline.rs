//! The full shader chain: lens blur, color map, bloom, sensor noise, then a
//! final clamp to the displayable range.

use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::{ImageBuf, DEFAULT_GAMMA};
use crate::kv::{KvReader, KvWriter};
use crate::rng::CounterRng;
use crate::stages::*;

/// Number of learnable scalars.
pub const PARAM_COUNT: usize = 42;
pub const FORMAT_VERSION: i64 = 1;

/// Which stage a flat parameter index belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Lens,
    Color,
    Bloom,
    Noise,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Lens, Stage::Color, Stage::Bloom, Stage::Noise];

    /// Flat index range of the stage's parameters.
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            Stage::Lens => 0..10,
            Stage::Color => 10..22,
            Stage::Bloom => 22..40,
            Stage::Noise => 40..42,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Lens => "lens",
            Stage::Color => "color",
            Stage::Bloom => "bloom",
            Stage::Noise => "noise",
        }
    }
}

/// Canonical names of the 42 learnable scalars, in flat order.
pub fn param_names() -> &'static [String; PARAM_COUNT] {
    static NAMES: OnceLock<[String; PARAM_COUNT]> = OnceLock::new();
    NAMES.get_or_init(|| {
        let mut v = Vec::with_capacity(PARAM_COUNT);
        for k in ["kx", "ky"] {
            v.extend((0..5).map(|i| format!("lens.{k}[{i}]")));
        }
        v.extend((0..9).map(|i| format!("color.m[{i}]")));
        v.extend((0..3).map(|i| format!("color.t[{i}]")));
        for l in 0..BLOOM_LEVELS {
            for f in ["a", "b_raw", "logvar_x", "logvar_y"] {
                v.push(format!("bloom.level{l}.{f}"));
            }
        }
        v.push("bloom.tone.eps_raw".into());
        v.push("bloom.tone.s_raw".into());
        v.push("noise.gamma_raw".into());
        v.push("noise.sigma_raw".into());
        v.try_into().expect("42 names")
    })
}

fn flatten(
    lens: &LensBlurParams,
    color: &ColorMapParams,
    levels: &[BloomLevelParams; BLOOM_LEVELS],
    tone: &BloomToneParams,
    noise: &NoiseParams,
) -> [f64; PARAM_COUNT] {
    let mut out = [0.0; PARAM_COUNT];
    out[0..5].copy_from_slice(&lens.kx_raw);
    out[5..10].copy_from_slice(&lens.ky_raw);
    out[10..22].copy_from_slice(&color.to_array());
    for (l, lp) in levels.iter().enumerate() {
        out[22 + 4 * l..26 + 4 * l].copy_from_slice(&lp.to_array());
    }
    out[38] = tone.eps_raw;
    out[39] = tone.s_raw;
    out[40] = noise.gamma_raw;
    out[41] = noise.sigma_raw;
    out
}

type Unflat = (
    LensBlurParams,
    ColorMapParams,
    [BloomLevelParams; BLOOM_LEVELS],
    BloomToneParams,
    NoiseParams,
);

fn unflatten(v: &[f64; PARAM_COUNT]) -> Unflat {
    let lens = LensBlurParams {
        kx_raw: v[0..5].try_into().unwrap(),
        ky_raw: v[5..10].try_into().unwrap(),
    };
    let color = ColorMapParams::from_array(v[10..22].try_into().unwrap());
    let mut levels = [BloomLevelParams::zeros(); BLOOM_LEVELS];
    for (l, lp) in levels.iter_mut().enumerate() {
        *lp = BloomLevelParams::from_array(v[22 + 4 * l..26 + 4 * l].try_into().unwrap());
    }
    let tone = BloomToneParams {
        eps_raw: v[38],
        s_raw: v[39],
    };
    let noise = NoiseParams {
        gamma_raw: v[40],
        sigma_raw: v[41],
    };
    (lens, color, levels, tone, noise)
}

/// Every learnable parameter of the chain plus the (fixed) display gamma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineParams {
    pub lens: LensBlurParams,
    pub color: ColorMapParams,
    pub bloom_levels: [BloomLevelParams; BLOOM_LEVELS],
    pub bloom_tone: BloomToneParams,
    pub noise: NoiseParams,
    pub gamma: f64,
}

impl Default for PipelineParams {
    /// Near-identity initialization: impulse kernels, identity affine map,
    /// bloom thresholded above the displayable range, negligible noise.
    fn default() -> Self {
        Self {
            lens: LensBlurParams::default(),
            color: ColorMapParams::default(),
            bloom_levels: [BloomLevelParams::default(); BLOOM_LEVELS],
            bloom_tone: BloomToneParams::default(),
            noise: NoiseParams::default(),
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl PipelineParams {
    pub fn to_flat(&self) -> [f64; PARAM_COUNT] {
        flatten(
            &self.lens,
            &self.color,
            &self.bloom_levels,
            &self.bloom_tone,
            &self.noise,
        )
    }

    pub fn from_flat(v: &[f64; PARAM_COUNT], gamma: f64) -> Self {
        let (lens, color, bloom_levels, bloom_tone, noise) = unflatten(v);
        Self {
            lens,
            color,
            bloom_levels,
            bloom_tone,
            noise,
            gamma,
        }
    }

    pub fn set_flat(&mut self, v: &[f64; PARAM_COUNT]) {
        *self = Self::from_flat(v, self.gamma);
    }

    pub fn to_kv(&self) -> KvWriter {
        let mut w = KvWriter::new();
        w.comment("camera pipeline parameters");
        w.raw("format_version", FORMAT_VERSION);
        w.f64("gamma", self.gamma);
        for (name, v) in param_names().iter().zip(self.to_flat()) {
            w.f64(name, v);
        }
        w
    }

    pub fn from_kv(mut r: KvReader) -> Result<Self> {
        let found: i64 = r.take("format_version")?;
        if found != FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let gamma: f64 = r.take("gamma")?;
        let mut flat = [0.0; PARAM_COUNT];
        for (name, slot) in param_names().iter().zip(flat.iter_mut()) {
            *slot = r.take(name)?;
        }
        r.finish()?;
        Ok(Self::from_flat(&flat, gamma))
    }
}

pub fn save_params(p: &PipelineParams, path: impl AsRef<Path>) -> Result<()> {
    p.to_kv().save(path)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<PipelineParams> {
    PipelineParams::from_kv(KvReader::load(path)?)
}

/// Gradient of a scalar loss with respect to every learnable parameter and
/// the input image.
#[derive(Clone, Debug)]
pub struct PipelineGrads {
    pub lens: LensBlurParams,
    pub color: ColorMapParams,
    pub bloom_levels: [BloomLevelParams; BLOOM_LEVELS],
    pub bloom_tone: BloomToneParams,
    pub noise: NoiseParams,
    pub input: ImageBuf,
}

impl PipelineGrads {
    pub fn to_flat(&self) -> [f64; PARAM_COUNT] {
        flatten(
            &self.lens,
            &self.color,
            &self.bloom_levels,
            &self.bloom_tone,
            &self.noise,
        )
    }

    /// Name of the first non-finite parameter gradient, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.to_flat()
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| param_names()[i].as_str())
    }
}

#[derive(Debug)]
pub struct PipelineTape {
    lens: LensBlurTape,
    color: ColorMapTape,
    bloom: BloomTape,
    noise: NoiseTape,
    pre_clamp: ImageBuf,
}

/// Training-mode forward. `rng = None` disables sensor noise.
pub fn pipeline_fwd(
    img: &ImageBuf,
    p: &PipelineParams,
    rng: Option<&CounterRng>,
) -> Result<(ImageBuf, PipelineTape)> {
    img.ensure_channels(3)?;
    let (x, lens) = lens_blur_fwd(img, &p.lens)?;
    let (x, color) = color_map_fwd(&x, &p.color)?;
    let (x, bloom) = bloom_fwd(&x, &p.bloom_levels, &p.bloom_tone)?;
    let (pre_clamp, noise) = noise_fwd(&x, &p.noise, p.gamma, rng)?;
    let out = pre_clamp.clamp01();
    Ok((
        out,
        PipelineTape {
            lens,
            color,
            bloom,
            noise,
            pre_clamp,
        },
    ))
}

/// Inference forward; same map as [`pipeline_fwd`] without recording tapes.
pub fn pipeline_apply(
    img: &ImageBuf,
    p: &PipelineParams,
    rng: Option<&CounterRng>,
) -> Result<ImageBuf> {
    img.ensure_channels(3)?;
    let x = lens_blur_apply(img, &p.lens)?;
    let x = color_map_apply(&x, &p.color)?;
    let x = bloom_apply(&x, &p.bloom_levels, &p.bloom_tone)?;
    let mut x = noise_apply(&x, &p.noise, p.gamma, rng)?;
    x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(x)
}

pub fn pipeline_bwd(grad_out: &ImageBuf, tape: PipelineTape) -> Result<PipelineGrads> {
    tape.pre_clamp.ensure_same_shape(grad_out)?;
    let mut g = grad_out.clone();
    for (gv, &v) in g.data_mut().iter_mut().zip(tape.pre_clamp.data()) {
        if !(0.0..=1.0).contains(&v) {
            *gv = 0.0;
        }
    }
    let (g, noise) = noise_bwd(&g, tape.noise);
    let (g, bloom_levels, bloom_tone) = bloom_bwd(&g, tape.bloom)?;
    let (g, color) = color_map_bwd(&g, tape.color);
    let (input, lens) = lens_blur_bwd(&g, tape.lens);
    Ok(PipelineGrads {
        lens,
        color,
        bloom_levels,
        bloom_tone,
        noise,
        input,
    })
}
