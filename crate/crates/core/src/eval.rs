//! Histogram distances between image sets and the gradient-check harness.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{luma, ImageBuf};
use crate::io::load_dir;
use crate::pipeline::{param_names, pipeline_apply, pipeline_bwd, pipeline_fwd, PipelineParams, PARAM_COUNT};
use crate::rng::CounterRng;

pub const BINS: usize = 256;

/// Normalized per-channel histograms over an image set.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramSet {
    pub bins: usize,
    pub channels: Vec<Vec<f64>>,
}

fn bin_of(v: f64, bins: usize) -> usize {
    let top = (bins - 1) as f64;
    (v.clamp(0.0, 1.0) * top).round() as usize
}

impl HistogramSet {
    /// Histograms of the gamma-encoded samples of every image, one per
    /// channel. Values are clamped to [0, 1] and binned by `round(v * 255)`.
    pub fn from_images(images: &[ImageBuf]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::EmptyDataset("histogram".into()))?;
        let nc = first.channels();
        let mut counts = vec![vec![0u64; BINS]; nc];
        for img in images {
            img.ensure_channels(nc)?;
            for (c, hist) in counts.iter_mut().enumerate() {
                for &v in img.plane(c) {
                    hist[bin_of(v, BINS)] += 1;
                }
            }
        }
        Ok(Self::from_counts(&counts))
    }

    pub fn from_counts(counts: &[Vec<u64>]) -> Self {
        let channels = counts
            .iter()
            .map(|h| {
                let total: u64 = h.iter().sum();
                h.iter().map(|&n| n as f64 / total.max(1) as f64).collect()
            })
            .collect();
        Self {
            bins: counts.first().map_or(BINS, Vec::len),
            channels,
        }
    }

    /// Histograms of absolute horizontal and vertical luma differences
    /// (two "channels").
    pub fn gradient_magnitudes(images: &[ImageBuf]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset("histogram".into()));
        }
        let mut counts = vec![vec![0u64; BINS]; 2];
        for img in images {
            let y = luma(img)?;
            let (w, h) = (y.width(), y.height());
            let p = y.plane(0);
            for row in 0..h {
                for x in 0..w {
                    let v = p[row * w + x];
                    if x + 1 < w {
                        counts[0][bin_of((p[row * w + x + 1] - v).abs(), BINS)] += 1;
                    }
                    if row + 1 < h {
                        counts[1][bin_of((p[(row + 1) * w + x] - v).abs(), BINS)] += 1;
                    }
                }
            }
        }
        Ok(Self::from_counts(&counts))
    }
}

/// Mean over channels of the 1-Wasserstein distance between histograms, in
/// units of the full [0, 1] range.
pub fn hist_distance(a: &HistogramSet, b: &HistogramSet) -> Result<f64> {
    if a.bins != b.bins || a.channels.len() != b.channels.len() || a.bins < 2 {
        return Err(Error::BinningMismatch(
            format!("{} bins x {} channels", a.bins, a.channels.len()),
            format!("{} bins x {} channels", b.bins, b.channels.len()),
        ));
    }
    let width = 1.0 / (a.bins - 1) as f64;
    let total: f64 = a
        .channels
        .iter()
        .zip(&b.channels)
        .map(|(ha, hb)| {
            let (mut ca, mut cb, mut d) = (0.0, 0.0, 0.0);
            for (x, y) in ha.iter().zip(hb) {
                ca += x;
                cb += y;
                d += (ca - cb).abs();
            }
            d * width
        })
        .sum();
    Ok(total / a.channels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    /// Step the numeric value was taken with.
    pub step: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> &GradCheckEntry {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("report covers every parameter")
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !(e.rel_err <= self.threshold)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>14} {:>14} {:>9} {:>9}\n",
            "parameter", "analytic", "numeric", "step", "rel_err"
        );
        for e in &self.entries {
            s += &format!(
                "{:<24} {:>14.6e} {:>14.6e} {:>9.1e} {:>9.2e}\n",
                e.name, e.analytic, e.numeric, e.step, e.rel_err
            );
        }
        let w = self.worst();
        s += &format!("worst {} {:.3e} threshold {:.1e} {}\n", w.name, w.rel_err, self.threshold, if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-3;

/// Largest step the escalation in [`gradcheck`] will try.
const MAX_STEP: f64 = 0.1;
/// Required ratio of the finite-difference signal to the roundoff floor.
const SIGNAL_TO_ROUNDOFF: f64 = 1e6;

/// Compares `pipeline_bwd` against central differences of
/// `L = <w, pipeline(img)>` for all 42 scalars, with `w` a fixed random
/// weighting and the noise draws frozen by `seed`.
///
/// Each numeric value is the Richardson extrapolation of central differences
/// at steps `h` and `h/2`. `h` starts at the given value; scalars whose
/// gradient is so small that
/// `L(x + h) - L(x - h)` is within `SIGNAL_TO_ROUNDOFF` of the loss roundoff
/// floor have their step grown fourfold until the difference is resolvable
/// (or the step reaches `MAX_STEP`). Step selection never looks at the
/// analytic gradient.
pub fn gradcheck(p: &PipelineParams, img: &ImageBuf, seed: u64, h: f64) -> Result<GradCheckReport> {
    let noise = CounterRng::new(seed, 0x6C);
    let wrng = CounterRng::new(seed, 0x6D);
    let mut weights = img.zeros_like();
    for (i, v) in weights.data_mut().iter_mut().enumerate() {
        *v = 2.0 * wrng.uniform_at(i as u64) - 1.0;
    }
    let (out, tape) = pipeline_fwd(img, p, Some(&noise))?;
    let analytic = pipeline_bwd(&weights, tape)?.to_flat();
    let roundoff = f64::EPSILON
        * out
            .data()
            .iter()
            .zip(weights.data())
            .map(|(o, w)| (o * w).powi(2))
            .sum::<f64>()
            .sqrt();
    let base = p.to_flat();
    let loss = |flat: &[f64; PARAM_COUNT]| -> Result<f64> {
        let q = PipelineParams::from_flat(flat, p.gamma);
        Ok(pipeline_apply(img, &q, Some(&noise))?.dot(&weights))
    };
    let mut entries = Vec::with_capacity(PARAM_COUNT);
    for (i, name) in param_names().iter().enumerate() {
        let central = |step: f64| -> Result<f64> {
            let mut plus = base;
            let mut minus = base;
            plus[i] += step;
            minus[i] -= step;
            Ok(loss(&plus)? - loss(&minus)?)
        };
        let mut step = h;
        let mut diff = central(step)?;
        while diff.abs() < SIGNAL_TO_ROUNDOFF * roundoff && step * 4.0 <= MAX_STEP {
            step *= 4.0;
            diff = central(step)?;
        }
        // Richardson extrapolation of the step and half-step central
        // differences cancels the h^2 truncation term.
        let coarse = diff / (2.0 * step);
        let fine = central(step / 2.0)? / step;
        let numeric = (4.0 * fine - coarse) / 3.0;
        let a = analytic[i];
        entries.push(GradCheckEntry {
            name: name.as_str(),
            analytic: a,
            numeric,
            step,
            rel_err: (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8),
        });
    }
    Ok(GradCheckReport {
        entries,
        threshold: GRADCHECK_THRESHOLD,
    })
}

/// A random parameter point for gradient checks. Each stage is perturbed
/// away from its initialization while staying in a smooth region: no
/// clamped tone-curve samples and noise weak enough that the gamma round
/// trip stays away from its singularity at zero.
pub fn random_params(seed: u64) -> PipelineParams {
    let rng = CounterRng::new(seed, 0x9A);
    let mut k = 0u64;
    let mut u = |lo: f64, hi: f64| {
        k += 1;
        lo + (hi - lo) * rng.uniform_at(k)
    };
    let mut p = PipelineParams::default();
    for raw in p.lens.kx_raw.iter_mut().chain(p.lens.ky_raw.iter_mut()) {
        *raw += u(0.0, 0.3);
    }
    for (r, row) in p.color.m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = if r == c { u(0.8, 1.1) } else { u(-0.1, 0.1) };
        }
    }
    for t in &mut p.color.t {
        *t = u(-0.05, 0.05);
    }
    for level in &mut p.bloom_levels {
        level.a_thresh = u(0.4, 0.9);
        level.b_steep_raw = u(1.0, 6.0);
        level.logvar_x = u(-1.0, 1.0);
        level.logvar_y = u(-1.0, 1.0);
    }
    p.bloom_tone.eps_raw = u(-1.0, 0.5);
    p.bloom_tone.s_raw = u(4.5, 5.5);
    p.noise.gamma_raw = u(-9.0, -7.0);
    p.noise.sigma_raw = u(-9.0, -7.0);
    p
}

/// A `size`x`size` image with samples in [0.2, 0.8].
pub fn random_gradcheck_image(size: usize, seed: u64) -> ImageBuf {
    let rng = CounterRng::new(seed, 0x9B);
    ImageBuf::from_fn(size, size, 3, crate::image::ColorSpace::GammaEncoded, |c, x, y| {
        0.2 + 0.6 * rng.uniform_at(((c * size + y) * size + x) as u64)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub source_color: f64,
    pub enhanced_color: f64,
    pub source_gradient: f64,
    pub enhanced_gradient: f64,
}

impl EvalMetrics {
    pub fn kv_lines(&self) -> String {
        format!(
            "source_color_distance = {}\nenhanced_color_distance = {}\nsource_gradient_distance = {}\nenhanced_gradient_distance = {}\n",
            self.source_color, self.enhanced_color, self.source_gradient, self.enhanced_gradient
        )
    }

    pub fn table(&self) -> String {
        format!(
            "{:<10} {:>12} {:>12}\n{:<10} {:>12.6} {:>12.6}\n{:<10} {:>12.6} {:>12.6}\n",
            "set", "color_w1", "gradient_w1", "source", self.source_color, self.source_gradient, "enhanced",
            self.enhanced_color, self.enhanced_gradient
        )
    }
}

/// Distances of the source set and of the enhanced source set to the target
/// set. `rng = None` evaluates with sensor noise off.
pub fn eval_sets(
    params: &PipelineParams,
    source: &[ImageBuf],
    target: &[ImageBuf],
    rng: Option<&CounterRng>,
) -> Result<EvalMetrics> {
    let enhanced: Vec<ImageBuf> = source
        .iter()
        .enumerate()
        .map(|(i, img)| pipeline_apply(img, params, rng.map(|r| r.substream(&[i as u64])).as_ref()))
        .collect::<Result<_>>()?;
    let tc = HistogramSet::from_images(target)?;
    let tg = HistogramSet::gradient_magnitudes(target)?;
    Ok(EvalMetrics {
        source_color: hist_distance(&HistogramSet::from_images(source)?, &tc)?,
        enhanced_color: hist_distance(&HistogramSet::from_images(&enhanced)?, &tc)?,
        source_gradient: hist_distance(&HistogramSet::gradient_magnitudes(source)?, &tg)?,
        enhanced_gradient: hist_distance(&HistogramSet::gradient_magnitudes(&enhanced)?, &tg)?,
    })
}

pub fn eval_run(
    params: &PipelineParams,
    source_dir: impl AsRef<Path>,
    target_dir: impl AsRef<Path>,
    rng: Option<&CounterRng>,
) -> Result<EvalMetrics> {
    let source = load_dir(source_dir)?;
    let target = load_dir(target_dir)?;
    eval_sets(params, &source, &target, rng)
}
