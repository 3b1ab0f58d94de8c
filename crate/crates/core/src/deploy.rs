//! Single-precision inference path. Parameters are compiled once into
//! per-frame constants; a frame then takes four fused sweeps:
//!
//! 1. horizontal lens taps,
//! 2. vertical lens taps with the colour map,
//! 3. the bloom pyramid (downsample, glow mask, Gaussian blur per level),
//! 4. upsample-and-sum of the bloom levels, tone curve, sensor noise and
//!    the final clamp.
//!
//! Noise draws are keyed by `(seed, frame_index)` and the absolute planar
//! sample index, so output does not depend on how rows are split between
//! workers.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageBuf, LUMA_WEIGHTS};
use crate::pipeline::{pipeline_apply, PipelineParams};
use crate::resample::AxisMap;
use crate::rng::{CounterRng, StreamKey};
use crate::stages::{gaussian_kernel, BLOOM_LEVELS, GAUSS_RADIUS, LENS_TAPS};

const TAPS: usize = 2 * GAUSS_RADIUS + 1;
const LUT_SIZE: usize = 1024;
/// Below this linear value the final `x^(1/gamma)` amplifies lookup-table
/// error too much, so `lin` is recomputed exactly.
const LUT_EXACT_BELOW: f32 = 1e-2;
const INV_LUT_SIZE: usize = 8192;
const TONE_LUT_SIZE: usize = 4096;
/// `x^(1/gamma)` is too curved near zero to interpolate.
const INV_LUT_EXACT_BELOW: f32 = 1e-2;
const FRAME_STREAM: u64 = 0xF7A3E;

/// Noise stream of frame `frame_index`; the reference path uses the same
/// stream to reproduce a deployed frame.
pub fn frame_rng(seed: u64, frame_index: u64) -> CounterRng {
    CounterRng::new(seed, FRAME_STREAM).substream(&[frame_index])
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledLevel {
    pub a: f32,
    pub b: f32,
    pub gx: [f32; TAPS],
    pub gy: [f32; TAPS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledPipeline {
    pub kx: [f32; LENS_TAPS],
    pub ky: [f32; LENS_TAPS],
    pub m: [[f32; 3]; 3],
    pub t: [f32; 3],
    pub levels: [CompiledLevel; BLOOM_LEVELS],
    pub tone_eps: f32,
    /// `e^{eps s} / (e^{eps s} - 1)`.
    pub tone_scale: f32,
    /// Input at which the tone curve reaches 1.
    pub tone_s: f32,
    /// The tone curve sampled at `TONE_LUT_SIZE` intervals on [0, s].
    pub tone_lut: Option<Vec<f32>>,
    pub gain: f32,
    pub sigma: f32,
    pub gamma: f32,
    pub inv_gamma: f32,
    /// `v^gamma` sampled at `LUT_SIZE` intervals on [0, 1].
    pub lut: Option<Vec<f32>>,
    /// `v^(1/gamma)` sampled at `INV_LUT_SIZE` intervals on [0, 1].
    pub inv_lut: Option<Vec<f32>>,
}

fn to_f32<const N: usize>(v: &[f64]) -> [f32; N] {
    std::array::from_fn(|i| v[i] as f32)
}

/// Hoists every per-frame invariant out of `p`.
pub fn compile(p: &PipelineParams) -> Result<CompiledPipeline> {
    compile_with(p, true)
}

/// As [`compile`], optionally without the gamma and tone lookup tables.
pub fn compile_with(p: &PipelineParams, use_lut: bool) -> Result<CompiledPipeline> {
    let (kx, ky) = p.lens.kernels()?;
    let levels = std::array::from_fn(|l| {
        let lp = &p.bloom_levels[l];
        CompiledLevel {
            a: lp.a_thresh as f32,
            b: lp.steepness() as f32,
            gx: to_f32(&gaussian_kernel(lp.logvar_x, GAUSS_RADIUS).0),
            gy: to_f32(&gaussian_kernel(lp.logvar_y, GAUSS_RADIUS).0),
        }
    });
    let curve = p.bloom_tone.curve();
    let lut = use_lut.then(|| {
        (0..=LUT_SIZE)
            .map(|i| (i as f64 / LUT_SIZE as f64).powf(p.gamma) as f32)
            .collect()
    });
    let tone_lut = use_lut.then(|| {
        (0..=TONE_LUT_SIZE)
            .map(|i| curve.eval(curve.s * i as f64 / TONE_LUT_SIZE as f64) as f32)
            .collect()
    });
    let inv_lut = use_lut.then(|| {
        (0..=INV_LUT_SIZE)
            .map(|i| (i as f64 / INV_LUT_SIZE as f64).powf(1.0 / p.gamma) as f32)
            .collect()
    });
    Ok(CompiledPipeline {
        kx: to_f32(&kx),
        ky: to_f32(&ky),
        m: p.color.m.map(|r| r.map(|v| v as f32)),
        t: p.color.t.map(|v| v as f32),
        levels,
        tone_eps: curve.eps as f32,
        tone_scale: curve.scale as f32,
        tone_s: curve.s as f32,
        tone_lut,
        gain: p.noise.gain() as f32,
        sigma: p.noise.sigma() as f32,
        gamma: p.gamma as f32,
        inv_gamma: (1.0 / p.gamma) as f32,
        lut,
        inv_lut,
    })
}

/// Reusable per-resolution buffers.
pub struct FrameScratch {
    w: usize,
    h: usize,
    input: Vec<f32>,
    tmp: Vec<f32>,
    /// Lens + colour output, i.e. the bloom input and pyramid level 0.
    base: Vec<f32>,
    /// Pyramid levels 1.. (downsampled base).
    pyr: Vec<Vec<f32>>,
    dims: Vec<(usize, usize)>,
    glow: Vec<Vec<f32>>,
    blurred: Vec<Vec<f32>>,
    mask: Vec<f32>,
    down: Vec<(Vec<Tap>, Vec<Tap>)>,
    up: Vec<(Vec<Tap>, Vec<Tap>)>,
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    w0: f32,
    i1: usize,
    w1: f32,
}

fn taps(m: &AxisMap) -> Vec<Tap> {
    m.taps
        .iter()
        .map(|&(i0, w0, i1, w1)| Tap {
            i0,
            w0: w0 as f32,
            i1,
            w1: w1 as f32,
        })
        .collect()
}

impl FrameScratch {
    pub fn new(w: usize, h: usize) -> Self {
        let mut dims = vec![(w, h)];
        for l in 1..BLOOM_LEVELS {
            let (pw, ph) = dims[l - 1];
            dims.push((pw.div_ceil(2), ph.div_ceil(2)));
        }
        let n = 3 * w * h;
        Self {
            w,
            h,
            input: vec![0.0; n],
            tmp: vec![0.0; n],
            base: vec![0.0; n],
            pyr: dims[1..].iter().map(|&(a, b)| vec![0.0; 3 * a * b]).collect(),
            glow: dims.iter().map(|&(a, b)| vec![0.0; 3 * a * b]).collect(),
            blurred: dims.iter().map(|&(a, b)| vec![0.0; 3 * a * b]).collect(),
            mask: vec![0.0; w * h],
            down: (1..BLOOM_LEVELS)
                .map(|l| {
                    let (pw, ph) = dims[l - 1];
                    (taps(&AxisMap::halve(pw)), taps(&AxisMap::halve(ph)))
                })
                .collect(),
            up: (1..BLOOM_LEVELS)
                .map(|l| {
                    let (lw, lh) = dims[l];
                    (taps(&AxisMap::linear(lw, w)), taps(&AxisMap::linear(lh, h)))
                })
                .collect(),
            dims,
        }
    }

    fn fits(&self, w: usize, h: usize) -> bool {
        self.w == w && self.h == h
    }
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

// Kept out of line: inlined into the rayon closures it stops vectorizing.
#[inline(never)]
fn axpy(d: &mut [f32], s: &[f32], k: f32) {
    for (o, v) in d.iter_mut().zip(s) {
        *o += k * v;
    }
}

/// Horizontal odd-length convolution with replicate borders, every row of
/// `src` (row length `w`).
fn conv_h(src: &[f32], dst: &mut [f32], w: usize, k: &[f32]) {
    let r = k.len() / 2;
    dst.par_chunks_mut(w).zip(src.par_chunks(w)).for_each(|(d, s)| {
        if w > 2 * r {
            // Tap-major so the inner loop vectorizes; d[x] += k[i] * s[x + r - i].
            let m = w - 2 * r;
            let d = &mut d[r..w - r];
            d.iter_mut().for_each(|v| *v = 0.0);
            for (i, &kv) in k.iter().enumerate() {
                let off = 2 * r - i;
                axpy(d, &s[off..off + m], kv);
            }
        }
        let edge = |x: usize| {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * s[clamp_idx(x as isize + r as isize - i as isize, w)];
            }
            acc
        };
        for x in (0..r.min(w)).chain(w.saturating_sub(r).max(r.min(w))..w) {
            d[x] = edge(x);
        }
    });
}

/// Vertical convolution of one plane with replicate borders.
fn conv_v_plane(src: &[f32], dst: &mut [f32], w: usize, h: usize, k: &[f32]) {
    let r = k.len() as isize / 2;
    dst.par_chunks_mut(w).enumerate().for_each(|(y, d)| {
        d.iter_mut().for_each(|v| *v = 0.0);
        for (i, &kv) in k.iter().enumerate() {
            let sy = clamp_idx(y as isize + r - i as isize, h);
            axpy(d, &src[sy * w..(sy + 1) * w], kv);
        }
    });
}

impl CompiledPipeline {
    pub fn noise_active(&self) -> bool {
        self.gain != 0.0 || self.sigma != 0.0
    }

    #[inline]
    fn lin(&self, p: f32) -> f32 {
        match &self.lut {
            Some(lut) => {
                let x = p * LUT_SIZE as f32;
                let i = (x as i32 as usize).min(LUT_SIZE - 1);
                let f = x - i as f32;
                let v = lut[i] + (lut[i + 1] - lut[i]) * f;
                if v < LUT_EXACT_BELOW {
                    p.powf(self.gamma)
                } else {
                    v
                }
            }
            None => p.powf(self.gamma),
        }
    }

    #[inline]
    fn encode(&self, v: f32) -> f32 {
        match &self.inv_lut {
            Some(lut) if (INV_LUT_EXACT_BELOW..1.0).contains(&v) => {
                let x = v * INV_LUT_SIZE as f32;
                let i = (x as i32 as usize).min(INV_LUT_SIZE - 1);
                let f = x - i as f32;
                lut[i] + (lut[i + 1] - lut[i]) * f
            }
            _ => v.max(0.0).powf(self.inv_gamma),
        }
    }

    #[inline]
    fn tone(&self, i: f32) -> f32 {
        match &self.tone_lut {
            Some(_) if i >= self.tone_s => 1.0,
            Some(lut) if i >= 0.0 => {
                let x = i * (TONE_LUT_SIZE as f32 / self.tone_s);
                let k = (x as i32 as usize).min(TONE_LUT_SIZE - 1);
                let f = x - k as f32;
                lut[k] + (lut[k + 1] - lut[k]) * f
            }
            _ => (self.tone_scale * -(-self.tone_eps * i).exp_m1()).min(1.0),
        }
    }

    #[inline]
    fn noise(&self, v: f32, key: &StreamKey, idx: usize) -> f32 {
        let p = v.max(0.0);
        let (n1, n2) = key.normal_pair_f32(idx as u64);
        let lin = self.lin(p);
        let term = (self.gain * lin).sqrt() * n1 + self.sigma * n2;
        if term == 0.0 {
            return p;
        }
        self.encode(lin + term)
    }

    /// Runs one frame. Allocates scratch and output; see
    /// [`run_frame_into`](Self::run_frame_into) for the allocation-free form.
    pub fn run_frame(&self, img: &ImageBuf, frame_index: u64, seed: u64) -> Result<ImageBuf> {
        let mut scratch = FrameScratch::new(img.width(), img.height());
        let mut out = ImageBuf::new(img.width(), img.height(), 3, ColorSpace::GammaEncoded);
        self.run_frame_into(img, frame_index, seed, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Runs one frame into `out`, reusing `scratch`. Both are resized (and
    /// reallocated) only when the frame size changes.
    pub fn run_frame_into(
        &self,
        img: &ImageBuf,
        frame_index: u64,
        seed: u64,
        scratch: &mut FrameScratch,
        out: &mut ImageBuf,
    ) -> Result<()> {
        img.ensure_channels(3)?;
        let (w, h) = (img.width(), img.height());
        if w == 0 || h == 0 {
            return Err(Error::ZeroDimension);
        }
        if !scratch.fits(w, h) {
            *scratch = FrameScratch::new(w, h);
        }
        if out.width() != w || out.height() != h || out.channels() != 3 {
            *out = ImageBuf::new(w, h, 3, ColorSpace::GammaEncoded);
        }
        out.set_color_space(ColorSpace::GammaEncoded);
        let n = w * h;
        let s = scratch;

        s.input
            .par_chunks_mut(w)
            .zip(img.data().par_chunks(w))
            .for_each(|(d, src)| d.iter_mut().zip(src).for_each(|(o, &v)| *o = v as f32));

        // Lens blur, rows then columns, colour map on the column output.
        conv_h(&s.input, &mut s.tmp, w, &self.kx);
        for c in 0..3 {
            conv_v_plane(&s.tmp[c * n..(c + 1) * n], &mut s.input[c * n..(c + 1) * n], w, h, &self.ky);
        }
        {
            let src = &s.input;
            let (m, t) = (&self.m, &self.t);
            let (b0, rest) = s.base.split_at_mut(n);
            let (b1, b2) = rest.split_at_mut(n);
            b0.par_chunks_mut(w)
                .zip(b1.par_chunks_mut(w))
                .zip(b2.par_chunks_mut(w))
                .enumerate()
                .for_each(|(y, ((r0, r1), r2))| {
                    let o = y * w;
                    for x in 0..w {
                        let (p0, p1, p2) = (src[o + x], src[n + o + x], src[2 * n + o + x]);
                        r0[x] = m[0][0] * p0 + m[0][1] * p1 + m[0][2] * p2 + t[0];
                        r1[x] = m[1][0] * p0 + m[1][1] * p1 + m[1][2] * p2 + t[1];
                        r2[x] = m[2][0] * p0 + m[2][1] * p1 + m[2][2] * p2 + t[2];
                    }
                });
        }

        // Pyramid.
        for l in 1..BLOOM_LEVELS {
            let (pw, ph) = s.dims[l - 1];
            let (lw, lh) = s.dims[l];
            let (mx, my) = &s.down[l - 1];
            let (prev, cur) = if l == 1 {
                (&s.base[..], &mut s.pyr[0])
            } else {
                let (a, b) = s.pyr.split_at_mut(l - 1);
                (&a[l - 2][..], &mut b[0])
            };
            cur.par_chunks_mut(lw).enumerate().for_each(|(row, d)| {
                let (c, oy) = (row / lh, row % lh);
                let plane = &prev[c * pw * ph..(c + 1) * pw * ph];
                let ty = my[oy];
                let (r0, r1) = (&plane[ty.i0 * pw..(ty.i0 + 1) * pw], &plane[ty.i1 * pw..(ty.i1 + 1) * pw]);
                for (o, tx) in d.iter_mut().zip(mx) {
                    let a = tx.w0 * r0[tx.i0] + tx.w1 * r0[tx.i1];
                    let b = tx.w0 * r1[tx.i0] + tx.w1 * r1[tx.i1];
                    *o = ty.w0 * a + ty.w1 * b;
                }
            });
        }

        // Glow and blur per level.
        for l in 0..BLOOM_LEVELS {
            let (lw, lh) = s.dims[l];
            let ln = lw * lh;
            let lvl = &self.levels[l];
            let src: &[f32] = if l == 0 { &s.base } else { &s.pyr[l - 1] };
            let mask = &mut s.mask[..ln];
            mask.par_chunks_mut(lw).enumerate().for_each(|(y, mrow)| {
                let o = y * lw;
                for (x, mv) in mrow.iter_mut().enumerate() {
                    let i = o + x;
                    let luma = LUMA_WEIGHTS[0] as f32 * src[i]
                        + LUMA_WEIGHTS[1] as f32 * src[ln + i]
                        + LUMA_WEIGHTS[2] as f32 * src[2 * ln + i];
                    *mv = 1.0 / (1.0 + (-lvl.b * (luma - lvl.a)).exp());
                }
            });
            let mask = &s.mask[..ln];
            let glow = &mut s.glow[l];
            glow.par_chunks_mut(lw).enumerate().for_each(|(row, d)| {
                let o = (row % lh) * lw;
                let srow = &src[row * lw..(row + 1) * lw];
                for ((g, sv), mv) in d.iter_mut().zip(srow).zip(&mask[o..o + lw]) {
                    *g = sv * mv;
                }
            });
            conv_h(&s.glow[l], &mut s.tmp[..3 * ln], lw, &lvl.gx);
            for c in 0..3 {
                conv_v_plane(
                    &s.tmp[c * ln..(c + 1) * ln],
                    &mut s.blurred[l][c * ln..(c + 1) * ln],
                    lw,
                    lh,
                    &lvl.gy,
                );
            }
        }

        // Upsample-sum, tone, noise, clamp.
        let key = frame_rng(seed, frame_index).stream_key();
        let noisy = self.noise_active();
        let s = &*s;
        let max_lw = s.dims[1].0;
        out.data_mut().par_chunks_mut(w).enumerate().for_each_init(
            || (vec![0.0f32; w], vec![0.0f32; max_lw]),
            |(acc, vrow), (row, d)| {
                let (c, y) = (row / h, row % h);
                let o = row * w;
                for ((a, b), g) in acc.iter_mut().zip(&s.base[o..o + w]).zip(&s.blurred[0][o..o + w]) {
                    *a = b + g;
                }
                for l in 1..BLOOM_LEVELS {
                    let (lw, lh) = s.dims[l];
                    let (mx, my) = &s.up[l - 1];
                    let plane = &s.blurred[l][c * lw * lh..(c + 1) * lw * lh];
                    let ty = my[y];
                    let (r0, r1) = (&plane[ty.i0 * lw..(ty.i0 + 1) * lw], &plane[ty.i1 * lw..(ty.i1 + 1) * lw]);
                    let vrow = &mut vrow[..lw];
                    for ((v, a), b) in vrow.iter_mut().zip(r0).zip(r1) {
                        *v = ty.w0 * a + ty.w1 * b;
                    }
                    for (a, tx) in acc.iter_mut().zip(mx) {
                        *a += tx.w0 * vrow[tx.i0] + tx.w1 * vrow[tx.i1];
                    }
                }
                for (x, (dv, &a)) in d.iter_mut().zip(acc.iter()).enumerate() {
                    let mut v = self.tone(a);
                    v = if noisy { self.noise(v, &key, o + x) } else { v.max(0.0) };
                    *dv = v.clamp(0.0, 1.0) as f64;
                }
            },
        );
        Ok(())
    }
}

/// Timing samples of the fused path and of the reference path on the same
/// frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    pub width: usize,
    pub height: usize,
    pub samples_ms: Vec<f64>,
    pub ref_samples_ms: Vec<f64>,
    /// Rough bytes read and written per fused frame.
    pub bytes_moved: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl FrameStats {
    pub fn mean_ms(&self) -> f64 {
        mean_std(&self.samples_ms).0
    }

    pub fn std_ms(&self) -> f64 {
        mean_std(&self.samples_ms).1
    }

    pub fn ref_mean_ms(&self) -> f64 {
        mean_std(&self.ref_samples_ms).0
    }

    pub fn speedup(&self) -> f64 {
        self.ref_mean_ms() / self.mean_ms()
    }

    pub const HEADER: &'static str = "resolution frames mean_ms std_ms ref_mean_ms speedup";

    pub fn row(&self) -> String {
        format!(
            "{}x{} {} {:.3} {:.3} {:.3} {:.2}",
            self.width,
            self.height,
            self.samples_ms.len(),
            self.mean_ms(),
            self.std_ms(),
            self.ref_mean_ms(),
            self.speedup()
        )
    }
}

const WARMUP_FRAMES: usize = 3;

/// Times `frames` fused frames after three warm-up frames, then the
/// reference path (`pipeline_apply` with the same noise streams) on the
/// same frames.
pub fn bench(
    params: &PipelineParams,
    cp: &CompiledPipeline,
    width: usize,
    height: usize,
    frames: usize,
    seed: u64,
) -> Result<FrameStats> {
    if frames < 10 {
        return Err(Error::Config(format!("bench needs at least 10 frames, got {frames}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension);
    }
    let img = crate::synth::synthetic_render(width, height, seed);
    let mut scratch = FrameScratch::new(width, height);
    let mut out = ImageBuf::new(width, height, 3, ColorSpace::GammaEncoded);
    for f in 0..WARMUP_FRAMES {
        cp.run_frame_into(&img, f as u64, seed, &mut scratch, &mut out)?;
    }
    let mut samples_ms = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = Instant::now();
        cp.run_frame_into(&img, f as u64, seed, &mut scratch, &mut out)?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let noisy = cp.noise_active();
    let mut ref_samples_ms = Vec::with_capacity(frames);
    for f in 0..frames {
        let rng = frame_rng(seed, f as u64);
        let t = Instant::now();
        let r = pipeline_apply(&img, params, noisy.then_some(&rng))?;
        ref_samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
        drop(r);
    }
    let n = width * height * 3;
    // Input read, lens (2 sweeps), colour, pyramid, glow/blur at level 0
    // (3 sweeps), final read of base + blur and output write; 4 bytes each
    // except the f64 input and output.
    let bytes_moved = n * 8 * 2 + n * 4 * 12;
    Ok(FrameStats {
        width,
        height,
        samples_ms,
        ref_samples_ms,
        bytes_moved,
    })
}
