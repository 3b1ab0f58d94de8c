//! Patch discriminator: strided valid convolutions with spectral
//! normalization, leaky-ReLU activations and instance noise injected between
//! layers. Forward and backward are written out by hand (im2col + GEMM).

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageBuf};
use crate::kv::{KvReader, KvWriter};
use crate::rng::CounterRng;

const SIGMA_FLOOR: f64 = 1e-12;
pub const DISC_FORMAT_VERSION: i64 = 1;

/// Layer layout of a discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscArch {
    /// Channel counts from input to output, e.g. `[3, 64, 128, 256, 1]`.
    pub channels: Vec<usize>,
    /// One stride per layer.
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for DiscArch {
    fn default() -> Self {
        Self::patchgan(&[64, 128, 256])
    }
}

impl DiscArch {
    /// Four 4x4 layers with strides 2, 2, 2, 1 and the given hidden widths.
    pub fn patchgan(hidden: &[usize; 3]) -> Self {
        Self {
            channels: vec![3, hidden[0], hidden[1], hidden[2], 1],
            strides: vec![2, 2, 2, 1],
            kernel: 4,
            leaky_slope: 0.2,
        }
    }

    /// Spatial side of the output map for an input side `n`, or `None` if
    /// the input is smaller than the receptive field.
    pub fn output_side(&self, n: usize) -> Option<usize> {
        self.strides.iter().try_fold(n, |n, &s| {
            (n >= self.kernel).then(|| (n - self.kernel) / s + 1)
        })
    }

    /// Smallest input side that yields a 1x1 output.
    pub fn receptive_field(&self) -> usize {
        self.strides
            .iter()
            .rev()
            .fold(1, |n, &s| (n - 1) * s + self.kernel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out_ch x (in_ch * kernel * kernel)`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Persistent left singular vector estimate.
    pub sn_u: Vec<f64>,
    /// Spectral norm estimate from the last power-iteration step; held
    /// constant (detached) during forward and backward.
    pub sigma: f64,
    pub leaky_slope: f64,
}

fn normalize_vec(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest singular value estimate of an `rows x cols` matrix after `iters`
/// power iterations starting from `u`; returns `(sigma, u)`.
pub fn power_iteration(
    w: &[f64],
    rows: usize,
    cols: usize,
    u: &[f64],
    iters: usize,
) -> (f64, Vec<f64>) {
    let mut u = u.to_vec();
    let mut sigma = 0.0;
    let mut v = vec![0.0; cols];
    let mut wv = vec![0.0; rows];
    for _ in 0..iters.max(1) {
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, &ur) in u.iter().enumerate() {
            for (vc, wrc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wrc * ur;
            }
        }
        normalize_vec(&mut v);
        for (r, o) in wv.iter_mut().enumerate() {
            *o = w[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        u.copy_from_slice(&wv);
        normalize_vec(&mut u);
        sigma = u.iter().zip(&wv).map(|(a, b)| a * b).sum();
    }
    (sigma, u)
}

impl ConvLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        leaky_slope: f64,
        rng: &CounterRng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let scale = (2.0 / fan_in as f64).sqrt();
        let weights = (0..out_ch * fan_in)
            .map(|i| scale * rng.normal_at(i as u64))
            .collect();
        let u_rng = rng.substream(&[1]);
        let mut sn_u: Vec<f64> = (0..out_ch).map(|i| u_rng.normal_at(i as u64)).collect();
        normalize_vec(&mut sn_u);
        let mut layer = Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weights,
            bias: vec![0.0; out_ch],
            sn_u,
            sigma: 1.0,
            leaky_slope,
        };
        layer.spectral_step();
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// One power-iteration step with the persistent `u`: returns the
    /// normalized weights `W / sigma`, the updated `u` and `sigma`.
    pub fn spectral_normalize(&self) -> (Vec<f64>, Vec<f64>, f64) {
        let (sigma, u) = power_iteration(&self.weights, self.out_ch, self.fan_in(), &self.sn_u, 1);
        let sigma = sigma.max(SIGMA_FLOOR);
        let normalized = self.weights.iter().map(|w| w / sigma).collect();
        (normalized, u, sigma)
    }

    /// Advances the power iteration once and caches the new estimate.
    pub fn spectral_step(&mut self) {
        let (_, u, sigma) = self.spectral_normalize();
        self.sn_u = u;
        self.sigma = sigma;
    }

    fn effective_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w / self.sigma).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    pub layers: Vec<ConvLayer>,
    pub instance_noise_sigma: f64,
}

/// Parameter gradients, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl DiscGrads {
    pub fn zeros_like(net: &DiscriminatorNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &DiscGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.bias)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

struct LayerCache {
    /// Input to the layer after instance noise, `in_ch x h x w`.
    input: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    /// Pre-activation (after noise) `out_ch x out_h x out_w`.
    z: Vec<f64>,
}

pub struct DiscTape {
    layers: Vec<LayerCache>,
    eff_weights: Vec<Vec<f64>>,
    input_dims: (usize, usize),
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut cols = vec![0.0; c * k * k * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..oh {
                    let src = &plane[(oy * s + ki) * w + kj..];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        d.copy_from_slice(&src[..ow]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src[ox * s];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..oh {
                    let base = (oy * s + ki) * w + kj;
                    for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        plane[base + ox * s] += v;
                    }
                }
            }
        }
    }
    x
}

/// `c = a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches for
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl DiscriminatorNet {
    pub fn new(arch: &DiscArch, seed: u64) -> Self {
        assert_eq!(arch.channels.len(), arch.strides.len() + 1);
        assert_eq!(*arch.channels.last().unwrap(), 1, "final layer emits one logit channel");
        let rng = CounterRng::new(seed, 0x0D15C);
        let layers = arch
            .strides
            .iter()
            .enumerate()
            .map(|(l, &s)| {
                ConvLayer::new(
                    arch.channels[l],
                    arch.channels[l + 1],
                    arch.kernel,
                    s,
                    arch.leaky_slope,
                    &rng.substream(&[l as u64]),
                )
            })
            .collect();
        Self {
            layers,
            instance_noise_sigma: 0.0,
        }
    }

    pub fn arch(&self) -> DiscArch {
        let mut channels = vec![self.layers[0].in_ch];
        channels.extend(self.layers.iter().map(|l| l.out_ch));
        DiscArch {
            channels,
            strides: self.layers.iter().map(|l| l.stride).collect(),
            kernel: self.layers[0].kernel,
            leaky_slope: self.layers[0].leaky_slope,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// One power-iteration step on every layer.
    pub fn spectral_step(&mut self) {
        self.layers.iter_mut().for_each(ConvLayer::spectral_step);
    }

    /// Patch logit map of `img`. Instance noise is drawn from `rng` when it
    /// is given and `instance_noise_sigma > 0` (training mode).
    pub fn forward(&self, img: &ImageBuf, rng: Option<&CounterRng>) -> Result<(ImageBuf, DiscTape)> {
        img.ensure_channels(self.layers[0].in_ch)?;
        let arch = self.arch();
        let (w, h) = (img.width(), img.height());
        let (Some(ow), Some(oh)) = (arch.output_side(w), arch.output_side(h)) else {
            return Err(Error::InputTooSmall { width: w, height: h });
        };
        let noise = rng.filter(|_| self.instance_noise_sigma > 0.0);
        let sigma_n = self.instance_noise_sigma;

        let mut x = img.data().to_vec();
        if let Some(r) = noise {
            let r = r.substream(&[0]);
            x.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += sigma_n * r.normal_at(i as u64));
        }
        let (mut cur_h, mut cur_w) = (h, w);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut eff_weights = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (k, s) = (layer.kernel, layer.stride);
            let lh = (cur_h - k) / s + 1;
            let lw = (cur_w - k) / s + 1;
            let p = lh * lw;
            let cols = im2col(&x, layer.in_ch, cur_h, cur_w, k, s, lh, lw);
            let weff = layer.effective_weights();
            let mut z = vec![0.0; layer.out_ch * p];
            gemm(layer.out_ch, layer.fan_in(), p, &weff, layer.fan_in(), 1, &cols, p, 1, &mut z);
            for (o, b) in layer.bias.iter().enumerate() {
                z[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
            }
            let next = if l < last {
                if let Some(r) = noise {
                    let r = r.substream(&[l as u64 + 1]);
                    z.iter_mut()
                        .enumerate()
                        .for_each(|(i, v)| *v += sigma_n * r.normal_at(i as u64));
                }
                let slope = layer.leaky_slope;
                z.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect()
            } else {
                Vec::new()
            };
            caches.push(LayerCache {
                input: std::mem::replace(&mut x, next),
                in_h: cur_h,
                in_w: cur_w,
                out_h: lh,
                out_w: lw,
                z,
            });
            eff_weights.push(weff);
            cur_h = lh;
            cur_w = lw;
        }
        debug_assert_eq!((cur_w, cur_h), (ow, oh));
        let logits = ImageBuf::from_vec(ow, oh, 1, caches[last].z.clone(), ColorSpace::Linear)?;
        Ok((
            logits,
            DiscTape {
                layers: caches,
                eff_weights,
                input_dims: (w, h),
            },
        ))
    }

    /// Backpropagates `grad_logits`. Returns parameter gradients (when
    /// `param_grads` is set) and the gradient with respect to the input.
    pub fn backward(
        &self,
        grad_logits: &ImageBuf,
        tape: DiscTape,
        param_grads: bool,
    ) -> (Option<DiscGrads>, ImageBuf) {
        let mut grads = param_grads.then(|| DiscGrads::zeros_like(self));
        let mut g = grad_logits.data().to_vec();
        let last = self.layers.len() - 1;
        for (l, (layer, cache)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            let (k, s) = (layer.kernel, layer.stride);
            let p = cache.out_h * cache.out_w;
            if l < last {
                let slope = layer.leaky_slope;
                for (gv, &z) in g.iter_mut().zip(&cache.z) {
                    if z <= 0.0 {
                        *gv *= slope;
                    }
                }
            }
            let cols = im2col(&cache.input, layer.in_ch, cache.in_h, cache.in_w, k, s, cache.out_h, cache.out_w);
            if let Some(gr) = grads.as_mut() {
                for (o, gb) in gr.bias[l].iter_mut().enumerate() {
                    *gb = g[o * p..(o + 1) * p].iter().sum();
                }
                let gw = &mut gr.weights[l];
                gemm(layer.out_ch, p, layer.fan_in(), &g, p, 1, &cols, 1, p, gw);
                // Detached spectral norm: W_eff = W / sigma with sigma fixed.
                gw.iter_mut().for_each(|v| *v /= layer.sigma);
            }
            let mut gcols = vec![0.0; layer.fan_in() * p];
            gemm(layer.fan_in(), layer.out_ch, p, &tape.eff_weights[l], 1, layer.fan_in(), &g, p, 1, &mut gcols);
            g = col2im(&gcols, layer.in_ch, cache.in_h, cache.in_w, k, s, cache.out_h, cache.out_w);
        }
        let (w, h) = tape.input_dims;
        let grad_input = ImageBuf::from_vec(w, h, self.layers[0].in_ch, g, ColorSpace::GammaEncoded)
            .expect("input gradient matches input shape");
        (grads, grad_input)
    }

    pub fn to_kv(&self) -> KvWriter {
        let mut w = KvWriter::new();
        w.comment("patch discriminator checkpoint");
        w.raw("format_version", DISC_FORMAT_VERSION);
        let arch = self.arch();
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        w.raw("channels", join(&arch.channels));
        w.raw("strides", join(&arch.strides));
        w.raw("kernel", arch.kernel);
        w.f64("leaky_slope", arch.leaky_slope);
        w.f64("instance_noise_sigma", self.instance_noise_sigma);
        for (l, layer) in self.layers.iter().enumerate() {
            w.f64(&format!("layer{l}.sigma"), layer.sigma);
            w.f64_list(&format!("layer{l}.sn_u"), &layer.sn_u);
            w.f64_list(&format!("layer{l}.bias"), &layer.bias);
            w.f64_list(&format!("layer{l}.weights"), &layer.weights);
        }
        w
    }

    pub fn from_kv(mut r: KvReader) -> Result<Self> {
        let found: i64 = r.take("format_version")?;
        if found != DISC_FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                found,
                expected: DISC_FORMAT_VERSION,
            });
        }
        let parse_list = |key: &str, s: String| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|e: std::num::ParseIntError| Error::InvalidValue {
                        key: key.into(),
                        msg: e.to_string(),
                    })
                })
                .collect()
        };
        let channels = parse_list("channels", r.take_str("channels")?)?;
        let strides = parse_list("strides", r.take_str("strides")?)?;
        if channels.len() != strides.len() + 1 || channels.last() != Some(&1) {
            return Err(Error::InvalidValue {
                key: "channels".into(),
                msg: "need one more channel count than strides, ending in 1".into(),
            });
        }
        let arch = DiscArch {
            channels,
            strides,
            kernel: r.take("kernel")?,
            leaky_slope: r.take("leaky_slope")?,
        };
        let mut net = DiscriminatorNet::new(&arch, 0);
        net.instance_noise_sigma = r.take("instance_noise_sigma")?;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            layer.sigma = r.take(&format!("layer{l}.sigma"))?;
            for (key, dst) in [
                (format!("layer{l}.sn_u"), &mut layer.sn_u),
                (format!("layer{l}.bias"), &mut layer.bias),
                (format!("layer{l}.weights"), &mut layer.weights),
            ] {
                let v = r.take_f64_list(&key)?;
                if v.len() != dst.len() {
                    return Err(Error::InvalidValue {
                        key,
                        msg: format!("expected {} values, got {}", dst.len(), v.len()),
                    });
                }
                *dst = v;
            }
        }
        r.finish()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_kv().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(KvReader::load(path)?)
    }
}

/// Free-function form of [`DiscriminatorNet::forward`].
pub fn disc_fwd(
    img: &ImageBuf,
    net: &DiscriminatorNet,
    rng: Option<&CounterRng>,
) -> Result<(ImageBuf, DiscTape)> {
    net.forward(img, rng)
}

/// Free-function form of [`DiscriminatorNet::backward`] with parameter
/// gradients.
pub fn disc_bwd(net: &DiscriminatorNet, grad_logits: &ImageBuf, tape: DiscTape) -> (DiscGrads, ImageBuf) {
    let (g, gi) = net.backward(grad_logits, tape, true);
    (g.expect("requested parameter gradients"), gi)
}
