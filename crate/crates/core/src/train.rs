//! Unpaired adversarial training of the pipeline parameters against a patch
//! discriminator: crop sampling, relativistic least-squares losses, ADAM.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::disc::{DiscArch, DiscGrads, DiscriminatorNet};
use crate::error::{Error, Result};
use crate::image::{crop, uncrop, ImageBuf, DEFAULT_GAMMA};
use crate::io::load_dir;
use crate::kv::{fmt_f64, KvReader, KvWriter};
use crate::pipeline::{
    param_names, pipeline_bwd, pipeline_fwd, save_params, PipelineParams, Stage, PARAM_COUNT,
};
use crate::rng::CounterRng;

pub const CONFIG_FORMAT_VERSION: i64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    /// Checkpoints and the metrics log go here when set.
    pub out_dir: Option<PathBuf>,
    pub crop: usize,
    pub edge_crop: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub instance_noise_start: f64,
    pub instance_noise_end: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub gamma: f64,
    pub disc_channels: [usize; 3],
    /// Indexed like [`Stage::ALL`].
    pub freeze: [bool; 4],
    /// Moving-average window for the plateau stop; 0 disables it.
    pub plateau_window: usize,
    pub plateau_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source_dir: None,
            target_dir: None,
            out_dir: None,
            crop: 256,
            edge_crop: 16,
            batch: 4,
            steps: 10_000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            instance_noise_start: 0.1,
            instance_noise_end: 0.0,
            seed: 0,
            checkpoint_every: 1000,
            gamma: DEFAULT_GAMMA,
            disc_channels: [64, 128, 256],
            freeze: [false; 4],
            plateau_window: 0,
            plateau_tol: 0.01,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    pub fn disc_arch(&self) -> DiscArch {
        DiscArch::patchgan(&self.disc_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let rf = self.disc_arch().receptive_field();
        let inner = self.crop.checked_sub(2 * self.edge_crop).unwrap_or(0);
        if inner < rf {
            return Err(cfg_err(format!(
                "crop {} minus 2 x edge_crop {} leaves {inner} px, below the discriminator receptive field {rf}",
                self.crop, self.edge_crop
            )));
        }
        if self.batch == 0 {
            return Err(cfg_err("batch must be at least 1"));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(cfg_err(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(cfg_err(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.instance_noise_start < 0.0 || self.instance_noise_end < 0.0 {
            return Err(cfg_err("instance noise must be non-negative"));
        }
        if self.disc_channels.contains(&0) {
            return Err(cfg_err("discriminator widths must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(cfg_err("gamma must be positive"));
        }
        Ok(())
    }

    /// Instance-noise standard deviation at `step`, linear from start to end.
    pub fn instance_noise_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.instance_noise_start;
        }
        let f = step as f64 / (self.steps - 1) as f64;
        self.instance_noise_start + (self.instance_noise_end - self.instance_noise_start) * f
    }

    pub fn is_frozen(&self, stage: Stage) -> bool {
        self.freeze[Stage::ALL.iter().position(|&s| s == stage).unwrap()]
    }

    pub fn to_kv(&self) -> KvWriter {
        let mut w = KvWriter::new();
        w.raw("format_version", CONFIG_FORMAT_VERSION);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        for (k, v) in [
            ("source_dir", path(&self.source_dir)),
            ("target_dir", path(&self.target_dir)),
            ("out_dir", path(&self.out_dir)),
        ] {
            if let Some(v) = v {
                w.raw(k, v);
            }
        }
        w.raw("crop", self.crop)
            .raw("edge_crop", self.edge_crop)
            .raw("batch", self.batch)
            .raw("steps", self.steps)
            .f64("lr_g", self.lr_g)
            .f64("lr_d", self.lr_d)
            .f64("adam_beta1", self.adam_beta1)
            .f64("adam_beta2", self.adam_beta2)
            .f64("adam_eps", self.adam_eps)
            .f64("instance_noise_start", self.instance_noise_start)
            .f64("instance_noise_end", self.instance_noise_end)
            .raw("seed", self.seed)
            .raw("checkpoint_every", self.checkpoint_every)
            .f64("gamma", self.gamma)
            .raw(
                "disc_channels",
                format!("{} {} {}", self.disc_channels[0], self.disc_channels[1], self.disc_channels[2]),
            );
        let frozen: Vec<&str> = Stage::ALL
            .iter()
            .filter(|&&s| self.is_frozen(s))
            .map(|s| s.name())
            .collect();
        w.raw("freeze", frozen.join(" "));
        w.raw("plateau_window", self.plateau_window)
            .f64("plateau_tol", self.plateau_tol);
        w
    }

    /// Reads a config document. Every key except `format_version` is
    /// optional and falls back to [`TrainConfig::default`].
    pub fn from_kv(mut r: KvReader) -> Result<Self> {
        let found: i64 = r.take("format_version")?;
        if found != CONFIG_FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                found,
                expected: CONFIG_FORMAT_VERSION,
            });
        }
        let mut c = Self::default();
        c.source_dir = r.take_opt_str("source_dir").map(PathBuf::from);
        c.target_dir = r.take_opt_str("target_dir").map(PathBuf::from);
        c.out_dir = r.take_opt_str("out_dir").map(PathBuf::from);
        macro_rules! opt {
            ($($field:ident),*) => {
                $(if let Some(v) = r.take_opt(stringify!($field))? { c.$field = v; })*
            };
        }
        opt!(
            crop, edge_crop, batch, steps, lr_g, lr_d, adam_beta1, adam_beta2, adam_eps,
            instance_noise_start, instance_noise_end, seed, checkpoint_every, gamma,
            plateau_window, plateau_tol
        );
        if let Some(s) = r.take_opt_str("disc_channels") {
            let v: Vec<usize> = s
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e: std::num::ParseIntError| Error::InvalidValue {
                    key: "disc_channels".into(),
                    msg: e.to_string(),
                })?;
            c.disc_channels = v.try_into().map_err(|_| Error::InvalidValue {
                key: "disc_channels".into(),
                msg: "expected three widths".into(),
            })?;
        }
        if let Some(s) = r.take_opt_str("freeze") {
            c.freeze = parse_freeze(&s)?;
        }
        r.finish()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(KvReader::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_kv().save(path)
    }
}

/// Parses a space- or comma-separated list of stage names.
pub fn parse_freeze(s: &str) -> Result<[bool; 4]> {
    let mut out = [false; 4];
    for name in s.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        let i = Stage::ALL
            .iter()
            .position(|st| st.name() == name)
            .ok_or_else(|| Error::InvalidValue {
                key: "freeze".into(),
                msg: format!("unknown stage `{name}`"),
            })?;
        out[i] = true;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment accumulators, one slot per parameter scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected ADAM update of `params` in place. Nothing is modified
/// when a gradient is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::LengthMismatch(params.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NanGradient(format!("index {i}")));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Uniformly random image and top-left offset; returns the `size`x`size`
/// crop.
pub fn sample_crop(dataset: &[ImageBuf], rng: &CounterRng, size: usize) -> Result<ImageBuf> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("crop sampling".into()));
    }
    let idx = rng.below_at(0, dataset.len() as u64) as usize;
    let img = &dataset[idx];
    if img.width() < size || img.height() < size {
        return Err(Error::ImageTooSmall {
            index: idx,
            width: img.width(),
            height: img.height(),
            crop: size,
        });
    }
    let x0 = rng.below_at(1, (img.width() - size + 1) as u64) as usize;
    let y0 = rng.below_at(2, (img.height() - size + 1) as u64) as usize;
    crop(img, x0, y0, size, size)
}

/// Relativistic least-squares losses with their logit gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RaLsLoss {
    pub loss_d: f64,
    pub loss_g: f64,
    /// d loss_d / d real, d loss_d / d fake.
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
    /// d loss_g / d real, d loss_g / d fake.
    pub g_real: Vec<f64>,
    pub g_fake: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `mean((x - mean(y) - 1)^2) + mean((y - mean(x) + 1)^2)` and its
/// gradients with respect to `x` and `y`.
fn relativistic_ls(x: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (xm, ym) = (mean(x), mean(y));
    let p: Vec<f64> = x.iter().map(|v| v - ym - 1.0).collect();
    let q: Vec<f64> = y.iter().map(|v| v - xm + 1.0).collect();
    let loss = mean(&p.iter().map(|v| v * v).collect::<Vec<_>>())
        + mean(&q.iter().map(|v| v * v).collect::<Vec<_>>());
    let (pm, qm) = (mean(&p), mean(&q));
    let gx = p.iter().map(|v| 2.0 * (v - qm) / x.len() as f64).collect();
    let gy = q.iter().map(|v| 2.0 * (v - pm) / y.len() as f64).collect();
    (loss, gx, gy)
}

/// Losses and gradients over all patches of a batch.
pub fn ralsgan(real: &[f64], fake: &[f64]) -> Result<RaLsLoss> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyDataset("logits".into()));
    }
    let (loss_d, d_real, d_fake) = relativistic_ls(real, fake);
    let (loss_g, g_fake, g_real) = relativistic_ls(fake, real);
    Ok(RaLsLoss {
        loss_d,
        loss_g,
        d_real,
        d_fake,
        g_real,
        g_fake,
    })
}

/// `(loss_d, loss_g)` for two sets of patch logit maps.
pub fn ralsgan_losses(real_logits: &[ImageBuf], fake_logits: &[ImageBuf]) -> Result<(f64, f64)> {
    let flat = |v: &[ImageBuf]| v.iter().flat_map(|m| m.data().iter().copied()).collect::<Vec<_>>();
    let l = ralsgan(&flat(real_logits), &flat(fake_logits))?;
    Ok((l.loss_d, l.loss_g))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub noise_sigma: f64,
}

impl StepMetrics {
    pub fn line(&self) -> String {
        format!("{} {} {} {}", self.step, fmt_f64(self.loss_d), fmt_f64(self.loss_g), fmt_f64(self.noise_sigma))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Parse {
            line: 0,
            msg: format!("bad metrics line `{line}`"),
        };
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 4 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: t[0].parse().map_err(|_| bad())?,
            loss_d: f(t[1])?,
            loss_g: f(t[2])?,
            noise_sigma: f(t[3])?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PipelineParams,
    pub disc: DiscriminatorNet,
    pub metrics: Vec<StepMetrics>,
    pub stopped_early: bool,
}

/// Loads both datasets named in `config` and trains.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let src = config
        .source_dir
        .as_ref()
        .ok_or_else(|| cfg_err("source_dir is required"))?;
    let tgt = config
        .target_dir
        .as_ref()
        .ok_or_else(|| cfg_err("target_dir is required"))?;
    let source = load_dir(src)?;
    let target = load_dir(tgt)?;
    train_on(config, &source, &target, PipelineParams { gamma: config.gamma, ..Default::default() })
}

struct Outputs {
    dir: PathBuf,
    metrics: File,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.txt");
        let metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn log(&mut self, m: &StepMetrics) -> Result<()> {
        let path = self.dir.join("metrics.txt");
        writeln!(self.metrics, "{}", m.line()).map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, tag: &str, params: &PipelineParams, disc: &DiscriminatorNet) -> Result<()> {
        save_params(params, self.dir.join(format!("params_{tag}.txt")))?;
        disc.save(self.dir.join(format!("disc_{tag}.txt")))
    }
}

fn check_dataset(name: &str, set: &[ImageBuf], size: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptyDataset(name.into()));
    }
    for (index, img) in set.iter().enumerate() {
        img.ensure_channels(3)?;
        if img.width() < size || img.height() < size {
            return Err(Error::ImageTooSmall {
                index,
                width: img.width(),
                height: img.height(),
                crop: size,
            });
        }
    }
    Ok(())
}

// Stream tags for the per-step random draws.
const TAG_SRC: u64 = 1;
const TAG_TGT: u64 = 2;
const TAG_SENSOR: u64 = 3;
const TAG_D_REAL: u64 = 4;
const TAG_D_FAKE: u64 = 5;
const TAG_G_REAL: u64 = 6;
const TAG_G_FAKE: u64 = 7;

fn flatten_logits(maps: &[ImageBuf]) -> Vec<f64> {
    maps.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// Splits a flat gradient back into per-map images shaped like `maps`.
fn split_like(flat: &[f64], maps: &[ImageBuf]) -> Vec<ImageBuf> {
    let mut off = 0;
    maps.iter()
        .map(|m| {
            let mut g = m.zeros_like();
            let n = g.data().len();
            g.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            g
        })
        .collect()
}

/// Trains from `init` on in-memory datasets. The final parameters are
/// written to `out_dir` (when set) as `params_final.txt`.
pub fn train_on(
    config: &TrainConfig,
    source: &[ImageBuf],
    target: &[ImageBuf],
    init: PipelineParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset("source", source, config.crop)?;
    check_dataset("target", target, config.crop)?;
    let mut out = config.out_dir.as_deref().map(Outputs::open).transpose()?;

    let mut params = init;
    let mut disc = DiscriminatorNet::new(&config.disc_arch(), config.seed);
    let mut g_adam = AdamState::new(PARAM_COUNT);
    let mut d_adam: Vec<(AdamState, AdamState)> = disc
        .layers
        .iter()
        .map(|l| (AdamState::new(l.weights.len()), AdamState::new(l.bias.len())))
        .collect();
    let g_cfg = AdamConfig {
        lr: config.lr_g,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
    };
    let d_cfg = AdamConfig { lr: config.lr_d, ..g_cfg };
    let trainable: Vec<usize> = Stage::ALL
        .iter()
        .filter(|&&s| !config.is_frozen(s))
        .flat_map(|s| s.range())
        .collect();

    let root = CounterRng::new(config.seed, 0x7EA1);
    let (c, e) = (config.crop, config.edge_crop);
    let inner = c - 2 * e;
    let mut metrics = Vec::with_capacity(config.steps);
    let mut stopped_early = false;

    for step in 0..config.steps {
        let noise_sigma = config.instance_noise_at(step);
        disc.instance_noise_sigma = noise_sigma;
        disc.spectral_step();
        let rng = root.substream(&[step as u64]);
        let batch: Vec<usize> = (0..config.batch).collect();

        let fakes: Vec<_> = batch
            .par_iter()
            .map(|&b| -> Result<_> {
                let src = sample_crop(source, &rng.substream(&[TAG_SRC, b as u64]), c)?;
                let (y, tape) = pipeline_fwd(&src, &params, Some(&rng.substream(&[TAG_SENSOR, b as u64])))?;
                Ok((crop(&y, e, e, inner, inner)?, tape))
            })
            .collect::<Result<_>>()?;
        let reals: Vec<ImageBuf> = batch
            .par_iter()
            .map(|&b| {
                let t = sample_crop(target, &rng.substream(&[TAG_TGT, b as u64]), c)?;
                crop(&t, e, e, inner, inner)
            })
            .collect::<Result<_>>()?;

        // Discriminator update.
        let run_disc = |imgs: Vec<&ImageBuf>, tag: u64, net: &DiscriminatorNet| -> Result<Vec<_>> {
            imgs.par_iter()
                .enumerate()
                .map(|(b, img)| net.forward(img, Some(&rng.substream(&[tag, b as u64]))))
                .collect()
        };
        let (real_maps, real_tapes): (Vec<_>, Vec<_>) =
            run_disc(reals.iter().collect(), TAG_D_REAL, &disc)?.into_iter().unzip();
        let (fake_maps, fake_tapes): (Vec<_>, Vec<_>) =
            run_disc(fakes.iter().map(|f| &f.0).collect(), TAG_D_FAKE, &disc)?.into_iter().unzip();
        let l = ralsgan(&flatten_logits(&real_maps), &flatten_logits(&fake_maps))?;
        let loss_d = l.loss_d;
        let grads_in: Vec<(ImageBuf, _)> = split_like(&l.d_real, &real_maps)
            .into_iter()
            .zip(real_tapes)
            .chain(split_like(&l.d_fake, &fake_maps).into_iter().zip(fake_tapes))
            .collect();
        let per_image: Vec<DiscGrads> = grads_in
            .into_par_iter()
            .map(|(g, tape)| disc.backward(&g, tape, true).0.expect("parameter gradients requested"))
            .collect();
        let mut d_grads = DiscGrads::zeros_like(&disc);
        for g in &per_image {
            d_grads.add_assign(g);
        }

        if !loss_d.is_finite() || !d_grads.all_finite() {
            return halt(step, &params, &disc, out.as_ref());
        }
        for ((layer, grads), (sw, sb)) in disc
            .layers
            .iter_mut()
            .zip(d_grads.weights.iter().zip(&d_grads.bias))
            .zip(&mut d_adam)
        {
            adam_step(&mut layer.weights, grads.0, sw, &d_cfg)?;
            adam_step(&mut layer.bias, grads.1, sb, &d_cfg)?;
        }

        // Pipeline update against the refreshed discriminator.
        let (real_maps, _): (Vec<_>, Vec<_>) =
            run_disc(reals.iter().collect(), TAG_G_REAL, &disc)?.into_iter().unzip();
        let (fake_maps, fake_tapes): (Vec<_>, Vec<_>) =
            run_disc(fakes.iter().map(|f| &f.0).collect(), TAG_G_FAKE, &disc)?.into_iter().unzip();
        let l = ralsgan(&flatten_logits(&real_maps), &flatten_logits(&fake_maps))?;
        let loss_g = l.loss_g;
        let pipe_tapes: Vec<_> = fakes.into_iter().map(|f| f.1).collect();
        let per_image: Vec<[f64; PARAM_COUNT]> = split_like(&l.g_fake, &fake_maps)
            .into_iter()
            .zip(fake_tapes)
            .zip(pipe_tapes)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|((g, dtape), ptape)| -> Result<_> {
                let (_, gi) = disc.backward(&g, dtape, false);
                let gi = uncrop(&gi, e, e, c, c)?;
                Ok(pipeline_bwd(&gi, ptape)?.to_flat())
            })
            .collect::<Result<_>>()?;
        let mut g_flat = [0.0; PARAM_COUNT];
        for g in &per_image {
            g_flat.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if !loss_g.is_finite() || g_flat.iter().any(|v| !v.is_finite()) {
            return halt(step, &params, &disc, out.as_ref());
        }
        let mut flat = params.to_flat();
        let mut sub_p: Vec<f64> = trainable.iter().map(|&i| flat[i]).collect();
        let sub_g: Vec<f64> = trainable.iter().map(|&i| g_flat[i]).collect();
        let mut sub_state = AdamState {
            m: trainable.iter().map(|&i| g_adam.m[i]).collect(),
            v: trainable.iter().map(|&i| g_adam.v[i]).collect(),
            t: g_adam.t,
        };
        adam_step(&mut sub_p, &sub_g, &mut sub_state, &g_cfg)?;
        for (k, &i) in trainable.iter().enumerate() {
            flat[i] = sub_p[k];
            g_adam.m[i] = sub_state.m[k];
            g_adam.v[i] = sub_state.v[k];
        }
        g_adam.t = sub_state.t;
        params.set_flat(&flat);

        let m = StepMetrics {
            step,
            loss_d,
            loss_g,
            noise_sigma,
        };
        if let Some(o) = out.as_mut() {
            o.log(&m)?;
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                o.checkpoint(&format!("{:06}", step + 1), &params, &disc)?;
            }
        }
        metrics.push(m);
        if plateaued(&metrics, config.plateau_window, config.plateau_tol) {
            stopped_early = true;
            break;
        }
    }
    if let Some(o) = out.as_ref() {
        o.checkpoint("final", &params, &disc)?;
    }
    Ok(TrainOutcome {
        params,
        disc,
        metrics,
        stopped_early,
    })
}

fn halt(
    step: usize,
    params: &PipelineParams,
    disc: &DiscriminatorNet,
    out: Option<&Outputs>,
) -> Result<TrainOutcome> {
    if let Some(o) = out {
        o.checkpoint("last_good", params, disc)?;
    }
    Err(Error::NanHalt { step })
}

/// True when the mean of `loss_d + loss_g` over the last `window` steps
/// differs from the window before it by less than `tol` (relative).
fn plateaued(metrics: &[StepMetrics], window: usize, tol: f64) -> bool {
    if window == 0 || metrics.len() < 2 * window {
        return false;
    }
    let n = metrics.len();
    let avg = |s: &[StepMetrics]| s.iter().map(|m| m.loss_d + m.loss_g).sum::<f64>() / s.len() as f64;
    let (prev, cur) = (avg(&metrics[n - 2 * window..n - window]), avg(&metrics[n - window..]));
    (cur - prev).abs() <= tol * prev.abs().max(1e-12)
}

/// Name of the first pipeline scalar whose value differs between two
/// parameter sets, used in diagnostics.
pub fn first_changed(a: &PipelineParams, b: &PipelineParams) -> Option<&'static str> {
    let (fa, fb) = (a.to_flat(), b.to_flat());
    (0..PARAM_COUNT)
        .find(|&i| fa[i].to_bits() != fb[i].to_bits())
        .map(|i| param_names()[i].as_str())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ColorSpace;
    use crate::testutil::*;

    fn adam(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        for g in [3.0, -0.002, 1e4] {
            let mut p = [1.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, &adam(0.01)).unwrap();
            let step = p[0] - 1.0;
            assert!((step + 0.01 * g.signum()).abs() <= 0.01 * 1e-5, "{step}");
        }
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut p = [0.3, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &adam(0.1)).unwrap();
        assert_eq!(p, [0.3, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut x = [1.0];
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut s, &adam(0.1)).unwrap();
        }
        assert!(x[0].abs() < 0.1, "{}", x[0]);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = [1.0, 2.0];
        let mut s = AdamState::new(2);
        let r = adam_step(&mut p, &[0.1, f64::NAN], &mut s, &adam(0.1));
        assert!(matches!(r, Err(Error::NanGradient(_))));
        assert_eq!(p, [1.0, 2.0]);
        assert!(matches!(
            adam_step(&mut p, &[0.1], &mut s, &adam(0.1)),
            Err(Error::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn ralsgan_hand_values() {
        let l = ralsgan(&[1.0; 6], &[-1.0; 6]).unwrap();
        // (1 - (-1) - 1)^2 + (-1 - 1 + 1)^2
        assert_eq!(l.loss_d, 2.0);
        // (-1 - 1 - 1)^2 + (1 + 1 + 1)^2
        assert_eq!(l.loss_g, 18.0);
        for c in [-3.0, 0.0, 0.7] {
            let l = ralsgan(&[c; 5], &[c; 3]).unwrap();
            assert!((l.loss_d - 2.0).abs() < 1e-12 && (l.loss_g - 2.0).abs() < 1e-12);
        }
        assert!(ralsgan(&[], &[1.0]).is_err());
    }

    #[test]
    fn ralsgan_gradients_match_finite_differences() {
        let rng = CounterRng::new(3, 3);
        let real: Vec<f64> = (0..7).map(|i| rng.normal_at(i)).collect();
        let fake: Vec<f64> = (0..5).map(|i| rng.normal_at(100 + i)).collect();
        let l = ralsgan(&real, &fake).unwrap();
        let h = 1e-5;
        for j in 0..fake.len() {
            let eval = |v: f64, which: fn(&RaLsLoss) -> f64| {
                let mut f = fake.clone();
                f[j] = v;
                which(&ralsgan(&real, &f).unwrap())
            };
            let fd_g = central_diff(|v| eval(v, |l| l.loss_g), fake[j], h);
            let fd_d = central_diff(|v| eval(v, |l| l.loss_d), fake[j], h);
            assert!(rel_err(l.g_fake[j], fd_g) < 1e-6);
            assert!(rel_err(l.d_fake[j], fd_d) < 1e-6);
        }
        for i in 0..real.len() {
            let eval = |v: f64, which: fn(&RaLsLoss) -> f64| {
                let mut r = real.clone();
                r[i] = v;
                which(&ralsgan(&r, &fake).unwrap())
            };
            assert!(rel_err(l.d_real[i], central_diff(|v| eval(v, |l| l.loss_d), real[i], h)) < 1e-6);
            assert!(rel_err(l.g_real[i], central_diff(|v| eval(v, |l| l.loss_g), real[i], h)) < 1e-6);
        }
    }

    #[test]
    fn ralsgan_over_maps() {
        let r = ImageBuf::filled(2, 2, 1, 1.0, ColorSpace::Linear);
        let f = ImageBuf::filled(3, 1, 1, -1.0, ColorSpace::Linear);
        assert_eq!(ralsgan_losses(&[r.clone(), r], &[f]).unwrap(), (2.0, 18.0));
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = random_image(40, 40, 0.0, 1.0, 1);
        let c = sample_crop(std::slice::from_ref(&img), &CounterRng::new(0, 0), 40).unwrap();
        assert_eq!(c, img);
        let c2 = sample_crop(&[img.clone()], &CounterRng::new(5, 1), 16).unwrap();
        assert_eq!(c2, sample_crop(&[img.clone()], &CounterRng::new(5, 1), 16).unwrap());
        assert!(matches!(
            sample_crop(&[img], &CounterRng::new(0, 0), 41),
            Err(Error::ImageTooSmall { .. })
        ));
        assert!(matches!(sample_crop(&[], &CounterRng::new(0, 0), 4), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // Offsets on a 512 image with a 256 crop range over 257 values per
        // axis; bin them 16 x 16 and apply a chi-square test.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let img = ImageBuf::from_fn(512, 512, 1, ColorSpace::Linear, |_, x, y| (y * 512 + x) as f64);
        let n = 100_000;
        let bins = 16usize;
        let mut counts = vec![0usize; bins * bins];
        let root = CounterRng::new(11, 0);
        for i in 0..n {
            let c = sample_crop(std::slice::from_ref(&img), &root.substream(&[i as u64]), 256).unwrap();
            let v = c.data()[0] as usize;
            let (x0, y0) = (v % 512, v / 512);
            assert!(x0 <= 256 && y0 <= 256);
            counts[(y0 * bins / 257) * bins + x0 * bins / 257] += 1;
        }
        // Bin widths differ by at most one offset; use exact expectations.
        let width = |b: usize| (0..=256).filter(|&o| o * bins / 257 == b).count() as f64;
        let mut chi2 = 0.0;
        for by in 0..bins {
            for bx in 0..bins {
                let e = n as f64 * width(bx) * width(by) / (257.0 * 257.0);
                let o = counts[by * bins + bx] as f64;
                chi2 += (o - e).powi(2) / e;
            }
        }
        let p = 1.0 - ChiSquared::new((bins * bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    #[test]
    fn config_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = TrainConfig {
            source_dir: Some("a/b".into()),
            steps: 17,
            lr_g: 3e-4,
            freeze: [true, false, true, false],
            disc_channels: [8, 16, 32],
            ..Default::default()
        };
        c.validate().unwrap();
        let p = dir.path().join("cfg.txt");
        c.save(&p).unwrap();
        assert_eq!(TrainConfig::load(&p).unwrap(), c);
        let partial = KvReader::parse("format_version = 1\nsteps = 5\nfreeze = lens, noise").unwrap();
        let pc = TrainConfig::from_kv(partial).unwrap();
        assert_eq!(pc.steps, 5);
        assert_eq!(pc.freeze, [true, false, false, true]);
        assert_eq!(pc.crop, 256);
        assert!(TrainConfig::from_kv(KvReader::parse("format_version = 1\nbogus = 1").unwrap()).is_err());
        c.crop = 64;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.crop = 78;
        c.validate().unwrap();
        c.adam_beta1 = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn instance_noise_anneals_linearly() {
        let c = TrainConfig {
            steps: 11,
            instance_noise_start: 0.2,
            instance_noise_end: 0.0,
            ..Default::default()
        };
        assert_eq!(c.instance_noise_at(0), 0.2);
        assert!((c.instance_noise_at(5) - 0.1).abs() < 1e-15);
        assert_eq!(c.instance_noise_at(10), 0.0);
    }

    #[test]
    fn metrics_line_round_trip() {
        let m = StepMetrics {
            step: 12,
            loss_d: 1.9,
            loss_g: 2.05,
            noise_sigma: 0.1,
        };
        assert_eq!(StepMetrics::parse(&m.line()).unwrap(), m);
        assert!(StepMetrics::parse("1 2 3").is_err());
    }

    #[test]
    fn plateau_rule() {
        let mk = |v: &[f64]| -> Vec<StepMetrics> {
            v.iter()
                .enumerate()
                .map(|(step, &l)| StepMetrics {
                    step,
                    loss_d: l,
                    loss_g: 0.0,
                    noise_sigma: 0.0,
                })
                .collect()
        };
        assert!(plateaued(&mk(&[2.0, 2.0, 2.001, 2.0]), 2, 0.01));
        assert!(!plateaued(&mk(&[3.0, 3.0, 2.0, 2.0]), 2, 0.01));
        assert!(!plateaued(&mk(&[2.0, 2.0, 2.0]), 2, 0.01));
        assert!(!plateaued(&mk(&[2.0; 10]), 0, 0.01));
    }

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            crop: 80,
            edge_crop: 16,
            batch: 2,
            steps,
            disc_channels: [4, 4, 4],
            checkpoint_every: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let imgs = vec![random_image(80, 80, 0.0, 1.0, 1)];
        let init = PipelineParams::default();
        let out = train_on(&tiny_config(0), &imgs, &imgs, init.clone()).unwrap();
        assert_eq!(first_changed(&out.params, &init), None);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn short_run_is_deterministic_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let src = vec![random_image(96, 90, 0.0, 1.0, 1), random_image(80, 80, 0.0, 1.0, 2)];
        let tgt = vec![random_image(100, 100, 0.1, 0.9, 3)];
        let mut cfg = tiny_config(3);
        cfg.out_dir = Some(dir.path().to_path_buf());
        cfg.freeze = [false, false, false, true];
        let a = train_on(&cfg, &src, &tgt, PipelineParams::default()).unwrap();
        cfg.out_dir = None;
        let b = train_on(&cfg, &src, &tgt, PipelineParams::default()).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.disc, b.disc);
        assert!(first_changed(&a.params, &PipelineParams::default()).is_some());
        assert_eq!(a.params.noise, PipelineParams::default().noise);
        let log = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
        let lines: Vec<_> = log.lines().map(|l| StepMetrics::parse(l).unwrap()).collect();
        assert_eq!(lines, a.metrics);
        for f in ["params_000002.txt", "disc_000002.txt", "params_final.txt", "disc_final.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn rejects_bad_datasets() {
        let small = vec![random_image(60, 60, 0.0, 1.0, 1)];
        let ok = vec![random_image(80, 80, 0.0, 1.0, 1)];
        let init = PipelineParams::default;
        assert!(matches!(train_on(&tiny_config(1), &small, &ok, init()), Err(Error::ImageTooSmall { .. })));
        assert!(matches!(train_on(&tiny_config(1), &ok, &[], init()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn nan_halts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![random_image(80, 80, 0.0, 1.0, 1)];
        let mut cfg = tiny_config(2);
        cfg.out_dir = Some(dir.path().to_path_buf());
        let mut init = PipelineParams::default();
        init.color.t[0] = f64::NAN;
        let r = train_on(&cfg, &imgs, &imgs, init);
        assert!(matches!(r, Err(Error::NanHalt { step: 0 })), "{r:?}");
        assert!(dir.path().join("params_last_good.txt").exists());
    }
}
