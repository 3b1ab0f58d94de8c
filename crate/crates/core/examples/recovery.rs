//! Synthetic colour-map recovery run. Settings come from the environment:
//! STEPS, N_IMAGES, CROP, LR_G, LR_D, BATCH, SEED, NOISE, FREEZE (stage
//! list; default all but color), DISC (three widths), INIT (starting
//! parameter file), and OUT (checkpoint directory) with CHECKPOINT_EVERY.

use std::time::Instant;

use gas_core::pipeline::Stage;
use gas_core::train::parse_freeze;
use gas_core::synth::{map_set, recovery_color_map, synthetic_set};
use gas_core::{load_params, train_on, PipelineParams, TrainConfig};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn disc_channels() -> [usize; 3] {
    let v: Vec<usize> = std::env::var("DISC")
        .unwrap_or_else(|_| "16,32,64".into())
        .split(',')
        .map(|t| t.trim().parse().unwrap())
        .collect();
    [v[0], v[1], v[2]]
}

fn main() {
    let n = env("N_IMAGES", 200);
    let seed = env("SEED", 7u64);
    let source = synthetic_set(n, 256, 256, seed);
    let target = map_set(&synthetic_set(n, 256, 256, seed + 1), &recovery_color_map()).unwrap();
    let freeze = match std::env::var("FREEZE") {
        Ok(list) => parse_freeze(&list).unwrap(),
        Err(_) => Stage::ALL.map(|s| s != Stage::Color),
    };
    let cfg = TrainConfig {
        crop: env("CROP", 96),
        edge_crop: 16,
        batch: env("BATCH", 8),
        steps: env("STEPS", 1000),
        lr_g: env("LR_G", 5e-4),
        lr_d: env("LR_D", 1e-3),
        disc_channels: disc_channels(),
        instance_noise_start: env("NOISE", 0.1),
        freeze,
        seed,
        out_dir: std::env::var("OUT").ok().map(Into::into),
        checkpoint_every: env("CHECKPOINT_EVERY", 500),
        ..Default::default()
    };
    let t0 = Instant::now();
    let init = match std::env::var("INIT") {
        Ok(path) => load_params(path).unwrap(),
        Err(_) => PipelineParams::default(),
    };
    let out = train_on(&cfg, &source, &target, init).unwrap();
    let truth = recovery_color_map().to_array();
    let got = out.params.color.to_array();
    let err = got.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    println!("params {got:.4?}");
    println!("max abs err {err:.4}");
    for m in out.metrics.iter().step_by((cfg.steps / 20).max(1)) {
        println!("{}", m.line());
    }
}
