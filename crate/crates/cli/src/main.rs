//! `gas`: train, apply, benchmark and check the post-processing pipeline.
//!
//! Exit codes: 0 success, 1 usage or i/o error, 2 numerical failure (a
//! training run halted on a non-finite loss, or a failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use gas_core::eval::{random_gradcheck_image, GRADCHECK_THRESHOLD};
use gas_core::train::parse_freeze;
use gas_core::{
    bench, compile, eval_run, gradcheck, load_params, load_png, save_params, save_png, train,
    CounterRng, Error, PipelineParams, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "gas", version, about = "Learned camera post-processing: train, apply, bench, check")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train pipeline parameters against an unpaired target image set
    Train(TrainArgs),
    /// Run trained parameters through the fused runtime on one image
    Apply(ApplyArgs),
    /// Time the fused runtime against the reference pipeline
    Bench(BenchArgs),
    /// Compare analytic pipeline gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Histogram distances of source and enhanced source to a target set
    Eval(EvalArgs),
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Directory of source (rendered) PNGs
    #[arg(long, value_name = "DIR")]
    source: PathBuf,
    /// Directory of target (photo) PNGs
    #[arg(long, value_name = "DIR")]
    target: PathBuf,
    /// Final parameter file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Directory for checkpoints and metrics.txt [default: directory of --out]
    #[arg(long, value_name = "DIR")]
    work_dir: Option<PathBuf>,
    /// Key-value training config; flags given on the command line override it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Optimization steps
    #[arg(long, default_value_t = 10000)]
    steps: usize,
    /// Crops per step
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Square crop side fed to the pipeline
    #[arg(long, default_value_t = 256)]
    crop: usize,
    /// Border removed from each crop side before the discriminator
    #[arg(long, default_value_t = 16)]
    edge_crop: usize,
    /// Pipeline (generator) learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr_g: f64,
    /// Discriminator learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr_d: f64,
    /// Instance-noise sigma at step 0, annealed linearly to 0
    #[arg(long, default_value_t = 0.1)]
    instance_noise: f64,
    /// Stages to hold fixed, comma separated (lens, color, bloom, noise)
    #[arg(long, default_value = "")]
    freeze: String,
    /// Steps between parameter and discriminator checkpoints
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: usize,
    /// Moving-average window of the plateau stop; 0 disables it
    #[arg(long, default_value_t = 0)]
    plateau_window: usize,
    /// Seed for crop sampling, noise and discriminator init
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct ApplyArgs {
    /// Trained parameter file
    #[arg(long, value_name = "FILE")]
    params: PathBuf,
    /// Input PNG
    #[arg(long, value_name = "IMG")]
    input: PathBuf,
    /// Output PNG
    #[arg(long, value_name = "IMG")]
    output: PathBuf,
    /// Frame index selecting the noise draws
    #[arg(long, default_value_t = 0)]
    frame: u64,
    /// Noise seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable sensor noise
    #[arg(long)]
    no_noise: bool,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    /// Parameter file [default: initial parameters]
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Frame width
    #[arg(long, default_value_t = 1920)]
    width: usize,
    /// Frame height
    #[arg(long, default_value_t = 1080)]
    height: usize,
    /// Timed frames per path (at least 10)
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Seed for the test frame and noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    /// Parameter file [default: initial parameters]
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Side of the random test image
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Initial finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Seed for the test image, loss weights and noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    /// Parameter file [default: initial parameters]
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Directory of source PNGs
    #[arg(long, value_name = "DIR")]
    source: PathBuf,
    /// Directory of target PNGs
    #[arg(long, value_name = "DIR")]
    target: PathBuf,
    /// Disable sensor noise
    #[arg(long)]
    no_noise: bool,
    /// Noise seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = init_threads().and_then(|_| {
        let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
        run(cli.cmd, sub)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.downcast_ref::<NumericalFailure>().is_some()
                || matches!(e.downcast_ref::<Error>(), Some(Error::NanHalt { .. }));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("GAS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("GAS_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Cmd, m: &ArgMatches) -> anyhow::Result<()> {
    match cmd {
        Cmd::Train(a) => cmd_train(a, m),
        Cmd::Apply(a) => cmd_apply(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Eval(a) => cmd_eval(a),
    }
}

fn params_or_init(path: Option<&Path>) -> anyhow::Result<PipelineParams> {
    match path {
        Some(p) => load_params(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(PipelineParams::default()),
    }
}

fn train_config(a: &TrainArgs, m: &ArgMatches) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    // Without a config file every flag applies; with one, only the flags
    // actually typed override it.
    let given = |id: &str| a.config.is_none() || m.value_source(id) == Some(ValueSource::CommandLine);
    if given("steps") {
        cfg.steps = a.steps;
    }
    if given("batch") {
        cfg.batch = a.batch;
    }
    if given("crop") {
        cfg.crop = a.crop;
    }
    if given("edge_crop") {
        cfg.edge_crop = a.edge_crop;
    }
    if given("lr_g") {
        cfg.lr_g = a.lr_g;
    }
    if given("lr_d") {
        cfg.lr_d = a.lr_d;
    }
    if given("instance_noise") {
        cfg.instance_noise_start = a.instance_noise;
    }
    if given("freeze") {
        cfg.freeze = parse_freeze(&a.freeze)?;
    }
    if given("checkpoint_every") {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    if given("plateau_window") {
        cfg.plateau_window = a.plateau_window;
    }
    if given("seed") {
        cfg.seed = a.seed;
    }
    cfg.source_dir = Some(a.source.clone());
    cfg.target_dir = Some(a.target.clone());
    let work = match &a.work_dir {
        Some(d) => d.clone(),
        None => a.out.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    cfg.out_dir = Some(if work.as_os_str().is_empty() { PathBuf::from(".") } else { work });
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = train_config(&a, m)?;
    let out = train(&cfg)?;
    save_params(&out.params, &a.out)?;
    if let Some(last) = out.metrics.last() {
        println!("final {}", last.line());
    }
    if out.stopped_early {
        println!("stopped early: loss plateau after {} steps", out.metrics.len());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_apply(a: ApplyArgs) -> anyhow::Result<()> {
    let mut p = load_params(&a.params).with_context(|| format!("loading {}", a.params.display()))?;
    if a.no_noise {
        p.noise = gas_core::stages::NoiseParams::off();
    }
    let img = load_png(&a.input)?;
    let out = compile(&p)?.run_frame(&img, a.frame, a.seed)?;
    save_png(&out, &a.output)?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.width == 0 || a.height == 0 {
        bail!("--width and --height must be positive");
    }
    if a.frames < 10 {
        bail!("--frames must be at least 10");
    }
    let p = params_or_init(a.params.as_deref())?;
    let stats = bench(&p, &compile(&p)?, a.width, a.height, a.frames, a.seed)?;
    println!("{}", gas_core::FrameStats::HEADER);
    println!("{}", stats.row());
    println!("bytes_per_frame {}", stats.bytes_moved);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.size == 0 || a.size > 64 {
        bail!("--size must be in 1..=64");
    }
    if !(a.step > 0.0) {
        bail!("--step must be positive");
    }
    let p = params_or_init(a.params.as_deref())?;
    let img = random_gradcheck_image(a.size, a.seed);
    let report = gradcheck(&p, &img, a.seed, a.step)?;
    print!("{}", report.table());
    let failures = report.failures();
    if failures.is_empty() {
        println!("ok: all {} scalars within {GRADCHECK_THRESHOLD:e}", report.entries.len());
        return Ok(());
    }
    let names: Vec<_> = failures.iter().map(|e| e.name).collect();
    Err(NumericalFailure(format!("gradient check failed for {}", names.join(", "))).into())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let p = params_or_init(a.params.as_deref())?;
    let rng = CounterRng::new(a.seed, 0xE7A1);
    let rng = (!a.no_noise).then_some(&rng);
    let m = eval_run(&p, &a.source, &a.target, rng)?;
    print!("{}", m.table());
    print!("{}", m.kv_lines());
    Ok(())
}
