//! `based synth|train|render|eval|ablate`.
//!
//! Every command validates its inputs before writing anything. Output
//! directories carry an `INCOMPLETE` marker until the command succeeds.
//! Exit codes: 0 success, 1 invalid input or I/O failure, 2 numerical abort.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Checkpoint;
use crate::data::{export_renders, load_dataset_with, Dataset, LoadOptions, SyntheticScene, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::eval::{ablation_table, evaluate, evaluation_pose, frame_stem, render_view, run_ablation};
use crate::geometry::SE3Pose;
use crate::training::{read_log, restore, TrainConfig, Trainer, CHECKPOINT_FILE, LOG_FILE};

pub const INCOMPLETE: &str = "INCOMPLETE";

#[derive(Debug, Parser)]
#[command(name = "based", version, about = "Deformable radiance fields with jointly learned camera poses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with oracle poses, depth and correspondences.
    Synth(SynthArgs),
    /// Train poses and fields; writes log.tsv and checkpoint.bin.
    Train(TrainArgs),
    /// Render colour and depth for one camera.
    Render(RenderArgs),
    /// Score rendered views against a dataset.
    Eval(EvalArgs),
    /// Train and evaluate the four correspondence/depth loss combinations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Keep every n-th frame.
    #[arg(long, default_value_t = 1)]
    pub subsample_every: usize,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML training configuration; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` applied after the file, e.g. `loss.w_corr=0`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene description (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint.bin` with its stored configuration
    /// and seed; `--override` still applies.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Render at this frame's evaluation pose and timestamp.
    #[arg(long, conflicts_with = "pose")]
    pub frame: Option<usize>,
    /// Explicit camera-to-world pose: 12 row-major values of `[R | t]`.
    #[arg(long, requires = "time")]
    pub pose: Option<String>,
    /// Timestamp in [0, 1]; defaults to the frame's own.
    #[arg(long)]
    pub time: Option<f64>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Test,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Applied to the configuration stored in the checkpoint, e.g. `eval.median_scaling=true`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalAbort { .. } | Error::NonFiniteGradient(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Invalid("--workers must be at least 1".into()));
        }
        // A global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Render(a) => render(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Creates `dir` and marks it incomplete.
pub fn begin_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let marker = dir.join(INCOMPLETE);
    fs::write(&marker, b"").map_err(io_err(&marker))
}

pub fn finish_output(dir: &Path) -> Result<()> {
    let marker = dir.join(INCOMPLETE);
    fs::remove_file(&marker).map_err(io_err(&marker))
}

fn load(data: &DataArgs) -> Result<Dataset> {
    if data.subsample_every == 0 {
        return Err(Error::Invalid("--subsample-every must be at least 1".into()));
    }
    load_dataset_with(
        &data.dataset,
        &LoadOptions {
            subsample_every: data.subsample_every,
            ..LoadOptions::default()
        },
    )
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let text = match &args.config {
        Some(p) => read(p)?,
        None => String::new(),
    };
    TrainConfig::from_toml(&text, &args.overrides)
}

fn load_run(ds: &Dataset, checkpoint: &Path, overrides: &[String]) -> Result<(TrainConfig, u64, crate::training::TrainState)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, seed, state) = restore(ds, &ckpt)?;
    let cfg = if overrides.is_empty() {
        cfg
    } else {
        TrainConfig::from_toml(&cfg.to_toml(), overrides)?
    };
    Ok((cfg, seed, state))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSceneSpec::from_toml(&read(&a.config)?)?;
    let scene = SyntheticScene::build(&spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    begin_output(&a.out)?;
    let s = scene.save(&a.out)?;
    finish_output(&a.out)?;
    if s.static_scene {
        eprintln!("warning: static scene (deformation amplitude is zero)");
    }
    println!(
        "frames={} correspondences={} miss_fraction={:.4} max_rotation_deg={:.3} max_translation={:.4}",
        s.frames, s.correspondences, s.miss_fraction, s.max_rotation_deg, s.max_translation
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let mut trainer = if a.resume {
        let path = a.out.join(CHECKPOINT_FILE);
        let ckpt = Checkpoint::load(&path)?;
        let log_path = a.out.join(LOG_FILE);
        let log = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
        Trainer::from_checkpoint_with(&ds, &ckpt, log, &a.config.overrides)?
    } else {
        Trainer::new(&ds, load_config(&a.config)?, a.config.seed)?
    };
    let start = trainer.state.iteration;
    begin_output(&a.out)?;
    trainer.run(Some(&a.out))?;
    finish_output(&a.out)?;
    match trainer.log.last().filter(|r| r.iteration > start) {
        Some(r) => println!(
            "iterations={} l_pho={} l_corr={} l_depth={} checkpoint={}",
            r.iteration,
            r.l_pho,
            r.l_corr,
            r.l_depth,
            a.out.join(CHECKPOINT_FILE).display()
        ),
        None => println!("nothing to do: checkpoint already at iteration {}", trainer.state.iteration),
    }
    if trainer.counters.empty_batches > 0 || trainer.counters.skipped_records > 0 {
        eprintln!(
            "warning: {} empty loss batches, {} correspondence records without depth",
            trainer.counters.empty_batches, trainer.counters.skipped_records
        );
    }
    Ok(())
}

fn parse_pose(text: &str) -> Result<SE3Pose> {
    let v: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Invalid(format!("--pose: `{s}` is not a number"))))
        .collect::<Result<_>>()?;
    if v.len() != 12 {
        return Err(Error::Invalid(format!("--pose needs 12 values, got {}", v.len())));
    }
    // Rows of `[R | t]` to rotation-then-translation order.
    let mut flat = [0.0; 12];
    for i in 0..3 {
        flat[3 * i..3 * i + 3].copy_from_slice(&v[4 * i..4 * i + 3]);
        flat[9 + i] = v[4 * i + 3];
    }
    SE3Pose::from_12(&flat)
}

fn render(a: &RenderArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let (cfg, seed, state) = load_run(&ds, &a.checkpoint, &a.overrides)?;
    let (pose, time, stem) = match (&a.pose, a.frame) {
        (Some(p), _) => (parse_pose(p)?, a.time.expect("clap requires --time with --pose"), "view".to_string()),
        (None, Some(f)) => {
            let (pose, _) = evaluation_pose(&ds, &state, &cfg, seed, f)?;
            (pose, a.time.unwrap_or(ds.frames[f].time), frame_stem(f))
        }
        (None, None) => return Err(Error::Invalid("give --frame or --pose".into())),
    };
    if !(0.0..=1.0).contains(&time) {
        return Err(Error::Invalid(format!("--time {time} outside [0, 1]")));
    }
    let view = render_view(&state.fields, &ds.intrinsics, ds.near, ds.far, &pose, time, &cfg)?;
    begin_output(&a.out)?;
    export_renders(&a.out, &stem, &view.color, Some(&view.depth_map()))?;
    finish_output(&a.out)?;
    println!("{}", a.out.join(format!("{stem}.ppm")).display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let (cfg, seed, state) = load_run(&ds, &a.checkpoint, &a.overrides)?;
    let frames: Vec<usize> = match a.split {
        SplitChoice::Test => ds.split.test.clone(),
        SplitChoice::Train => ds.split.train.clone(),
        SplitChoice::All => (0..ds.len()).collect(),
    };
    if frames.is_empty() {
        return Err(Error::Invalid("the chosen split has no frames".into()));
    }
    let evaluation = evaluate(&ds, &state, &cfg, seed, &frames)?;
    begin_output(&a.out)?;
    evaluation.write(&a.out)?;
    finish_output(&a.out)?;
    let text = evaluation.report.to_text();
    if let Some(i) = text.find("[mean]") {
        print!("{}", &text[i..]);
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let cfg = load_config(&a.config)?;
    Trainer::new(&ds, cfg.clone(), a.config.seed)?;
    begin_output(&a.out)?;
    let rows = run_ablation(&ds, &cfg, a.config.seed, Some(&a.out))?;
    finish_output(&a.out)?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
