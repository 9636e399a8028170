//! Command-line front end: presets, config merging, artifact emission and
//! exit codes.
//!
//! Configuration precedence is preset < `--config` JSON < flags. Unknown
//! JSON keys are rejected.

use std::ffi::OsString;
use std::fs;
use std::io::{self, ErrorKind, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{random_unit_vector, DownstreamTask, FeatureNoise, GroupSparseTask};
use crate::diagnostics::{growth_fit_window, theory_report, write_heatmap_csv, TheoryReport};
use crate::error::{CheckpointError, Error, Result};
use crate::grad::{fd_grad, grad_batch, Reduction};
use crate::model::ModelParams;
use crate::rng::{SeedTree, DOWNSTREAM_TEST, DOWNSTREAM_V_STAR, EVAL, GRADCHECK};
use crate::svg;
use crate::train::{
    downstream_rng, finetune_online_sgd, load_checkpoint, load_sidecar, save_checkpoint_with_sidecar,
    train, write_finetune_csv, write_metrics_csv, Checkpoint, FinetuneRow, FinetuneSettings, LossMode,
    MetricsRow, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_FOUND: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

/// Tolerance for `gradcheck` and the zero-block check after antithetic runs.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
pub const ZERO_BLOCK_TOLERANCE: f64 = 1e-10;
/// `alpha` growth is fitted from this iteration on.
pub const GROWTH_WINDOW_START: f64 = 100.0;

#[derive(Debug, Parser)]
#[command(name = "attnlab", version, about = "Train and probe a one-layer softmax-attention classifier on group-sparse data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gradient-descent pretraining from zero initialization.
    Pretrain(PretrainArgs),
    /// Online-SGD fine-tuning of a pretrained checkpoint on a margin task.
    Finetune(FinetuneArgs),
    /// Structural diagnostics of a checkpoint.
    Theory(TheoryArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PretrainPreset {
    /// n = 500, d = 4, D = 6, sigma_x = 0.25, j* = 2, eta = 0.5, 400 iterations.
    Fig1Top,
    /// n = 200, d = 2, D = 4, otherwise as fig1-top.
    Fig1Bottom,
    /// n = 10000, d = D = 100, minibatch 64, eta = 0.01, 100 epochs, j* = 30.
    AppendixLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetunePreset {
    /// 400 steps, eta~ = 1e-3, gamma = 1, sigma~ = 1, 1000 test samples.
    Fig4,
    /// fig4 requiring a (d, D) = (4, 6) checkpoint.
    Fig4A,
    /// fig4 requiring a (d, D) = (2, 4) checkpoint.
    Fig4B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Empirical,
    PopulationMc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Tree,
    Unordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Gaussian,
    Uniform,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, value_enum)]
    pub preset: Option<PretrainPreset>,
    /// JSON file with any subset of the training configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "D")]
    pub groups: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub sigma_x: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long = "jstar")]
    pub j_star: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Pair every sample with its sign-flipped partner.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub antithetic: Option<bool>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Draws per step in population-mc mode.
    #[arg(long)]
    pub mc_pairs: Option<usize>,
    #[arg(long, value_enum)]
    pub reduction: Option<ReductionArg>,
    /// Fresh samples for the end-of-run report.
    #[arg(long, default_value_t = 1000)]
    pub eval_n: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<FinetunePreset>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta_tilde: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub sigma_tilde: Option<f64>,
    #[arg(long)]
    pub test_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long, value_enum)]
    pub noise: Option<NoiseArg>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fresh samples for the mean attention matrix and bound checks.
    #[arg(long, default_value_t = 500)]
    pub eval_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feature scale; defaults to the value recorded next to the checkpoint.
    #[arg(long)]
    pub sigma_x: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long = "D", default_value_t = 4)]
    pub groups: usize,
    /// Parameters are uniform on [-scale, scale].
    #[arg(long, default_value_t = 0.5)]
    pub scale: f64,
    /// Samples per trial.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate the analytic W-gradient before comparing.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

/// Downstream fine-tuning configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub eta_tilde: f64,
    pub gamma: f64,
    pub sigma_tilde: f64,
    pub test_n: usize,
    pub seed: u64,
    pub log_every: usize,
    pub noise: FeatureNoise,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            eta_tilde: 1e-3,
            gamma: 1.0,
            sigma_tilde: 1.0,
            test_n: 1000,
            seed: 0,
            log_every: 1,
            noise: FeatureNoise::Gaussian,
        }
    }
}

pub fn pretrain_preset(preset: PretrainPreset) -> TrainConfig {
    let base = TrainConfig::default();
    match preset {
        PretrainPreset::Fig1Top => base,
        PretrainPreset::Fig1Bottom => TrainConfig { n: 200, d: 2, groups: 4, ..base },
        PretrainPreset::AppendixLarge => {
            let (n, batch, epochs) = (10_000, 64, 100);
            // the last partial batch of each epoch is dropped
            let per_epoch = n / batch;
            TrainConfig {
                n,
                d: 100,
                groups: 100,
                j_star: 30,
                eta: 0.01,
                batch_size: Some(batch),
                iters: epochs * per_epoch,
                log_every: per_epoch,
                ..base
            }
        }
    }
}

/// Expected `(d, D)` of the checkpoint for a fine-tuning preset.
pub fn finetune_preset_shape(preset: FinetunePreset) -> Option<(usize, usize)> {
    match preset {
        FinetunePreset::Fig4 => None,
        FinetunePreset::Fig4A => Some((4, 6)),
        FinetunePreset::Fig4B => Some((2, 4)),
    }
}

/// Overlay the keys of a JSON object file onto `base`.
fn merge_config_file<T: Serialize + for<'de> Deserialize<'de>>(base: &T, path: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = path {
        let text = fs::read_to_string(path)?;
        let overlay: serde_json::Value = serde_json::from_str(&text)?;
        let serde_json::Value::Object(entries) = overlay else {
            return Err(Error::InvalidArgument(format!("{} must hold a JSON object", path.display())));
        };
        let target = value.as_object_mut().expect("configs serialize to objects");
        for (key, v) in entries {
            target.insert(key, v);
        }
    }
    serde_json::from_value(value)
        .map_err(|e| Error::InvalidArgument(format!("bad configuration: {e}")))
}

pub fn resolve_pretrain_config(args: &PretrainArgs) -> Result<TrainConfig> {
    let base = pretrain_preset(args.preset.unwrap_or(PretrainPreset::Fig1Top));
    let mut c = merge_config_file(&base, args.config.as_deref())?;
    macro_rules! set {
        ($($field:ident <- $arg:expr),* $(,)?) => {$(if let Some(v) = $arg { c.$field = v; })*};
    }
    set!(
        d <- args.d,
        groups <- args.groups,
        n <- args.n,
        sigma_x <- args.sigma_x,
        eta <- args.eta,
        iters <- args.iters,
        j_star <- args.j_star,
        seed <- args.seed,
        antithetic <- args.antithetic,
        log_every <- args.log_every,
    );
    if let Some(b) = args.batch_size {
        c.batch_size = Some(b);
    }
    if let Some(p) = args.mc_pairs {
        c.mc_pairs = Some(p);
    }
    if let Some(m) = args.mode {
        c.mode = match m {
            ModeArg::Empirical => LossMode::Empirical,
            ModeArg::PopulationMc => LossMode::PopulationMc,
        };
    }
    if let Some(r) = args.reduction {
        c.reduction = match r {
            ReductionArg::Tree => Reduction::Tree,
            ReductionArg::Unordered => Reduction::Unordered,
        };
    }
    c.validate()?;
    Ok(c)
}

pub fn resolve_finetune_config(args: &FinetuneArgs) -> Result<FinetuneConfig> {
    let mut c = merge_config_file(&FinetuneConfig::default(), args.config.as_deref())?;
    macro_rules! set {
        ($($field:ident <- $arg:expr),* $(,)?) => {$(if let Some(v) = $arg { c.$field = v; })*};
    }
    set!(
        steps <- args.steps,
        eta_tilde <- args.eta_tilde,
        gamma <- args.gamma,
        sigma_tilde <- args.sigma_tilde,
        test_n <- args.test_n,
        seed <- args.seed,
        log_every <- args.log_every,
    );
    if let Some(noise) = args.noise {
        c.noise = match noise {
            NoiseArg::Gaussian => FeatureNoise::Gaussian,
            NoiseArg::Uniform => FeatureNoise::Uniform,
        };
    }
    if c.steps == 0 || c.test_n == 0 || c.log_every == 0 {
        return Err(Error::InvalidArgument("steps, test_n and log_every must be >= 1".into()));
    }
    if !(c.eta_tilde >= 0.0 && c.eta_tilde.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta_tilde must be non-negative, got {}", c.eta_tilde)));
    }
    Ok(c)
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Empty(_) => EXIT_USAGE,
        Error::Checkpoint(CheckpointError::NotFound(_)) => EXIT_NOT_FOUND,
        Error::Io(e) if e.kind() == ErrorKind::NotFound => EXIT_NOT_FOUND,
        Error::Checkpoint(_) | Error::DimensionMismatch(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    let mut stdout = io::stdout().lock();
    let outcome = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a, &mut stdout),
        Command::Finetune(a) => cmd_finetune(a, &mut stdout),
        Command::Theory(a) => cmd_theory(a, &mut stdout),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut stdout),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// `ATTNLAB_THREADS` caps the worker pool.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ATTNLAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("ATTNLAB_THREADS must be a positive integer, got {raw:?}")))?;
    // a pool built earlier in this process (tests) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn create_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn growth_slope(rows: &[MetricsRow]) -> Option<f64> {
    let points: Vec<_> = rows.iter().map(|r| (r.iter as f64, r.alpha)).collect();
    let end = points.last()?.0;
    growth_fit_window(&points, GROWTH_WINDOW_START, end).ok()
}

fn finite_row(row: &MetricsRow) -> bool {
    [
        row.loss,
        row.alpha,
        row.v1_err_norm,
        row.cos_sim,
        row.norm_v1,
        row.norm_v2,
        row.norm_w12,
        row.norm_w21,
        row.mean_attn_jstar,
        row.min_attn_jstar,
        row.beta1,
        row.w11_resid,
    ]
    .iter()
    .chain(row.beta2.iter())
    .chain(row.w22_resid.iter())
    .all(|x| x.is_finite())
}

pub fn cmd_pretrain<W: Write>(args: &PretrainArgs, out: &mut W) -> Result<i32> {
    let config = resolve_pretrain_config(args)?;
    if args.eval_n == 0 {
        return Err(Error::InvalidArgument("eval_n must be >= 1".into()));
    }
    create_out_dir(&args.out)?;
    let outcome = train(&config)?;

    write_metrics_csv(&outcome.metrics, fs::File::create(args.out.join("metrics.csv"))?)?;
    let config_json = serde_json::to_value(&config)?;
    save_checkpoint_with_sidecar(
        &outcome.checkpoint,
        &args.out.join("checkpoint.gsat"),
        Some(outcome.task.v_star()),
        config_json,
    )?;
    let eval = outcome.task.sample_many(args.eval_n, &mut SeedTree::new(config.seed).stream(EVAL));
    let (report, attention) =
        theory_report(&outcome.checkpoint.params, &outcome.task, &eval, growth_slope(&outcome.metrics))?;
    write_json(&report, &args.out.join("report.json"))?;
    if args.svg {
        write_pretrain_svgs(&outcome.metrics, &attention, &args.out)?;
    }

    let last = outcome.metrics.last().expect("final row is always logged");
    writeln!(
        out,
        "pretrain: {} iterations, loss {:.6}, cos(v1, v*) {:.6}, |v2|/|v1| {}, min S[j*, j] {:.4}",
        config.iters,
        outcome.final_loss,
        last.cos_sim,
        last.ratio_v2_v1.map_or("n/a".into(), |r| format!("{r:.3e}")),
        report.attn_min_jstar
    )?;
    writeln!(out, "wrote metrics.csv, checkpoint.gsat, checkpoint.json, report.json to {}", args.out.display())?;

    if let Some(row) = outcome.metrics.iter().find(|r| !finite_row(r)) {
        writeln!(out, "FAIL: metrics row {} has a non-finite entry", row.iter)?;
        return Ok(EXIT_FAILURE);
    }
    if config.antithetic {
        let worst = outcome.metrics.iter().map(MetricsRow::max_zero_block_norm).fold(0.0, f64::max);
        if worst > ZERO_BLOCK_TOLERANCE {
            writeln!(out, "FAIL: antithetic run left off-diagonal blocks at {worst:e} > {ZERO_BLOCK_TOLERANCE:e}")?;
            return Ok(EXIT_FAILURE);
        }
    }
    Ok(EXIT_OK)
}

fn write_pretrain_svgs(rows: &[MetricsRow], attention: &DMatrix<f64>, dir: &Path) -> Result<()> {
    let series = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| (r.iter as f64, f(r))).collect::<Vec<_>>();
    fs::write(dir.join("loss.svg"), svg::line_chart("Training loss", "iteration", &[("loss", series(|r| r.loss))]))?;
    fs::write(
        dir.join("cosine.svg"),
        svg::line_chart("Cosine similarity of v1 and v*", "iteration", &[("cos", series(|r| r.cos_sim))]),
    )?;
    fs::write(
        dir.join("ratio.svg"),
        svg::line_chart(
            "Norm ratio |v2|/|v1|",
            "iteration",
            &[("|v2|/|v1|", series(|r| r.ratio_v2_v1.unwrap_or(f64::NAN)))],
        ),
    )?;
    fs::write(dir.join("heatmap.svg"), svg::heatmap("Mean attention scores", attention))?;
    Ok(())
}

/// Load a checkpoint and, if required, check its shape against a preset.
fn load_for_preset(path: &Path, preset: Option<FinetunePreset>) -> Result<Checkpoint> {
    let checkpoint = load_checkpoint(path)?;
    if let Some((d, groups)) = preset.and_then(finetune_preset_shape) {
        if (checkpoint.d(), checkpoint.groups()) != (d, groups) {
            return Err(Error::DimensionMismatch(format!(
                "preset expects a (d, D) = ({d}, {groups}) checkpoint, {} holds ({}, {})",
                path.display(),
                checkpoint.d(),
                checkpoint.groups()
            )));
        }
    }
    Ok(checkpoint)
}

pub fn cmd_finetune<W: Write>(args: &FinetuneArgs, out: &mut W) -> Result<i32> {
    let config = resolve_finetune_config(args)?;
    let checkpoint = load_for_preset(&args.checkpoint, args.preset)?;
    create_out_dir(&args.out)?;
    let rows = run_finetune(&checkpoint, &config)?;
    write_finetune_csv(&rows, fs::File::create(args.out.join("finetune.csv"))?)?;
    if args.svg {
        let acc: Vec<_> = rows.iter().map(|r| (r.step as f64, r.test_accuracy)).collect();
        fs::write(
            args.out.join("finetune.svg"),
            svg::line_chart("Downstream test accuracy", "step", &[("accuracy", acc)]),
        )?;
    }
    let last = rows.last().expect("final step is always logged");
    writeln!(
        out,
        "finetune: {} steps, final test accuracy {:.4}, mean {:.4}",
        last.step, last.test_accuracy, last.mean_test_accuracy
    )?;
    Ok(EXIT_OK)
}

/// Fine-tune with a fresh downstream direction; all randomness comes from
/// `config.seed`.
pub fn run_finetune(checkpoint: &Checkpoint, config: &FinetuneConfig) -> Result<Vec<FinetuneRow>> {
    let tree = SeedTree::new(config.seed);
    let v_tilde = random_unit_vector(checkpoint.d(), &mut tree.stream(DOWNSTREAM_V_STAR));
    let task = DownstreamTask::new(checkpoint.groups(), checkpoint.j_star, v_tilde, config.gamma, config.sigma_tilde)?
        .with_noise(config.noise);
    let test = task.sample_many(config.test_n, &mut tree.stream(DOWNSTREAM_TEST));
    let settings = FinetuneSettings { steps: config.steps, eta_tilde: config.eta_tilde, log_every: config.log_every };
    let (rows, _) = finetune_online_sgd(checkpoint, &task, settings, &mut downstream_rng(config.seed), &test)?;
    Ok(rows)
}

/// Pretraining task recorded next to a checkpoint.
pub fn task_from_sidecar(path: &Path, checkpoint: &Checkpoint, sigma_x: Option<f64>) -> Result<GroupSparseTask> {
    let sidecar = load_sidecar(path)?.ok_or_else(|| {
        CheckpointError::InvalidHeader(format!(
            "{} has no sidecar with the target direction",
            path.display()
        ))
    })?;
    if (sidecar.d, sidecar.groups, sidecar.j_star) != (checkpoint.d(), checkpoint.groups(), checkpoint.j_star) {
        return Err(Error::DimensionMismatch("sidecar disagrees with checkpoint header".into()));
    }
    let v_star = sidecar
        .v_star
        .ok_or_else(|| CheckpointError::InvalidHeader("sidecar lacks v_star".into()))?;
    let sigma_x = match sigma_x {
        Some(s) => s,
        None => sidecar
            .config
            .get("sigma_x")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::InvalidArgument("sidecar lacks sigma_x; pass --sigma-x".into()))?,
    };
    GroupSparseTask::new(checkpoint.groups(), checkpoint.j_star, DVector::from_vec(v_star), sigma_x)
}

pub fn run_theory(checkpoint: &Checkpoint, task: &GroupSparseTask, eval_n: usize, seed: u64) -> Result<(TheoryReport, DMatrix<f64>)> {
    if eval_n == 0 {
        return Err(Error::InvalidArgument("eval_n must be >= 1".into()));
    }
    let eval = task.sample_many(eval_n, &mut SeedTree::new(seed).stream(EVAL));
    theory_report(&checkpoint.params, task, &eval, None)
}

pub fn cmd_theory<W: Write>(args: &TheoryArgs, out: &mut W) -> Result<i32> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let task = task_from_sidecar(&args.checkpoint, &checkpoint, args.sigma_x)?;
    create_out_dir(&args.out)?;
    let (report, attention) = run_theory(&checkpoint, &task, args.eval_n, args.seed)?;
    write_json(&report, &args.out.join("report.json"))?;
    write_heatmap_csv(&attention, fs::File::create(args.out.join("heatmap.csv"))?)?;
    if args.svg {
        fs::write(args.out.join("heatmap.svg"), svg::heatmap("Mean attention scores", &attention))?;
    }
    writeln!(
        out,
        "theory: alpha {:.6}, min S[j*, j] {:.4}, max off-target {:.4}, zero blocks {:.3e}",
        report.alpha,
        report.attn_min_jstar,
        report.attn_max_offtarget,
        report.prop1.max()
    )?;
    for col in attention.column_iter() {
        if (col.sum() - 1.0).abs() > 1e-9 {
            writeln!(out, "FAIL: mean attention column does not sum to 1")?;
            return Ok(EXIT_FAILURE);
        }
    }
    Ok(EXIT_OK)
}

/// Maximum relative error between analytic and finite-difference gradients
/// over `trials` random instances.
pub fn gradcheck_max_error(args: &GradcheckArgs) -> Result<f64> {
    if args.trials == 0 {
        return Err(Error::InvalidArgument("--trials must be >= 1".into()));
    }
    if args.d == 0 || args.groups == 0 || args.samples == 0 {
        return Err(Error::InvalidArgument("--d, --D and --samples must be >= 1".into()));
    }
    if !(args.scale >= 0.0 && args.scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("--scale must be non-negative, got {}", args.scale)));
    }
    let tree = SeedTree::new(args.seed);
    let mut worst = 0.0f64;
    for trial in 0..args.trials {
        let mut rng = tree.indexed_stream(GRADCHECK, trial as u64);
        let j_star = rng.random_range(1..=args.groups);
        let task = GroupSparseTask::random(args.d, args.groups, j_star, 1.0, &mut rng)?;
        let samples = task.sample_many(args.samples, &mut rng);
        let m = args.d + args.groups;
        let uniform = |rng: &mut crate::rng::StreamRng| {
            if args.scale == 0.0 { 0.0 } else { rng.random_range(-args.scale..=args.scale) }
        };
        let v = DVector::from_fn(m, |_, _| uniform(&mut rng));
        let w = DMatrix::from_fn(m, m, |_, _| uniform(&mut rng));
        let params = ModelParams::from_parts(args.d, v, w)?;
        let mut analytic = grad_batch(&samples, &params)?;
        if args.inject_sign_flip {
            analytic.gw.neg_mut();
        }
        let numeric = fd_grad(&samples, &params, 1e-5)?;
        worst = worst.max(analytic.relative_error(&numeric));
    }
    Ok(worst)
}

pub fn cmd_gradcheck<W: Write>(args: &GradcheckArgs, out: &mut W) -> Result<i32> {
    let worst = gradcheck_max_error(args)?;
    let pass = worst <= GRADCHECK_TOLERANCE;
    writeln!(
        out,
        "gradcheck: {} trials, d = {}, D = {}, max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e}) {}",
        args.trials,
        args.d,
        args.groups,
        if pass { "PASS" } else { "FAIL" }
    )?;
    Ok(if pass { EXIT_OK } else { EXIT_FAILURE })
}
