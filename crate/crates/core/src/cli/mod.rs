//! Command surface behind the `ucyclemlp` binary.
//!
//! Every command writes its report to a caller-supplied writer so the same
//! code runs from the binary and from tests. Exit codes: 0 success,
//! 1 verification failure, 2 usage or configuration error, 3 I/O error.

mod config;

pub use config::RunConfig;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Buffers, CycleFc, Forward, Init, Stepsize};
use crate::dataio::{self, load_image, resize, save_mask, synth_generate, Dataset, Sample, SplitSpec};
use crate::error::Error;
use crate::network::{ModelConfig, UCycleMLP};
use crate::objectives::{dsc, f1, iou, label_classes, logits_to_labels};
use crate::oracle::{block_suite, loss_suite, model_suite, GradReport, BLOCK_TOLERANCE, SINGLE_TOLERANCE};
use crate::tensor::{ParamStore, Tensor};
use crate::trainer::{evaluate, fit, load_checkpoint, prepare, EvalReport, FitReport};

#[derive(Debug)]
pub enum Failure {
    Verification(String),
    Usage(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (Failure::Verification(m) | Failure::Usage(m) | Failure::Io(m)) = self;
        f.write_str(m)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Data { .. } | Error::Format(_) | Error::Version { .. } => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "ucyclemlp", version, about = "U-CycleMLP segmentation: train, evaluate, predict, verify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with Dice-gated checkpointing.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Segment one image into a PGM mask.
    Predict(PredictArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Parameter count, FLOPs and the stage shape ladder.
    Info(InfoArgs),
    /// Time an operator across input sizes.
    Bench(BenchArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// RunConfig file; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with images/ and masks/.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading a directory.
    #[arg(long)]
    pub synth: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Subset to score; manifests decide membership when present.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitChoice,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "mask.pgm")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Block,
    Model,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "block")]
    pub level: Level,
    /// Precision of the analytic gradient; the reference is always 64-bit.
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probes per tensor at model level.
    #[arg(long, default_value_t = 4)]
    pub max_coords: usize,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchOp {
    Cyclefc,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "cyclefc")]
    pub op: BenchOp,
    /// Square input sides.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Timed repetitions per size; the fastest is reported.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Label values including background: 2 or 4.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors go to stderr.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn dispatch(command: &Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(a, out).map(drop),
        Command::Eval(a) => cmd_eval(a, out).map(drop),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out).map(drop),
        Command::Info(a) => cmd_info(a, out),
        Command::Bench(a) => cmd_bench(a, out).map(drop),
        Command::Synth(a) => cmd_synth(a, out),
    }
}

fn open_checkpoint(path: &Path) -> CliResult<UCycleMLP<f32>> {
    load_checkpoint::<f32>(path)
        .map(|(model, _)| model)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) if !p.is_file() => Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Train and validation sets for a run.
fn training_data(cfg: &RunConfig, synth: Option<usize>) -> CliResult<(Dataset, Dataset)> {
    let classes = label_classes(cfg.model.num_classes);
    let spec = cfg.split();
    if let Some(n) = synth {
        let (h, w) = cfg.model.input_size;
        if h != w {
            return Err(Failure::Usage(format!("synthetic data needs a square input, not {h}×{w}")));
        }
        let all = synth_generate(n, h, classes, cfg.optim.seed)?;
        let splits = dataio::split(&all.ids(), &spec)?;
        return Ok((all.subset(&splits.train)?, all.subset(&splits.val)?));
    }
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Failure::Usage("no data: pass --data DIR, --synth N or set data_dir".into()))?;
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("data directory {} does not exist", dir.display())));
    }
    let (train, val, _) = dataio::load_splits(dir, classes, &spec)?;
    Ok((train, val))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<FitReport> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(d) = &args.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(p) = &args.out {
        cfg.checkpoint = p.clone();
    }
    if let Some(s) = args.seed {
        cfg.optim.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.optim.epochs = e;
    }
    cfg.validate()?;
    let (train, val) = training_data(&cfg, args.synth)?;
    if train.is_empty() {
        return Err(Failure::Usage("training split is empty".into()));
    }
    let mut model = UCycleMLP::<f32>::new(&cfg.model, cfg.optim.seed)?;
    let mut write_err = None;
    let report = fit(
        &mut model,
        &train,
        &val,
        &cfg.loss(),
        &cfg.optim,
        Some(&cfg.checkpoint),
        |log| match writeln!(out, "{log}") {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                write_err = Some(e);
                ControlFlow::Break(())
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    writeln!(
        out,
        "best val_dice {:.6} checkpoint {}",
        report.best_dice,
        cfg.checkpoint.display()
    )?;
    Ok(report)
}

/// One row per foreground class plus `mean`: `(class, dsc, f1, iou)`.
pub fn metric_rows(report: &EvalReport) -> Vec<(String, f64, f64, f64)> {
    let fg = &report.counts.classes[1..];
    let mut rows: Vec<_> = fg
        .iter()
        .enumerate()
        .map(|(i, c)| ((i + 1).to_string(), dsc(c), f1(c), iou(c)))
        .collect();
    let n = fg.len() as f64;
    let mean = |k: fn(&(String, f64, f64, f64)) -> f64| rows.iter().map(k).sum::<f64>() / n;
    let summary = ("mean".to_string(), report.mean_dice, mean(|r| r.2), mean(|r| r.3));
    rows.push(summary);
    rows
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<EvalReport> {
    if !args.data.is_dir() {
        return Err(Failure::Usage(format!("data directory {} does not exist", args.data.display())));
    }
    let mut model = open_checkpoint(&args.ckpt)?;
    let classes = label_classes(model.config().num_classes);
    let all = dataio::load_dataset(&args.data, classes)?;
    let data = match args.split {
        SplitChoice::All => all,
        choice => {
            let splits = match dataio::read_manifests(&args.data)? {
                Some(s) => s,
                None => dataio::split(&all.ids(), &SplitSpec::default())?,
            };
            let ids = match choice {
                SplitChoice::Train => splits.train,
                SplitChoice::Val => splits.val,
                _ => splits.test,
            };
            all.subset(&ids)?
        }
    };
    if data.is_empty() {
        return Err(Failure::Usage("no samples to evaluate".into()));
    }
    let data = prepare(&data, model.config().input_size)?;
    let report = evaluate(&mut model, &data, args.batch_size)?;
    let rows = metric_rows(&report);
    writeln!(out, "{:<8}{:>10}{:>10}{:>10}", "class", "dsc", "f1", "iou")?;
    for (name, d, f, i) in &rows {
        writeln!(out, "{name:<8}{d:>10.4}{f:>10.4}{i:>10.4}")?;
    }
    if let Some(path) = &args.csv {
        let mut text = String::from("class,dsc,f1,iou\n");
        for (name, d, f, i) in &rows {
            text.push_str(&format!("{name},{d},{f},{i}\n"));
        }
        fs::write(path, text)?;
    }
    Ok(report)
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut model = open_checkpoint(&args.ckpt)?;
    let image = load_image(&args.image).map_err(|e| match e {
        Error::Io(io) => Failure::Io(format!("{}: {io}", args.image.display())),
        other => other.into(),
    })?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (mh, mw) = model.config().input_size;
    let input = resize(&Sample::new(image, vec![0; h * w], "input")?, mh, mw)?;
    let logits = model.predict(&input.image.reshape(&[1, 3, mh, mw])?)?;
    let labels = logits_to_labels(&logits);
    // back to the source resolution, nearest neighbour on the labels
    let full = resize(&Sample::new(Tensor::zeros(&[3, mh, mw]), labels, "pred")?, h, w)?;
    let classes = label_classes(model.config().num_classes);
    let scale = (255 / (classes - 1)) as u8;
    save_mask(&args.out, &full.mask, h, w, scale)?;
    writeln!(out, "wrote {}×{} mask to {}", w, h, args.out.display())?;
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult<Vec<GradReport>> {
    let reports = match (args.level, args.precision) {
        (Level::Block, Precision::F64) => [block_suite::<f64>(args.seed)?, loss_suite::<f64>(args.seed)?].concat(),
        (Level::Block, Precision::F32) => [block_suite::<f32>(args.seed)?, loss_suite::<f32>(args.seed)?].concat(),
        (Level::Model, Precision::F64) => model_suite::<f64>(args.seed, args.max_coords)?,
        (Level::Model, Precision::F32) => model_suite::<f32>(args.seed, args.max_coords)?,
    };
    let tol = match args.precision {
        Precision::F64 => BLOCK_TOLERANCE,
        Precision::F32 => SINGLE_TOLERANCE,
    };
    writeln!(out, "{:<22}{:>8}{:>14}  result", "check", "coords", "worst rel")?;
    for r in &reports {
        let verdict = if r.passed(tol) { "pass" } else { "FAIL" };
        writeln!(out, "{:<22}{:>8}{:>14.3e}  {verdict}", r.name, r.coords, r.worst)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed(tol)).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Failure::Verification(format!(
            "gradient check failed (tolerance {tol:e}): {}",
            failed.join(", ")
        )));
    }
    writeln!(out, "all {} checks within {tol:e}", reports.len())?;
    Ok(reports)
}

pub fn cmd_info(args: &InfoArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref())?.model;
    let model = UCycleMLP::<f32>::new(&cfg, 0)?;
    let (h, w) = cfg.input_size;
    let flops = model.count_flops(h, w);
    writeln!(out, "parameters          {}", model.count_params())?;
    writeln!(out, "ccm parameters      {}", model.ccm_params())?;
    writeln!(out, "flops at {h}x{w}      {}", flops.total)?;
    writeln!(
        out,
        "position attention  {} ({:.1}% of flops)",
        flops.position_attention,
        100.0 * flops.attention_share()
    )?;
    writeln!(out, "{:<7}{:>9}{:>8}{:>8}", "stage", "channels", "height", "width")?;
    for (s, c, hh, ww) in model.arch.shape_ladder(h, w) {
        writeln!(out, "{s:<7}{c:>9}{hh:>8}{ww:>8}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub flops: u64,
    pub seconds: f64,
}

/// Fastest of `reps` eval-mode forward passes of a `1×7` CycleFC with
/// `channels` in and out, on `1×channels×s×s` inputs.
pub fn bench_cyclefc(sizes: &[usize], channels: usize, reps: usize) -> crate::Result<Vec<BenchRow>> {
    let block = CycleFc::new("fc", channels, channels, Stepsize::new(1, 7)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamStore::<f32>::new();
    let mut buffers = Buffers::new();
    block.init(&mut Init {
        params: &mut params,
        buffers: &mut buffers,
        rng: &mut rng,
    })?;
    sizes
        .iter()
        .map(|&s| {
            let x = Tensor::from_fn(&[1, channels, s, s], |_| rng.gen_range(-1.0f32..1.0));
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let input = x.clone();
                let mut f = Forward::new(&params, &mut buffers, false, 0);
                let start = Instant::now();
                let xv = f.input(input, false);
                block.forward(&mut f, xv)?;
                best = best.min(start.elapsed().as_secs_f64());
            }
            Ok(BenchRow {
                size: s,
                flops: block.flops(s, s),
                seconds: best,
            })
        })
        .collect()
}

/// Least-squares slope of `log time` against `log area`.
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (((r.size * r.size) as f64).ln(), r.seconds.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> CliResult<Vec<BenchRow>> {
    let BenchOp::Cyclefc = args.op;
    if args.sizes.len() < 2 || args.sizes.contains(&0) {
        return Err(Failure::Usage("bench needs at least two positive sizes".into()));
    }
    let rows = bench_cyclefc(&args.sizes, args.channels, args.reps)?;
    writeln!(out, "{:>6}{:>14}{:>12}{:>12}", "size", "flops", "flops/px", "ms")?;
    for r in &rows {
        let per_px = r.flops as f64 / (r.size * r.size) as f64;
        writeln!(out, "{:>6}{:>14}{:>12}{:>12.3}", r.size, r.flops, per_px, r.seconds * 1e3)?;
    }
    writeln!(out, "slope {:.3} (time vs area, log-log; 1 is linear)", loglog_slope(&rows))?;
    Ok(rows)
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let data = synth_generate(args.n, args.size, args.classes, args.seed)?;
    dataio::save_dataset(&args.out, &data)?;
    let splits = dataio::split(
        &data.ids(),
        &SplitSpec {
            seed: args.seed,
            ..SplitSpec::default()
        },
    )?;
    dataio::write_manifests(&args.out, &splits)?;
    writeln!(
        out,
        "wrote {} samples ({} train, {} val, {} test) to {}",
        data.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        args.out.display()
    )?;
    Ok(())
}

/// A config small enough to train in seconds, for smoke runs and tests.
pub fn quick_config(input: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::compact(input),
        ..RunConfig::default()
    };
    cfg.optim.epochs = epochs;
    cfg.optim.batch_size = 2;
    cfg.optim.lr = 1e-3;
    cfg
}
