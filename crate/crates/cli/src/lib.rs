//! Command-line front end. [`dispatch`] parses an argument vector, runs one
//! subcommand and maps the outcome to an exit code: 0 on success, 1 for bad
//! input, 2 for runtime failures.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cyten_core::io::NetworkKind;
use cyten_core::preprocess::MaskMode;
use cyten_core::trainer::Partition;
use cyten_core::Error;

mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cyten", version, about = "Cytotoxic edema classification from paired DWI/ADC volumes")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fixed-order reductions everywhere.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Phantom(PhantomArgs),
    /// Mask, resample and normalize every scan of a manifest.
    Preprocess(PreprocessArgs),
    /// Write the subject-grouped split for one fold.
    Split(SplitArgs),
    /// Train one expert.
    Train(TrainArgs),
    /// Score volumes with a trained expert.
    Predict(PredictArgs),
    /// Combine DWI and ADC scores.
    Ensemble(EnsembleArgs),
    /// Scan- and subject-level metrics for a score file.
    Eval(EvalArgs),
    /// Logistic regression of outcomes on subject scores.
    Correlate(CorrelateArgs),
    /// Finite-difference check of a full network.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NetArg {
    Dwinet,
    Adcnet,
}

impl From<NetArg> for NetworkKind {
    fn from(n: NetArg) -> Self {
        match n {
            NetArg::Dwinet => NetworkKind::Dwinet,
            NetArg::Adcnet => NetworkKind::Adcnet,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskArg {
    Auto,
    Provided,
}

impl From<MaskArg> for MaskMode {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Auto => MaskMode::Auto,
            MaskArg::Provided => MaskMode::Provided,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PartitionArg {
    Train,
    Val,
    Test,
    All,
}

impl PartitionArg {
    fn partition(self) -> Option<Partition> {
        match self {
            PartitionArg::Train => Some(Partition::Train),
            PartitionArg::Val => Some(Partition::Val),
            PartitionArg::Test => Some(Partition::Test),
            PartitionArg::All => None,
        }
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> =
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|p| format!("expected D,H,W, got {} values", p.len()))
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 120)]
    n: usize,
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write ground-truth brain and lesion masks.
    #[arg(long)]
    masks: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long, value_enum)]
    mask: Option<MaskArg>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    net: NetArg,
    #[arg(long)]
    splits: PathBuf,
    /// Manifest to train on instead of the one named in the splits file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to initialize from.
    #[arg(long)]
    warm: Option<PathBuf>,
    /// Keep the fresh output layer when warm starting.
    #[arg(long, requires = "warm")]
    head_only_reset: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Allow runs shorter than the minimum epoch count.
    #[arg(long)]
    dev: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, requires = "splits")]
    partition: Option<PartitionArg>,
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[arg(long)]
    dwi: PathBuf,
    #[arg(long)]
    adc: PathBuf,
    /// Fixed DWI weight.
    #[arg(long, conflicts_with_all = ["fit_dwi", "fit_adc"])]
    w: Option<f64>,
    /// Validation DWI scores for fitting the weight.
    #[arg(long, requires_all = ["fit_adc", "labels"])]
    fit_dwi: Option<PathBuf>,
    #[arg(long, requires = "fit_dwi")]
    fit_adc: Option<PathBuf>,
    /// Manifest or `subject_id,label` CSV for the fit.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Manifest or `subject_id,label` CSV.
    #[arg(long)]
    labels: PathBuf,
    /// Subject voting thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.5,0.6")]
    thresholds: Vec<f64>,
    /// Scan-level decision threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 101)]
    curve_points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    net: NetArg,
    #[arg(long, value_parser = parse_dims, default_value = "16,16,16")]
    dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    coords: usize,
    /// Architecture overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs `cyten` with `argv` (program name first) and returns the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let run = || commands::run(cli.command, cli.deterministic);
    let result = match cli.threads {
        None => run(),
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(Error::InvalidArgument(format!("thread pool: {e}"))),
        },
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_runtime() {
                2
            } else {
                1
            }
        }
    }
}
