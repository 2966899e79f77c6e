mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iars_core::data::manifest::Split;
use iars_core::stats::RankSumMethod;

use config::{load_config, Overrides};

/// Usage problems exit with 2, everything else that goes wrong with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<iars_core::error::Error> for CliError {
    fn from(e: iars_core::error::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<iars_core::data::pnm::PnmError> for CliError {
    fn from(e: iars_core::data::pnm::PnmError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "iars", version, about = "Lesion segmentation experiments: data, training, evaluation and inspection")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory receiving every output file.
    #[arg(long, global = true, value_name = "DIR", default_value = "iars-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// m1, m2, m3 or m4.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true, value_name = "REAL")]
    width_factor: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long, global = true, value_name = "REAL")]
    lr: Option<f64>,
    /// Focal foreground weight in [0, 1], or "none" for unit class weights.
    #[arg(long, global = true, value_name = "REAL|none", value_parser = parse_alpha)]
    alpha: Option<Alpha>,
    #[arg(long, global = true, value_name = "REAL")]
    gamma: Option<f64>,
    /// Elliptic Fourier harmonics (default 100).
    #[arg(long, global = true)]
    harmonics: Option<usize>,
    /// Covariance shrinkage in [0, 1].
    #[arg(long, global = true, value_name = "REAL")]
    shrinkage: Option<f64>,
    /// Worker threads for per-image work (default 1).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Alpha(Option<f64>);

fn parse_alpha(s: &str) -> Result<Alpha, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Alpha(None));
    }
    s.parse::<f64>().map(|v| Alpha(Some(v))).map_err(|e| e.to_string())
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset manifest, or a directory containing manifest.jsonl.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic lesion dataset.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train a model on the train split, validating on the val split.
    Train {
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Write predicted masks for one split.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Pixel-overlap metrics of predicted masks against ground truth.
    EvalRegion {
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `predict`.
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
    },
    /// Boundary shape distances of predicted masks against ground truth.
    EvalContour {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
    },
    /// Rank-sum test on one column of two per-image report files.
    StatsCompare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "iou")]
        column: String,
        #[arg(long, default_value = "auto")]
        method: RankSumMethod,
    },
    /// Block activation projections and variant-to-variant mask differences.
    Interpret {
        #[command(flatten)]
        data: DataArgs,
        /// Model whose block activations are projected.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Checkpoints of all four variants, in any order.
        #[arg(long, value_name = "PATH", num_args = 1..)]
        variants: Vec<PathBuf>,
        /// Number of images to render.
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
    /// Merge evaluation run directories into one summary.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Gradient checks and metric oracles; exits 1 if any fails.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::EvalRegion { .. } => "eval-region",
            Command::EvalContour { .. } => "eval-contour",
            Command::StatsCompare { .. } => "stats-compare",
            Command::Interpret { .. } => "interpret",
            Command::Report { .. } => "report",
            Command::Selftest => "selftest",
        }
    }
}

fn overrides(cli: &Cli) -> Overrides {
    let g = &cli.global;
    let mut o = Overrides {
        seed: g.seed,
        jobs: g.jobs,
        variant: g.variant.clone(),
        width_factor: g.width_factor,
        epochs: g.epochs,
        batch_size: g.batch_size,
        lr: g.lr,
        alpha: g.alpha.map(|a| a.0),
        gamma: g.gamma,
        harmonics: g.harmonics,
        shrinkage: g.shrinkage,
        ..Default::default()
    };
    match &cli.command {
        Command::Synth { count, height, width } => {
            o.synth_count = *count;
            o.synth_height = *height;
            o.synth_width = *width;
        }
        Command::Train { data } => o.data = data.clone(),
        Command::Predict { data, checkpoint } => {
            o.data = data.data.clone();
            o.checkpoint = checkpoint.clone();
        }
        Command::EvalRegion { data, .. } | Command::EvalContour { data, .. } => o.data = data.data.clone(),
        Command::Interpret { data, checkpoint, .. } => {
            o.data = data.data.clone();
            o.checkpoint = checkpoint.clone();
        }
        _ => {}
    }
    o
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let cfg = load_config(cli.global.config.as_deref(), &overrides(&cli))?;
    let mut out = commands::RunDir::create(&cli.global.out, cli.command.name(), &cfg)?;
    let ok = match cli.command {
        Command::Synth { .. } => commands::synth(&cfg, &mut out)?,
        Command::Train { .. } => commands::train(&cfg, &mut out)?,
        Command::Predict { data, .. } => commands::predict(&cfg, &mut out, data.split)?,
        Command::EvalRegion { data, pred } => commands::eval_region(&cfg, &mut out, data.split, &pred)?,
        Command::EvalContour { data, pred } => commands::eval_contour(&cfg, &mut out, data.split, &pred)?,
        Command::StatsCompare { a, b, column, method } => commands::stats_compare(&mut out, &a, &b, &column, method)?,
        Command::Interpret { data, variants, limit, .. } => {
            commands::interpret(&cfg, &mut out, data.split, &variants, limit)?
        }
        Command::Report { runs } => commands::report(&mut out, &runs)?,
        Command::Selftest => commands::selftest(&cfg, &mut out)?,
    };
    out.finish()?;
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
