mod commands;
mod error;
mod provenance;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use obbstack::{ApMode, Method, PipelineConfig};

use crate::error::{CliError, CliResult};

/// Stacking ensembles for oriented bounding box detectors.
#[derive(Debug, Parser)]
#[command(name = "obbstack", version)]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output; repeat for debug level.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the meta-learner on validation detections.
    TrainMeta(TrainMetaArgs),
    /// Fuse test detections with stacking, NMS or WBF.
    Fuse(FuseArgs),
    /// Score a run against ground truth.
    Eval(EvalArgs),
    /// Score correlations between members and the weight decomposition.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic benchmark and run every method on it.
    Simulate(SimulateArgs),
}

/// Pipeline settings. A `--config` file (JSON or TOML) is read first and the
/// individual flags override it.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Pipeline settings file (JSON or TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fusion method (default: stacking).
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Clustering IoU threshold (default 0.5).
    #[arg(long)]
    iou_thresh: Option<f64>,
    /// IoU a cluster center needs with ground truth to count as positive (default 0.5).
    #[arg(long)]
    iou_label_thresh: Option<f64>,
    /// Logit assigned to members absent from a cluster (default -8).
    #[arg(long, allow_hyphen_values = true)]
    z_miss: Option<f64>,
    /// L2 penalty on the weights (default 1e-6).
    #[arg(long)]
    lambda: Option<f64>,
    /// Drop input detections and fused boxes scoring below this (default 0.001).
    #[arg(long)]
    min_score: Option<f64>,
    /// AP interpolation (default: voc12).
    #[arg(long, value_enum)]
    ap_mode: Option<ApModeArg>,
    /// IoU for a detection to match ground truth in evaluation (default 0.5).
    #[arg(long)]
    matching_iou: Option<f64>,
    /// Run NMS inside each member before clustering.
    #[arg(long)]
    per_model_nms: bool,
    /// Newton iteration cap (default 500).
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Stacking,
    Nms,
    Wbf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ApModeArg {
    Voc07,
    Voc12,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Dota,
    Json,
    Both,
}

impl OutputFormat {
    pub fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }

    pub fn dota(self) -> bool {
        matches!(self, OutputFormat::Dota | OutputFormat::Both)
    }
}

impl PipelineArgs {
    pub fn resolve(&self) -> CliResult<PipelineConfig> {
        let mut cfg = match &self.config {
            None => PipelineConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let parsed = if path.extension().is_some_and(|e| e == "toml") {
                    toml::from_str(&text).map_err(|e| e.to_string())
                } else {
                    serde_json::from_str(&text).map_err(|e| e.to_string())
                };
                parsed.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(m) = self.method {
            cfg.method = match m {
                MethodArg::Stacking => Method::Stacking,
                MethodArg::Nms => Method::Nms,
                MethodArg::Wbf => Method::Wbf,
            };
        }
        if let Some(a) = self.ap_mode {
            cfg.ap_mode = match a {
                ApModeArg::Voc07 => ApMode::Voc07,
                ApModeArg::Voc12 => ApMode::Voc12,
            };
        }
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.iou_thresh, self.iou_thresh);
        set(&mut cfg.iou_label_thresh, self.iou_label_thresh);
        set(&mut cfg.z_miss, self.z_miss);
        set(&mut cfg.lambda, self.lambda);
        set(&mut cfg.min_score, self.min_score);
        set(&mut cfg.matching_iou, self.matching_iou);
        if let Some(n) = self.max_iter {
            cfg.max_iter = n;
        }
        cfg.per_model_nms |= self.per_model_nms;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainMetaArgs {
    /// Validation detections of one member (DOTA directory or run JSON); repeat per model, in order.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Validation ground truth (DOTA label directory or ground-truth JSON).
    #[arg(long)]
    pub gt: PathBuf,
    /// Meta-learner JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the training report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Test detections of one member; repeat per model, in training order.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Meta-learner JSON (required for stacking).
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub format: OutputFormat,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections to score (DOTA directory or run JSON).
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Row label in the table (default: the run's model name).
    #[arg(long)]
    pub name: Option<String>,
    /// Write the full result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Detections of one member; repeat per model.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Meta-learner whose weights are decomposed.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Ground truth used to fit a temperature per member.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Per-member temperatures, overriding `--gt`.
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Option<Vec<f64>>,
    /// Per-member redundancy factors (default 1).
    #[arg(long, value_delimiter = ',')]
    pub redundancy: Option<Vec<f64>>,
    /// Directory for correlation.csv and analysis.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (JSON or TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Run this seed only instead of the scenario's list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutputFormat,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainMeta(a) => commands::train_meta(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Simulate(a) => commands::simulate(&a),
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            std::process::exit(2);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            std::process::exit(2);
        }
    };
    if let Err(e) = pool.install(|| run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
