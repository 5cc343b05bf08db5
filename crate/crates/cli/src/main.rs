//! `grapedet`: synthetic data, augmentation, splitting, training,
//! evaluation, prediction and reporting from the command line.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

/// A usage or configuration problem; exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Parser)]
#[command(name = "grapedet", version, about = "Grape bunch detection pipeline")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the dataset directory for `synth`).
    #[arg(long = "out-dir", global = true, env = "GRAPEDET_OUT")]
    pub out_dir: Option<PathBuf>,
    /// Dataset directory containing manifest.jsonl.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Images for `synth`, variants per image for `augment`.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"])]
    pub ratios: Option<Vec<f64>>,
    /// Matching IoU for `eval`, suppression IoU for `predict`.
    #[arg(long = "iou-thresh", global = true)]
    pub iou_thresh: Option<f64>,
    /// Fixed operating threshold for `eval`, detection threshold for `predict`.
    #[arg(long = "conf-thresh", global = true)]
    pub conf_thresh: Option<f64>,
    #[arg(long, global = true)]
    pub device: Option<String>,
    /// `off` builds the plain YOLOv5 baseline.
    #[arg(long, global = true, value_enum)]
    pub swin: Option<Toggle>,
    #[arg(long = "swin-stages", global = true)]
    pub swin_stages: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic vineyard dataset.
    Synth,
    /// Add augmented variants of every raw image to a dataset, in place.
    Augment,
    /// Assign train/val/test splits grouped by source image, in place.
    Split,
    /// Train a detector on the train split, validating on the val split.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score detections against ground truth and field counts.
    Eval {
        #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
        weights: Option<PathBuf>,
        /// Directory of label files with a confidence column.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Latency repetitions (≥ 3); requires --weights.
        #[arg(long)]
        bench: Option<usize>,
    },
    /// Detect bunches in image files or directories.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Also write images with boxes drawn.
        #[arg(long)]
        annotate: bool,
    },
    /// Render tables and scatter plots from an evaluation report.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Augment => "augment",
            Command::Split => "split",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Report { .. } => "report",
        }
    }
}

/// Merge the config file and flags into a validated configuration.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.device {
        cfg.device = d.clone();
    }
    if let Some(o) = &cli.out_dir {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(d) = &cli.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(r) = &cli.ratios {
        cfg.split.ratios = [r[0], r[1], r[2]];
    }
    if let Some(n) = cli.swin_stages {
        cfg.model.swin_stages = n;
    }
    match cli.swin {
        Some(Toggle::Off) => cfg.model.swin_stages = 0,
        Some(Toggle::On) if cfg.model.swin_stages == 0 => cfg.model.swin_stages = 1,
        _ => {}
    }
    match &cli.command {
        Command::Synth => {
            if let Some(n) = cli.n {
                cfg.synth.n = n;
            }
        }
        Command::Augment => {
            if let Some(n) = cli.n {
                cfg.augment.n = n;
            }
        }
        Command::Train { epochs, batch_size, .. } => {
            if let Some(e) = epochs {
                if *e == 0 {
                    return Err(UsageError("--epochs: must be ≥ 1".into()).into());
                }
                cfg.train.epochs = *e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = *b;
            }
        }
        Command::Eval { split, bench, .. } => {
            if let Some(t) = cli.iou_thresh {
                cfg.eval.iou_threshold = t;
            }
            if let Some(t) = cli.conf_thresh {
                cfg.eval.operating_threshold = Some(t);
            }
            if let Some(s) = split {
                cfg.data.eval_split = match s {
                    SplitArg::Train => Some(grapedet::data::Split::Train),
                    SplitArg::Val => Some(grapedet::data::Split::Val),
                    SplitArg::Test => Some(grapedet::data::Split::Test),
                    SplitArg::All => None,
                };
            }
            if let Some(b) = bench {
                cfg.eval.benchmark_reps = *b;
            }
        }
        Command::Predict { annotate, .. } => {
            if let Some(t) = cli.iou_thresh {
                cfg.predict.nms_iou = t;
            }
            if let Some(t) = cli.conf_thresh {
                cfg.predict.conf_threshold = t;
            }
            cfg.predict.annotate |= annotate;
        }
        Command::Split | Command::Report { .. } => {}
    }
    cfg.resolve()
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || matches!(
                c.downcast_ref::<grapedet::Error>(),
                Some(grapedet::Error::Config(_) | grapedet::Error::InvalidParam(_))
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = resolve_config(&cli).and_then(|cfg| commands::run(&cli, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}
