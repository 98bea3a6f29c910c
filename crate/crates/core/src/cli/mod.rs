//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage, configuration or input errors, 2
//! for failures during a run (including partially failed `predict`).

pub mod commands;
pub mod config;
pub mod figures;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::EncoderKind;
use commands::EvalSplit;
pub use config::RunConfig;

pub const OUTPUT_ENV: &str = "PNEUMOSEG_OUTPUT";
pub const RUN_FILE: &str = "run.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pneumoseg", version, about = "Pneumothorax segmentation on chest radiographs")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output root for manifests, checkpoints, logs and figures.
    #[arg(long, short, global = true, env = OUTPUT_ENV, value_name = "DIR")]
    pub output: Option<PathBuf>,

    /// Dataset root holding `images/` and `masks/`.
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// List the dataset, assign the train/val split and write manifest.csv.
    Prepare(PrepareArgs),
    /// Train a model and write checkpoints, the epoch log and curves.png.
    Train(TrainArgs),
    /// Grid-search the binarisation and removal thresholds on the val split.
    Tune(TuneArgs),
    /// Score a checkpoint with tuned post-processing and render figures.
    Evaluate(EvaluateArgs),
    /// Write post-processed masks (and optionally RLE) for new images.
    Predict(PredictArgs),
    /// Generate a synthetic image/mask dataset.
    Synth(SynthArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Prepare(_) => "prepare",
            Command::Train(_) => "train",
            Command::Tune(_) => "tune",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
            Command::Synth(_) => "synth",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthOptions {
    /// Image side length of generated samples.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Share of samples with an empty mask.
    #[arg(long)]
    pub negative_fraction: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrepareArgs {
    /// Generate N synthetic pairs under the data root first.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Seed for the split and any synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of samples assigned to the train split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Keep the positive share equal across splits.
    #[arg(long)]
    pub stratify: bool,
    #[command(flatten)]
    pub synth: SynthOptions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Number of pairs.
    #[arg(long, short)]
    pub n: Option<usize>,
    /// Seed for the generated images and masks.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub synth: SynthOptions,
}

fn parse_encoder(s: &str) -> std::result::Result<EncoderKind, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("unknown encoder `{s}`; expected tiny or efficientnet-b0..b7"))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Upper bound on training epochs.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate at the first step of the cosine schedule.
    #[arg(long)]
    pub lr_max: Option<f64>,
    /// Learning rate at the last step.
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Half-precision forward/backward with dynamic loss scaling.
    #[arg(long)]
    pub mixed_precision: bool,
    /// Seed for initialisation, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `tiny` or `efficientnet-b0` through `efficientnet-b7`.
    #[arg(long, value_parser = parse_encoder)]
    pub encoder: Option<EncoderKind>,
    /// Square input side, a multiple of 32.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Safetensors file with `encoder.*` weights.
    #[arg(long, value_name = "FILE", conflicts_with = "from_scratch")]
    pub pretrained: Option<PathBuf>,
    /// Ignore any configured pretrained weights.
    #[arg(long)]
    pub from_scratch: bool,
    /// Train with the resize step only.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from checkpoints/last.ckpt.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TuneArgs {
    /// Defaults to checkpoints/best.ckpt.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Defaults to checkpoints/best.ckpt.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Tuned parameters; defaults to postprocess.json in the output root.
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalSplit::Val)]
    pub split: EvalSplit,
    /// Number of overlay figures to write.
    #[arg(long, value_name = "K")]
    pub overlays: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    /// Image files or directories of images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Defaults to checkpoints/best.ckpt.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Tuned parameters; defaults to postprocess.json in the output root.
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
    /// Defaults to `predictions/` in the output root.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Also write rle.csv.
    #[arg(long)]
    pub rle: bool,
}

fn apply_synth(cfg: &mut RunConfig, seed: Option<u64>, o: &SynthOptions) {
    if let Some(s) = seed {
        cfg.synthetic.seed = s;
    }
    if let Some(r) = o.resolution {
        cfg.synthetic.resolution = r;
    }
    if let Some(f) = o.negative_fraction {
        cfg.synthetic.negative_fraction = f;
    }
}

/// Merges file, environment and flag settings into one resolved config.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    if let Some(root) = &cli.data {
        cfg.data.root = root.clone();
    }
    match &cli.command {
        Command::Prepare(a) => {
            if let Some(n) = a.synthetic {
                cfg.synthetic.n = n;
            }
            if let Some(s) = a.seed {
                cfg.data.split_seed = s;
            }
            if let Some(f) = a.train_fraction {
                cfg.data.train_fraction = f;
            }
            cfg.data.stratify |= a.stratify;
            apply_synth(&mut cfg, a.seed, &a.synth);
        }
        Command::Synth(a) => {
            if let Some(n) = a.n {
                cfg.synthetic.n = n;
            }
            apply_synth(&mut cfg, a.seed, &a.synth);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            if let Some(v) = a.max_epochs {
                t.max_epochs = v;
            }
            if let Some(v) = a.patience {
                t.early_stop_patience = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = a.lr_max {
                t.lr_max = v;
            }
            if let Some(v) = a.lr_min {
                t.lr_min = v;
            }
            t.mixed_precision |= a.mixed_precision;
            if let Some(s) = a.seed {
                t.seed = s;
                cfg.model.seed = s;
            }
            if let Some(e) = a.encoder {
                cfg.model.encoder = e;
            }
            if let Some(r) = a.resolution {
                cfg.model.resolution = r;
            }
            if let Some(p) = &a.pretrained {
                cfg.model.pretrained_source = Some(p.clone());
            }
            if a.from_scratch {
                cfg.model.pretrained_source = None;
            }
            if a.no_augment {
                cfg.augment.transforms = Some(Vec::new());
            }
        }
        Command::Evaluate(a) => {
            if let Some(k) = a.overlays {
                cfg.evaluate.overlays = k;
            }
        }
        Command::Tune(_) | Command::Predict(_) => {}
    }
    cfg.resolve_paths();
    cfg.validate()?;
    Ok(cfg)
}

/// Adds this command's resolved config and summary to `run.json`, keeping
/// entries from other commands.
fn record_run(cfg: &RunConfig, command: &Command, summary: &Value) -> Result<()> {
    let path = cfg.output_dir.join(RUN_FILE);
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut runs = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Map<String, Value>>(&t).ok())
        .unwrap_or_default();
    runs.insert(
        command.name().to_string(),
        json!({
            "version": env!("CARGO_PKG_VERSION"),
            "arguments": command,
            "config": cfg,
            "summary": summary,
        }),
    );
    let text = serde_json::to_string_pretty(&runs)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn execute(cfg: &RunConfig, command: &Command) -> Result<(Value, i32)> {
    Ok(match command {
        Command::Prepare(a) => (commands::prepare(cfg, a.synthetic.is_some())?, EXIT_OK),
        Command::Synth(_) => (commands::synth(cfg)?, EXIT_OK),
        Command::Train(a) => (commands::train(cfg, a.resume)?, EXIT_OK),
        Command::Tune(a) => (commands::tune(cfg, a.checkpoint.as_deref())?, EXIT_OK),
        Command::Evaluate(a) => (
            commands::evaluate(
                cfg,
                a.checkpoint.as_deref(),
                a.params.as_deref(),
                a.split,
                cfg.evaluate.overlays,
            )?,
            EXIT_OK,
        ),
        Command::Predict(a) => {
            let summary = commands::predict(
                cfg,
                &a.inputs,
                a.checkpoint.as_deref(),
                a.params.as_deref(),
                a.out.as_deref(),
                a.rle,
            )?;
            for f in &summary.failures {
                eprintln!("error: {}: {}", f.path.display(), f.error);
            }
            let code = if summary.failures.is_empty() { EXIT_OK } else { EXIT_RUNTIME };
            (serde_json::to_value(&summary)?, code)
        }
    })
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USER;
        }
    };
    match execute(&cfg, &cli.command) {
        Ok((summary, code)) => {
            if let Err(e) = record_run(&cfg, &cli.command, &summary) {
                eprintln!("error: {e}");
                return EXIT_RUNTIME;
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            let failure = json!({ "error": e.to_string() });
            let _ = record_run(&cfg, &cli.command, &failure);
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
