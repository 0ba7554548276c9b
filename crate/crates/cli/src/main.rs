//! `gano`: synthetic data generation, training, evaluation, prediction and
//! the fusion-layer ablation.
//!
//! Failures print one line to stderr, `error: kind=<tag> message=<text>`.
//! Usage errors exit with status 2, every other failure with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gano_core::attention::{AttentionDivisor, LayerSelection};
use gano_core::checkpoint::Checkpoint;
use gano_core::config::{Preset, RunConfig};
use gano_core::dataset::{read_vocab, save_predictions, write_dataset, PredictionRecord, Sample};
use gano_core::metrics::{format_table, MetricReport};
use gano_core::train::{ablate, check_vocab, load_samples, Trainer, CHECKPOINT_DIR, LATEST_CHECKPOINT};
use gano_core::world::generate_dataset_parallel;
use gano_core::{Error, Result};
use log::info;

const PREDICTIONS_FILE: &str = "predictions.jsonl";
const REPORT_FILE: &str = "report.txt";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(
    name = "gano",
    version,
    about = "Object-guided attention for short-term interaction anticipation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of clips (defaults to the config's `train_clips`).
        #[arg(long)]
        clips: Option<usize>,
        /// Detection box noise amplitude in low-resolution pixels.
        #[arg(long)]
        jitter: Option<f64>,
        /// Worker threads; the files are identical for any count.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train a model and write the loss log, checkpoints and a training-set report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Cap on optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write predictions and the metric report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report format on stdout.
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write top-5 predictions for every clip without scoring them.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to run.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate one run per fusion-layer selection and tabulate them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Cap on optimizer steps per run.
        #[arg(long)]
        max_steps: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings before the config file is applied.
    #[arg(long, value_enum, default_value_t = PresetArg::Toy)]
    preset: PresetArg,
    /// Seed for data generation, initialization and data order.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (prediction file or dataset directory for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fast-branch levels that receive object-guided attention.
    #[arg(long, value_enum)]
    fusion_layers: Option<FusionLayers>,
    /// Attention score divisor.
    #[arg(long, value_enum)]
    attention_divisor: Option<Divisor>,
    /// Dataset directory written by gen-data; synthetic clips are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Toy,
    Reference,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionLayers {
    First,
    Top,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Divisor {
    Sqrt,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Kv,
}

impl Common {
    fn base(&self) -> RunConfig {
        RunConfig::preset(match self.preset {
            PresetArg::Toy => Preset::Toy,
            PresetArg::Reference => Preset::Reference,
        })
    }

    /// Preset, then config file, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let base = self.base();
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path, &base)?,
            None => base,
        };
        self.apply(cfg)
    }

    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.world.seed = seed;
        }
        if let Some(layers) = self.fusion_layers {
            cfg.model.attention.layers = match layers {
                FusionLayers::First => LayerSelection::First,
                FusionLayers::Top => LayerSelection::Top,
                FusionLayers::All => LayerSelection::All,
            };
        }
        if let Some(d) = self.attention_divisor {
            cfg.model.attention.divisor = match d {
                Divisor::Sqrt => AttentionDivisor::Sqrt,
                Divisor::Linear => AttentionDivisor::Linear,
            };
        }
        if let Some(data) = &self.data {
            cfg.data = Some(data.clone());
        }
        if let Some(out) = &self.out {
            cfg.output = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig, default: &str) -> PathBuf {
        cfg.output.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn prediction_records(predictions: &std::collections::BTreeMap<String, Vec<gano_core::StaPrediction>>) -> Vec<PredictionRecord> {
    predictions
        .iter()
        .map(|(id, p)| PredictionRecord {
            clip_id: id.clone(),
            predictions: p.clone(),
        })
        .collect()
}

fn render(report: &MetricReport, format: Format) -> String {
    match format {
        Format::Table => format_table(&[("guided attention".to_string(), *report)]),
        Format::Kv => report.key_values(),
    }
}

/// Model state from a checkpoint plus the clips to run it on.
fn checkpoint_inputs(common: &Common, path: &Path) -> Result<(Trainer, Vec<Sample>, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let mut cfg = ckpt.config.clone();
    cfg.data = None;
    cfg.output = None;
    let cfg = common.apply(cfg)?;
    if let Some(dir) = &cfg.data {
        check_vocab(&ckpt, &read_vocab(dir)?)?;
    }
    let trainer = Trainer::from_checkpoint(&Checkpoint {
        config: cfg.clone(),
        ..ckpt
    })?;
    let samples = load_samples(&cfg)?;
    Ok((trainer, samples, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            clips,
            jitter,
            threads,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(j) = jitter {
                cfg.world.detection_jitter = j;
                cfg.validate()?;
            }
            let out = common.out_dir(&cfg, "data");
            let n = clips.unwrap_or(cfg.train_clips);
            let samples: Vec<Sample> = generate_dataset_parallel(&cfg.world, n, threads)?
                .into_iter()
                .map(Sample::from)
                .collect();
            write_dataset(&out, &samples, &cfg.world.vocab)?;
            println!("wrote {n} clips to {}", out.display());
        }
        Command::Train {
            common,
            max_steps,
            resume,
        } => {
            let mut cfg = common.resolve()?;
            if max_steps.is_some() {
                cfg.optim.max_steps = max_steps;
            }
            let out = common.out_dir(&cfg, "run");
            create_dir(&out)?;
            write_file(&out.join(CONFIG_FILE), &cfg.to_toml()?)?;
            let samples = load_samples(&cfg)?;
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    if ckpt.config.model != cfg.model || ckpt.config.world.vocab != cfg.world.vocab {
                        return Err(Error::Config(format!(
                            "{} was trained with a different model or vocabulary",
                            path.display()
                        )));
                    }
                    Trainer::from_checkpoint(&Checkpoint {
                        config: cfg.clone(),
                        ..ckpt
                    })?
                }
                None => Trainer::new(&cfg)?,
            };
            info!("{} parameters, {} clips", trainer.store.num_scalars(), samples.len());
            let history = trainer.fit(&samples, Some(&out))?;
            let eval = trainer.evaluate(&samples)?;
            write_file(&out.join(REPORT_FILE), &eval.report.key_values())?;
            if let Some(last) = history.last() {
                println!("step {} loss {:.4}", last.step, last.losses.total);
            }
            println!("training set: {}", eval.report);
            println!("checkpoint: {}", out.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT).display());
        }
        Command::Eval {
            common,
            checkpoint,
            format,
        } => {
            let (trainer, samples, cfg) = checkpoint_inputs(&common, &checkpoint)?;
            let eval = trainer.evaluate(&samples)?;
            if let Some(out) = &cfg.output {
                create_dir(out)?;
                save_predictions(&out.join(PREDICTIONS_FILE), &prediction_records(&eval.predictions))?;
                write_file(&out.join(REPORT_FILE), &eval.report.key_values())?;
            }
            print!("{}", render(&eval.report, format));
        }
        Command::Predict { common, checkpoint } => {
            let (trainer, samples, cfg) = checkpoint_inputs(&common, &checkpoint)?;
            let predictions = trainer.predict(&samples)?;
            let out = common.out_dir(&cfg, "predictions");
            create_dir(&out)?;
            let path = out.join(PREDICTIONS_FILE);
            save_predictions(&path, &prediction_records(&predictions))?;
            println!("wrote predictions for {} clips to {}", predictions.len(), path.display());
        }
        Command::Ablate { common, max_steps } => {
            let mut cfg = common.resolve()?;
            if max_steps.is_some() {
                cfg.optim.max_steps = max_steps;
            }
            let out = common.out_dir(&cfg, "ablation");
            create_dir(&out)?;
            let samples = load_samples(&cfg)?;
            let result = ablate(&cfg, &samples, Some(&out))?;
            print!("{}", result.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let message = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            let message = message.trim_start_matches("error: ");
            eprintln!("error: kind=usage message={message}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
