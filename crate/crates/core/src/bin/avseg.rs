use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use avseg::data::{generate_dataset, write_avsbench_layout, TrainingSet};
use avseg::error::{Error, Result};
use avseg::pipeline::{
    build_pseudo_masks, evaluate, load_data, load_model, plot_losses, sweep, synth_spec, train,
    ModelPredictor, SweepAxis, TrainInputs,
};
use avseg::pseudomask::{export_pseudo_masks, load_pseudo_masks};
use avseg::RunConfig;

/// Output root override; falls back to `output_dir` from the configuration.
const OUTPUT_ROOT_ENV: &str = "AVSEG_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "avseg", version, about = "Weakly-supervised audio-visual segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base profile: full or toy.
    #[arg(long)]
    profile: Option<String>,
    /// Dotted override, e.g. `--set loss.temperature=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as a directory tree.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Destination, default `<root>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the activation model and export refined pseudo masks.
    Pseudomask {
        #[command(flatten)]
        common: Common,
        /// Destination, default `<root>/pseudomasks`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the segmentation network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory name under the output root.
        #[arg(long, default_value = "run")]
        run: String,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Previously exported pseudo masks; built on the fly when absent.
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Where metrics.json and masks go, default `<checkpoint dir>/eval_<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// fusion_stages or batch_size.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis defaults otherwise.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Plot the loss and validation curves of a run.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Run directory, default `<root>/run`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    RunConfig::load(c.config.as_deref(), c.profile.as_deref(), &c.overrides)
}

fn output_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::Io { path: p, source: e })
}

fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| output_root(&cfg).join("data"));
            let spec = synth_spec(&cfg);
            let data = generate_dataset(&spec)?;
            write_avsbench_layout(&data, &out, Some(&spec))?;
            Ok(json!({
                "path": out,
                "train": data.train.len(),
                "val": data.val.len(),
                "test": data.test.len(),
                "content_hash": data.content_hash(),
            }))
        }
        Command::Pseudomask { common, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| output_root(&cfg).join("pseudomasks"));
            let data = load_data(&cfg)?;
            let train_set = TrainingSet::new(data.train);
            let (ccam, masks) = build_pseudo_masks(&cfg, &train_set)?;
            let entries = export_pseudo_masks(&masks, &out)?;
            save_config(&cfg, &out)?;
            let mean_fg = entries.iter().map(|e| e.fg_pixel_fraction).sum::<f64>() / entries.len().max(1) as f64;
            Ok(json!({
                "path": out,
                "masks": entries.len(),
                "mean_fg_fraction": mean_fg,
                "final_contrast_loss": ccam.epoch_losses.last(),
            }))
        }
        Command::Train {
            common,
            run,
            resume,
            pseudo,
        } => {
            let cfg = load_config(&common)?;
            let run_dir = output_root(&cfg).join(run);
            let data = load_data(&cfg)?;
            let train_set = TrainingSet::new(data.train.clone());
            let pseudo = match pseudo {
                Some(dir) => Some(load_pseudo_masks(&dir)?),
                None if cfg.mode.uses_pseudo_masks() => Some(build_pseudo_masks(&cfg, &train_set)?.1),
                None => None,
            };
            save_config(&cfg, &run_dir)?;
            let inputs = TrainInputs {
                train: &train_set,
                pseudo: pseudo.as_ref(),
                val: &data.val,
            };
            let out = train(&cfg, &inputs, &run_dir, resume)?;
            Ok(json!({
                "run_dir": run_dir,
                "checkpoint": out.checkpoint,
                "epochs": out.history.len(),
                "final": out.history.last(),
                "gt_reads": train_set.gt_reads(),
            }))
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg)?;
            let pairs = data.split(&split)?;
            let (model, epoch, _) = load_model(&cfg, &checkpoint)?;
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("eval_{split}"))
            });
            let pred = ModelPredictor::new(&model, cfg.readout.resolve(cfg.mode));
            let r = evaluate(&pred, pairs, cfg.metrics.beta_sq, cfg.metrics.threshold, Some(&out))?;
            Ok(json!({
                "split": split,
                "epoch": epoch,
                "pairs": r.n_pairs,
                "miou": r.miou,
                "fscore": r.fscore,
                "out": out,
            }))
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = load_config(&common)?;
            let axis = SweepAxis::parse(&axis)?;
            let values = if values.is_empty() {
                axis.default_values()
            } else {
                values
            };
            let data = load_data(&cfg)?;
            let out = output_root(&cfg).join(format!("sweep_{}", axis.name()));
            save_config(&cfg, &out)?;
            let r = sweep(&cfg, &data, axis, &values, None, &out)?;
            Ok(serde_json::to_value(&r)?)
        }
        Command::Plot { common, run } => {
            let cfg = load_config(&common)?;
            let run = run.unwrap_or_else(|| output_root(&cfg).join("run"));
            let files = plot_losses(&run)?;
            Ok(json!({ "files": files }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(v) => {
            // A closed pipe on stdout is not a failure of the command.
            let text = serde_json::to_string_pretty(&v).unwrap_or_else(|_| v.to_string());
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
