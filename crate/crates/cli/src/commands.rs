//! Subcommand definitions and their handlers.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use selfreeze_core::importance::{
    fisher_diag, grad_importance, importance_rows, importance_summary, partition, EstimatorKind, Granularity,
    PartitionCriterion,
};
use selfreeze_core::model::{load_checkpoint, save_checkpoint, TinyLm};
use selfreeze_core::data::samples;
use selfreeze_core::Error;

use crate::config::{load_config, write_normalized, ExperimentConfig};
use crate::cost;
use crate::data::DataBundle;
use crate::error::{CliError, Result, StageExt};
use crate::matrix::{render_matrix, run_matrix};
use crate::pipeline::{eval_pair, render_outcome, run_pipeline, write_json};

const CONFIG_HELP: &str = "\
Config keys (TOML; every key optional except domain.strategy):
  run_id                       output label, [A-Za-z0-9_.-]            (run)
  [seeds] model data train lora                                 (7 1 11 3)
  [model] vocab_size embed_dim depth window hidden context (16 8 1 4 48 32)
  [data]  dir general_size domain_size skew choice_items  (- 2000 1000 0.7 200)
  [data.synthetic] alphabet seq_len prompt_len continuation_len ...
  [general] epochs lr batch_size optimizer clip_norm init_checkpoint
                                                   (5 0.01 20 adam - -)
  [importance] estimator(gradient|fisher|path) rho|threshold
               granularity(scalar|row|tensor) over(base|adapters)
               max_samples damping                  (gradient 0.1 scalar base 500 1e-3)
  [domain] strategy(base|full|lora_mu|lora_nu_mu|ewclora|rslora|selective)
           epochs lr batch_size optimizer clip_norm
           selective_mode(hard|soft|both) soft_lambda ewc_lambda
                                                   (5 8e-4 20 adam - hard 1 10)
  [domain.lora] rank alpha targets                  (8 32 fc1/fc2 weights)
  [matrix] strategies parallel                      (all false)
  [output] dir record_timing stop_file              (runs/<run_id> false -)
Relative paths are resolved against the config file's directory.

Exit codes: 0 ok, 2 config, 3 data, 4 training divergence, 5 checkpoint, 1 other.";

#[derive(Debug, Parser)]
#[command(name = "selfreeze", version, about = "Importance-guided selective fine-tuning of a tiny language model", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a config, printing the normalised form.
    Validate(ConfigArg),
    /// Write the synthetic corpora and choice items to a directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the general model only; writes general.ckpt to the output dir.
    TrainGeneral(ConfigArg),
    /// Score a checkpoint's trainable scalars on the general task.
    EstimateImportance {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint to write, carrying the model and its scores.
        #[arg(long)]
        out: PathBuf,
        /// Overrides importance.estimator (gradient or fisher).
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Split scored scalars into core and non-core.
    Partition {
        /// Checkpoint holding importance scores.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "threshold")]
        rho: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Checkpoint to write, with the mask added.
        #[arg(long)]
        out: PathBuf,
    },
    /// Domain stage from an existing general checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        general: PathBuf,
    },
    /// Evaluate a checkpoint on both tasks and print JSON.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// General stage, importance, partition and domain stage for one strategy.
    Pipeline(ConfigArg),
    /// Several strategies from one shared general stage.
    Matrix {
        /// One config expanded over matrix.strategies, or one config per strategy.
        #[arg(long, short, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
    },
    /// Time the gradient and Fisher estimators and report importance storage.
    Cost {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Model to score; a fresh model from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Defaults to the config's output dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<TinyLm> {
    let ckpt = load_checkpoint(path).stage("load")?;
    ckpt.expect_config(&cfg.model).stage("load")?;
    Ok(ckpt.model)
}

/// Runs `cmd`, returning what to print on stdout.
pub fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Validate(a) => load_config(&a.config)?.to_toml(),
        Command::GenData { cfg, out } => {
            let cfg = load_config(&cfg.config)?;
            let data = DataBundle::for_config(&cfg).stage("data")?;
            data.write_dir(&out).stage("data")?;
            Ok(format!("wrote data to {} (sha256 {})\n", out.display(), data.fingerprint()))
        }
        Command::TrainGeneral(a) => {
            let cfg = load_config(&a.config)?;
            let dir = cfg.out_dir();
            write_normalized(&cfg, &dir)?;
            let prep = crate::pipeline::prepare(&cfg)?;
            let mut sink = crate::metrics::MetricsSink::create(&dir)?;
            let mut ctx = crate::pipeline::RunCtx::new(&cfg, "general", &dir, &mut sink);
            let g = crate::pipeline::run_general(&cfg, &prep, &mut ctx, false)?;
            let mut out = format!(
                "general_ppl {:.4}\ndomain_ppl {:.4}\n",
                g.eval.general.ppl, g.eval.domain.ppl
            );
            if g.interrupted {
                out.push_str("interrupted: yes\n");
            }
            Ok(out)
        }
        Command::EstimateImportance {
            cfg,
            checkpoint,
            out,
            estimator,
        } => {
            let cfg = load_config(&cfg.config)?;
            let kind = match estimator.as_deref() {
                None => cfg.importance.estimator,
                Some("gradient") => EstimatorKind::Gradient,
                Some("fisher") => EstimatorKind::Fisher,
                Some(other) => {
                    return Err(CliError::config(format!(
                        "--estimator must be gradient or fisher, got {other:?}"
                    )))
                }
            };
            let model = load_model(&cfg, &checkpoint)?;
            let data = DataBundle::for_config(&cfg).stage("data")?;
            let s = samples(&data.general.train, cfg.model.context).stage("importance")?;
            let n = cfg.importance.max_samples;
            let raw = match kind {
                EstimatorKind::Gradient => grad_importance(&model, &s, n),
                EstimatorKind::Fisher => fisher_diag(&model, &s, n),
                EstimatorKind::Path => Err(Error::Config(
                    "path importance is only available inside pipeline and matrix runs".into(),
                )),
            }
            .stage("importance")?;
            let imap = raw
                .aggregate(model.registry(), cfg.importance.granularity)
                .stage("importance")?;
            save_checkpoint(&out, &model, Some(&imap), None).stage("importance")?;
            let summary = importance_summary(&imap).stage("importance")?;
            let stem = out.with_extension("");
            write_json(&stem.with_extension("summary.json"), &summary)?;
            if cfg.importance.granularity != Granularity::Tensor {
                let rows = importance_rows(&imap, model.registry()).stage("importance")?;
                let path = stem.with_extension("scores.csv");
                let mut w = csv::Writer::from_path(&path)?;
                for r in rows {
                    w.serialize(r)?;
                }
                w.flush().map_err(|e| CliError::io(&path, e))?;
            }
            Ok(format!(
                "scored {} scalars over {} samples; wrote {}\n",
                imap.total_scalars(),
                imap.sample_count(),
                out.display()
            ))
        }
        Command::Partition {
            checkpoint,
            rho,
            threshold,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint).stage("partition")?;
            let imap = ckpt
                .importance
                .as_ref()
                .ok_or_else(|| Error::Checkpoint(format!("{} has no importance scores", checkpoint.display())))
                .stage("partition")?;
            let criterion = match (rho, threshold) {
                (_, Some(t)) => PartitionCriterion::Threshold(t),
                (r, None) => PartitionCriterion::TopFraction(r.unwrap_or(0.1)),
            };
            let mask = partition(imap, criterion).stage("partition")?;
            save_checkpoint(&out, &ckpt.model, Some(imap), Some(&mask)).stage("partition")?;
            Ok(format!(
                "threshold {:e}\ncore {} of {} scalars ({:.6})\n",
                mask.threshold(),
                mask.core_count(),
                mask.total(),
                mask.core_fraction()
            ))
        }
        Command::Finetune { cfg, general } => {
            let mut cfg = load_config(&cfg.config)?;
            cfg.general.init_checkpoint = Some(general);
            Ok(render_outcome(&run_pipeline(&cfg)?))
        }
        Command::Eval { cfg, checkpoint } => {
            let cfg = load_config(&cfg.config)?;
            let model = load_model(&cfg, &checkpoint)?;
            let data = DataBundle::for_config(&cfg).stage("data")?;
            let pair = eval_pair(&model, &data).stage("eval")?;
            Ok(serde_json::to_string_pretty(&pair)? + "\n")
        }
        Command::Pipeline(a) => Ok(render_outcome(&run_pipeline(&load_config(&a.config)?)?)),
        Command::Matrix { config } => {
            let configs = config.iter().map(|p| load_config(p)).collect::<Result<Vec<_>>>()?;
            Ok(render_matrix(&run_matrix(configs)?))
        }
        Command::Cost {
            cfg,
            checkpoint,
            samples,
            out,
        } => {
            let cfg = load_config(&cfg.config)?;
            let model = match &checkpoint {
                Some(p) => load_model(&cfg, p)?,
                None => TinyLm::build(&cfg.model, cfg.seeds.model).stage("cost")?,
            };
            let data = DataBundle::for_config(&cfg).stage("data")?;
            let report = cost::measure(&model, &data, samples)?;
            cost::write(&out.unwrap_or_else(|| cfg.out_dir()), &report)?;
            Ok(cost::render(&report))
        }
    }
}
