//! The two-stage run: general training, importance, partition, domain
//! fine-tuning, final checkpoint and metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use selfreeze_core::data::{samples, Sample};
use selfreeze_core::importance::{
    fisher_diag, grad_importance, partition, EstimatorKind, FreezeMask, ImportanceMap, PathImportance,
};
use selfreeze_core::model::{encode_checkpoint, importance_section_len, save_checkpoint, LoraSpec, ScaleMode, TinyLm};
use selfreeze_core::training::{
    evaluate, train_domain, train_general, DomainPlan, EpochStats, OptimizerState, PenaltyConfig, Strategy,
    TrainConfig, TrainReport,
};
use selfreeze_core::Error;

use crate::config::{write_normalized, ExperimentConfig, ImportanceOver, SelectiveMode};
use crate::data::{sha256_hex, DataBundle};
use crate::error::{CliError, Result, StageExt};
use crate::metrics::{EvalPair, MetricsRecord, MetricsSink};

pub const GENERAL_CKPT: &str = "general.ckpt";
pub const ADAPTERS_GENERAL_CKPT: &str = "adapters_general.ckpt";
pub const IMPORTANCE_CKPT: &str = "importance.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const INTERRUPTED_CKPT: &str = "interrupted.ckpt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Data and initial weights shared by every strategy of one experiment.
pub struct Prepared {
    pub data: DataBundle,
    pub init: TinyLm,
    pub init_sha256: String,
    pub data_sha256: String,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = DataBundle::for_config(cfg).stage("data")?;
    let init = TinyLm::build(&cfg.model, cfg.seeds.model).stage("init")?;
    let init_sha256 = sha256_hex(&encode_checkpoint(&init, None, None).stage("init")?);
    let data_sha256 = data.fingerprint();
    Ok(Prepared {
        data,
        init,
        init_sha256,
        data_sha256,
    })
}

pub fn eval_pair(model: &TinyLm, data: &DataBundle) -> selfreeze_core::Result<EvalPair> {
    let ctx = model.config().context;
    fn items(v: &[selfreeze_core::data::ChoiceItem]) -> Option<&[selfreeze_core::data::ChoiceItem]> {
        (!v.is_empty()).then_some(v)
    }
    Ok(EvalPair {
        general: evaluate(model, &data.general.eval, items(&data.general_choices), ctx)?,
        domain: evaluate(model, &data.domain.eval, items(&data.domain_choices), ctx)?,
    })
}

/// Row emitter for one strategy label.
pub struct RunCtx<'a> {
    pub run_id: String,
    pub strategy: String,
    pub dir: PathBuf,
    pub sink: &'a mut MetricsSink,
    pub record_timing: bool,
    clock: Instant,
}

#[derive(Debug, Clone, Copy, Default)]
struct RowExtras {
    train_loss: Option<f64>,
    core_fraction: Option<f64>,
    importance_bytes: Option<usize>,
    peak_param_bytes: usize,
}

impl<'a> RunCtx<'a> {
    pub fn new(cfg: &ExperimentConfig, strategy: &str, dir: &Path, sink: &'a mut MetricsSink) -> Self {
        RunCtx {
            run_id: cfg.run_id.clone(),
            strategy: strategy.to_string(),
            dir: dir.to_path_buf(),
            sink,
            record_timing: cfg.output.record_timing,
            clock: Instant::now(),
        }
    }

    fn row(&mut self, stage: &str, epoch: usize, eval: &EvalPair, x: RowExtras) -> Result<()> {
        let wall_ms = self.record_timing.then(|| self.clock.elapsed().as_millis() as u64);
        self.sink.append(MetricsRecord {
            run_id: self.run_id.clone(),
            strategy: self.strategy.clone(),
            stage: stage.to_string(),
            epoch,
            train_loss: x.train_loss,
            general_ppl: eval.general.ppl,
            general_acc: eval.general.accuracy,
            domain_ppl: eval.domain.ppl,
            domain_acc: eval.domain.accuracy,
            core_fraction: x.core_fraction,
            wall_ms,
            peak_param_bytes: x.peak_param_bytes,
            importance_bytes: x.importance_bytes,
        })
    }
}

fn train_config(cfg: &ExperimentConfig, epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        context: cfg.model.context,
        seed,
        stop_file: cfg.output.stop_file.clone(),
    }
}

// Domain batches get their own seed stream so they never replay general ones.
const DOMAIN_SEED_OFFSET: u64 = 1_000_003;

/// Trains with per-epoch evaluation rows. Returns the report and the
/// largest parameter-plus-optimizer footprint seen.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    ctx: &mut RunCtx<'_>,
    stage: &'static str,
    model: &mut TinyLm,
    data: &DataBundle,
    opt: &mut OptimizerState,
    extras: RowExtras,
    train: impl FnOnce(
        &mut TinyLm,
        &mut OptimizerState,
        &mut dyn FnMut(&EpochStats, &TinyLm) -> selfreeze_core::Result<()>,
    ) -> selfreeze_core::Result<TrainReport>,
) -> Result<(TrainReport, usize)> {
    let mut rows = Vec::new();
    let mut on_epoch = |s: &EpochStats, m: &TinyLm| -> selfreeze_core::Result<()> {
        rows.push((s.epoch, s.mean_loss, eval_pair(m, data)?, m.param_bytes()));
        Ok(())
    };
    // rows are buffered per epoch and written right after training returns
    // or fails, so a failure still leaves every completed epoch on disk
    let result = train(model, opt, &mut on_epoch);
    let mut peak = model.param_bytes() + opt.state_bytes();
    for (epoch, loss, eval, _) in rows {
        peak = peak.max(model.param_bytes() + opt.state_bytes());
        ctx.row(
            stage,
            epoch,
            &eval,
            RowExtras {
                train_loss: Some(loss),
                peak_param_bytes: peak,
                ..extras
            },
        )?;
    }
    let report = result.stage(stage)?;
    Ok((report, peak))
}

pub struct GeneralOutcome {
    pub model: TinyLm,
    /// Path-integral scores over the general stage, when requested.
    pub path: Option<ImportanceMap>,
    pub eval: EvalPair,
    pub interrupted: bool,
    pub loaded: bool,
}

/// Stage 1: train (or load) the general model and write `general.ckpt`.
pub fn run_general(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    ctx: &mut RunCtx<'_>,
    record_path: bool,
) -> Result<GeneralOutcome> {
    if let Some(path) = &cfg.general.init_checkpoint {
        let ckpt = selfreeze_core::model::load_checkpoint(path).stage("general")?;
        ckpt.expect_config(&cfg.model).stage("general")?;
        if !ckpt.model.adapters().is_empty() {
            return Err(CliError::config("general.init_checkpoint must not carry adapters"));
        }
        let eval = eval_pair(&ckpt.model, &prep.data).stage("general")?;
        ctx.row(
            "general",
            0,
            &eval,
            RowExtras {
                peak_param_bytes: ckpt.model.param_bytes(),
                ..Default::default()
            },
        )?;
        save_checkpoint(&ctx.dir.join(GENERAL_CKPT), &ckpt.model, None, None).stage("general")?;
        return Ok(GeneralOutcome {
            model: ckpt.model,
            path: None,
            eval,
            interrupted: false,
            loaded: true,
        });
    }

    let mut model = prep.init.clone();
    let mut opt = OptimizerState::new(cfg.general_optimizer());
    let mut path = record_path.then(|| PathImportance::new(model.registry(), cfg.importance.damping));
    let tc = train_config(cfg, cfg.general.epochs, cfg.general.batch_size, cfg.seeds.train);
    let corpus = &prep.data.general.train;
    let (report, _) = run_stage(
        ctx,
        "general",
        &mut model,
        &prep.data,
        &mut opt,
        RowExtras::default(),
        |m, o, cb| train_general(m, corpus, &tc, o, path.as_mut(), cb),
    )?;
    if report.interrupted {
        save_checkpoint(&ctx.dir.join(INTERRUPTED_CKPT), &model, None, None).stage("general")?;
    } else {
        save_checkpoint(&ctx.dir.join(GENERAL_CKPT), &model, None, None).stage("general")?;
    }
    let eval = eval_pair(&model, &prep.data).stage("general")?;
    if cfg.general.epochs == 0 {
        ctx.row(
            "general",
            0,
            &eval,
            RowExtras {
                peak_param_bytes: model.param_bytes(),
                ..Default::default()
            },
        )?;
    }
    let path = match path {
        Some(p) if !report.interrupted && p.steps() > 0 => Some(p.finish(model.registry()).stage("importance")?),
        _ => None,
    };
    Ok(GeneralOutcome {
        model,
        path,
        eval,
        interrupted: report.interrupted,
        loaded: false,
    })
}

/// Whether the general stage must record path-integral scores for `cfg`.
pub fn needs_general_path(cfg: &ExperimentConfig) -> bool {
    cfg.strategy() == Strategy::Selective
        && cfg.importance.estimator == EstimatorKind::Path
        && cfg.importance.over == ImportanceOver::Base
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub run_id: String,
    pub strategy: Strategy,
    pub selective_mode: Option<SelectiveMode>,
    /// SHA-256 of the model the strategy started from.
    pub start_sha256: String,
    pub init_sha256: String,
    pub data_sha256: String,
    pub pre: EvalPair,
    pub post: EvalPair,
    pub delta_general_ppl: f64,
    pub core_fraction: Option<f64>,
    pub importance_bytes: Option<usize>,
    pub domain_steps: usize,
    pub interrupted: bool,
    /// Checkpoint file names, relative to the run directory.
    pub checkpoints: Vec<String>,
}

fn lora_spec(cfg: &ExperimentConfig, mode: ScaleMode) -> LoraSpec {
    LoraSpec {
        targets: cfg.lora_targets(),
        rank: cfg.domain.lora.rank,
        alpha: cfg.domain.lora.alpha,
        scale_mode: mode,
        seed: cfg.seeds.lora,
    }
}

fn estimate(
    cfg: &ExperimentConfig,
    model: &TinyLm,
    general_samples: &[Sample],
    path: Option<&ImportanceMap>,
) -> selfreeze_core::Result<ImportanceMap> {
    let n = cfg.importance.max_samples;
    match cfg.importance.estimator {
        EstimatorKind::Gradient => grad_importance(model, general_samples, n),
        EstimatorKind::Fisher => fisher_diag(model, general_samples, n),
        EstimatorKind::Path => path.cloned().ok_or_else(|| {
            Error::Config("path importance needs a trained general stage; it cannot come from a loaded checkpoint".into())
        }),
    }
}

/// Stage 2 for one strategy, starting from the general outcome. Writes
/// its checkpoints under `ctx.dir`.
pub fn run_strategy(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    general: &GeneralOutcome,
    ctx: &mut RunCtx<'_>,
) -> Result<StrategyOutcome> {
    let strategy = cfg.strategy();
    let data = &prep.data;
    let mut model = general.model.clone();
    let start_sha256 = sha256_hex(&encode_checkpoint(&model, None, None).stage("domain")?);
    let general_samples = samples(&data.general.train, cfg.model.context).stage("importance")?;
    let mut checkpoints = Vec::new();
    let mut imap: Option<ImportanceMap> = None;
    let mut mask: Option<FreezeMask> = None;
    let mut penalty: Option<PenaltyConfig> = None;
    let mut extras = RowExtras::default();
    let mut interrupted = false;
    let nu_cfg = train_config(cfg, cfg.general.epochs, cfg.general.batch_size, cfg.seeds.train);

    // adapter general pass, shared by lora_nu_mu and importance over adapters
    let adapter_general_pass = |model: &mut TinyLm,
                                    ctx: &mut RunCtx<'_>,
                                    path: Option<&mut PathImportance>|
     -> Result<bool> {
        let mut opt = OptimizerState::new(cfg.domain_optimizer());
        let corpus = &data.general.train;
        let (report, _) = run_stage(ctx, "general_adapters", model, data, &mut opt, RowExtras::default(), |m, o, cb| {
            train_general(m, corpus, &nu_cfg, o, path, cb)
        })?;
        save_checkpoint(&ctx.dir.join(ADAPTERS_GENERAL_CKPT), model, None, None).stage("general_adapters")?;
        Ok(report.interrupted)
    };

    match strategy {
        Strategy::Base | Strategy::Full => {}
        Strategy::LoraMu | Strategy::EwcLora => model.attach_lora(&lora_spec(cfg, ScaleMode::Standard)).stage("domain")?,
        Strategy::RsLora => model
            .attach_lora(&lora_spec(cfg, ScaleMode::RankStabilized))
            .stage("domain")?,
        Strategy::LoraNuMu => {
            model.attach_lora(&lora_spec(cfg, ScaleMode::Standard)).stage("domain")?;
            interrupted = adapter_general_pass(&mut model, ctx, None)?;
            checkpoints.push(ADAPTERS_GENERAL_CKPT.to_string());
        }
        Strategy::Selective => {
            let path = match cfg.importance.over {
                ImportanceOver::Base => general.path.clone(),
                ImportanceOver::Adapters => {
                    model.attach_lora(&lora_spec(cfg, ScaleMode::Standard)).stage("importance")?;
                    let mut path = (cfg.importance.estimator == EstimatorKind::Path)
                        .then(|| PathImportance::new(model.registry(), cfg.importance.damping));
                    interrupted = adapter_general_pass(&mut model, ctx, path.as_mut())?;
                    checkpoints.push(ADAPTERS_GENERAL_CKPT.to_string());
                    match path {
                        Some(p) if !interrupted => Some(p.finish(model.registry()).stage("importance")?),
                        _ => None,
                    }
                }
            };
            if !interrupted {
                let raw = estimate(cfg, &model, &general_samples, path.as_ref()).stage("importance")?;
                let scores = raw
                    .aggregate(model.registry(), cfg.importance.granularity)
                    .stage("importance")?;
                let m = partition(&scores, cfg.criterion()).stage("partition")?;
                extras.core_fraction = Some(m.core_fraction());
                extras.importance_bytes = Some(importance_section_len(&scores));
                save_checkpoint(&ctx.dir.join(IMPORTANCE_CKPT), &model, Some(&scores), Some(&m)).stage("partition")?;
                checkpoints.push(IMPORTANCE_CKPT.to_string());
                let eval = eval_pair(&model, data).stage("importance")?;
                ctx.row(
                    "importance",
                    0,
                    &eval,
                    RowExtras {
                        peak_param_bytes: model.param_bytes(),
                        ..extras
                    },
                )?;
                let mode = cfg.domain.selective_mode;
                if mode != SelectiveMode::Hard {
                    let ids: Vec<String> = model.registry().trainable().map(|(id, _)| id.to_string()).collect();
                    penalty = Some(
                        PenaltyConfig::anchored(cfg.domain.soft_lambda, &model, &ids, &scores).stage("domain")?,
                    );
                }
                if mode != SelectiveMode::Soft {
                    mask = Some(m);
                }
                imap = Some(scores);
            }
        }
    }
    if strategy == Strategy::EwcLora {
        let fisher = fisher_diag(&general.model, &general_samples, cfg.importance.max_samples).stage("domain")?;
        penalty = Some(
            PenaltyConfig::anchored(cfg.domain.ewc_lambda, &general.model, &cfg.lora_targets(), &fisher)
                .stage("domain")?,
        );
    }

    let mut domain_steps = 0;
    if !interrupted {
        let mut plan = DomainPlan::new(strategy);
        if let Some(m) = &mask {
            plan = plan.with_mask(m);
        }
        if let Some(p) = &penalty {
            plan = plan.with_penalty(p);
        }
        if strategy == Strategy::Base {
            plan.validate(&model).stage("domain")?;
            let eval = eval_pair(&model, data).stage("domain")?;
            ctx.row(
                "domain",
                0,
                &eval,
                RowExtras {
                    peak_param_bytes: model.param_bytes(),
                    ..extras
                },
            )?;
        } else {
            let mut opt = OptimizerState::new(cfg.domain_optimizer());
            let tc = train_config(
                cfg,
                cfg.domain.epochs,
                cfg.domain.batch_size,
                cfg.seeds.train.wrapping_add(DOMAIN_SEED_OFFSET),
            );
            let corpus = &data.domain.train;
            let (report, _) = run_stage(ctx, "domain", &mut model, data, &mut opt, extras, |m, o, cb| {
                train_domain(m, corpus, &tc, o, &plan, cb)
            })?;
            domain_steps = report.steps;
            interrupted = report.interrupted;
        }
    }

    if interrupted {
        save_checkpoint(&ctx.dir.join(INTERRUPTED_CKPT), &model, imap.as_ref(), mask.as_ref()).stage("domain")?;
        checkpoints.push(INTERRUPTED_CKPT.to_string());
    } else {
        save_checkpoint(&ctx.dir.join(FINAL_CKPT), &model, imap.as_ref(), mask.as_ref()).stage("final")?;
        checkpoints.push(FINAL_CKPT.to_string());
    }
    let post = eval_pair(&model, data).stage("final")?;
    if !interrupted {
        ctx.row(
            "final",
            0,
            &post,
            RowExtras {
                peak_param_bytes: model.param_bytes(),
                ..extras
            },
        )?;
    }
    Ok(StrategyOutcome {
        run_id: cfg.run_id.clone(),
        strategy,
        selective_mode: (strategy == Strategy::Selective).then_some(cfg.domain.selective_mode),
        start_sha256,
        init_sha256: prep.init_sha256.clone(),
        data_sha256: prep.data_sha256.clone(),
        pre: general.eval,
        post,
        delta_general_ppl: post.general.ppl - general.eval.general.ppl,
        core_fraction: extras.core_fraction,
        importance_bytes: extras.importance_bytes,
        domain_steps,
        interrupted,
        checkpoints,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn render_outcome(o: &StrategyOutcome) -> String {
    let mut s = String::new();
    s.push_str(&format!("run {}  strategy {}", o.run_id, o.strategy));
    if let Some(m) = o.selective_mode {
        s.push_str(&format!("  mode {m:?}").to_lowercase());
    }
    s.push('\n');
    s.push_str(&format!(
        "{:<12} {:>12} {:>12} {:>12} {:>12}\n",
        "", "general_ppl", "general_acc", "domain_ppl", "domain_acc"
    ));
    for (label, e) in [("pre-domain", &o.pre), ("final", &o.post)] {
        s.push_str(&format!(
            "{label:<12} {:>12.4} {:>12} {:>12.4} {:>12}\n",
            e.general.ppl,
            fmt_opt(e.general.accuracy),
            e.domain.ppl,
            fmt_opt(e.domain.accuracy)
        ));
    }
    s.push_str(&format!("delta_general_ppl {:.4}\n", o.delta_general_ppl));
    if let Some(f) = o.core_fraction {
        s.push_str(&format!("core_fraction {f:.6}\n"));
    }
    if let Some(b) = o.importance_bytes {
        s.push_str(&format!("importance_bytes {b}\n"));
    }
    s.push_str(&format!("domain_steps {}\n", o.domain_steps));
    if o.interrupted {
        s.push_str("interrupted: yes\n");
    }
    s
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Runs the whole two-stage procedure for `cfg.domain.strategy` into
/// `cfg.output.dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<StrategyOutcome> {
    let dir = cfg.out_dir();
    write_normalized(cfg, &dir)?;
    let mut sink = MetricsSink::create(&dir)?;
    let strategy = cfg.strategy();
    let mut ctx = RunCtx::new(cfg, strategy.as_str(), &dir, &mut sink);
    let prep = prepare(cfg)?;
    let general = run_general(cfg, &prep, &mut ctx, needs_general_path(cfg))?;
    let outcome = if general.interrupted {
        StrategyOutcome {
            run_id: cfg.run_id.clone(),
            strategy,
            selective_mode: None,
            start_sha256: String::new(),
            init_sha256: prep.init_sha256.clone(),
            data_sha256: prep.data_sha256.clone(),
            pre: general.eval,
            post: general.eval,
            delta_general_ppl: 0.0,
            core_fraction: None,
            importance_bytes: None,
            domain_steps: 0,
            interrupted: true,
            checkpoints: vec![INTERRUPTED_CKPT.to_string()],
        }
    } else {
        let mut o = run_strategy(cfg, &prep, &general, &mut ctx)?;
        o.checkpoints.insert(0, GENERAL_CKPT.to_string());
        o
    };
    write_json(&dir.join(REPORT_JSON), &outcome)?;
    write_text(&dir.join(REPORT_TXT), &render_outcome(&outcome))?;
    Ok(outcome)
}
