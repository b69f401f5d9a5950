use std::path::PathBuf;

use crate::autodiff::Graph;
use crate::data::{batches, Corpus};
use crate::error::{Error, Result};
use crate::importance::{FreezeMask, PathImportance};
use crate::model::TinyLm;
use crate::training::optimizer::{step_masked, OptimizerState};
use crate::training::penalty::{loss_with_penalty, PenaltyConfig};
use crate::training::strategy::Strategy;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub context: usize,
    /// Batch order for epoch `e` is shuffled with `seed + e`.
    pub seed: u64,
    /// Training stops before the next step once this file exists.
    pub stop_file: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 20,
            context: 32,
            seed: 0,
            stop_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Mean task loss over the epoch's batches, penalty excluded.
    pub mean_loss: f64,
    pub mean_penalty: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub interrupted: bool,
}

/// What the domain stage may touch.
#[derive(Debug, Clone, Copy)]
pub struct DomainPlan<'a> {
    pub strategy: Strategy,
    pub mask: Option<&'a FreezeMask>,
    pub penalty: Option<&'a PenaltyConfig>,
}

impl<'a> DomainPlan<'a> {
    pub fn new(strategy: Strategy) -> Self {
        DomainPlan {
            strategy,
            mask: None,
            penalty: None,
        }
    }

    pub fn with_mask(mut self, mask: &'a FreezeMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_penalty(mut self, penalty: &'a PenaltyConfig) -> Self {
        self.penalty = Some(penalty);
        self
    }

    /// Checks that `model` is in the state this strategy expects.
    pub fn validate(&self, model: &TinyLm) -> Result<()> {
        let s = self.strategy;
        let adapters = model.adapters();
        match s.scale_mode() {
            // selective trains whatever the importance was measured over,
            // base weights or adapters
            _ if s == Strategy::Selective => {}
            Some(mode) => {
                if adapters.is_empty() {
                    return Err(Error::Config(format!("strategy {s} needs attached LoRA adapters")));
                }
                if let Some(a) = adapters.iter().find(|a| a.scale_mode != mode) {
                    return Err(Error::Config(format!(
                        "strategy {s} expects {mode:?} adapters, {} has {:?}",
                        a.target, a.scale_mode
                    )));
                }
                if self.mask.is_some() {
                    return Err(Error::Config(format!("strategy {s} does not take a freeze mask")));
                }
            }
            None if !adapters.is_empty() => {
                return Err(Error::Config(format!("strategy {s} cannot run on a model with adapters")));
            }
            None => {}
        }
        match s {
            Strategy::EwcLora if self.penalty.is_none() => {
                Err(Error::Config("strategy ewclora needs a penalty".into()))
            }
            Strategy::Selective if self.mask.is_none() && self.penalty.is_none() => {
                Err(Error::Config("strategy selective needs a freeze mask or a penalty".into()))
            }
            Strategy::Base | Strategy::Full | Strategy::LoraMu | Strategy::LoraNuMu | Strategy::RsLora
                if self.penalty.is_some() =>
            {
                Err(Error::Config(format!("strategy {s} does not take a penalty")))
            }
            Strategy::Base | Strategy::Full if self.mask.is_some() => {
                Err(Error::Config(format!("strategy {s} does not take a freeze mask")))
            }
            _ => Ok(()),
        }
    }
}

struct Run<'a> {
    mask: Option<&'a FreezeMask>,
    penalty: Option<&'a PenaltyConfig>,
    path: Option<&'a mut PathImportance>,
}

fn run_epochs(
    model: &mut TinyLm,
    corpus: &Corpus,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    mut run: Run<'_>,
    mut on_epoch: impl FnMut(&EpochStats, &TinyLm) -> Result<()>,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if let Some(mask) = run.mask {
        mask.check_aligned(model.registry())?;
    }
    for epoch in 0..cfg.epochs {
        let epoch_batches = batches(corpus, cfg.batch_size, cfg.context, cfg.seed.wrapping_add(epoch as u64))?;
        if epoch_batches.is_empty() {
            return Err(Error::Data(format!(
                "corpus yields fewer samples than one batch of {}",
                cfg.batch_size
            )));
        }
        let (mut loss_sum, mut pen_sum) = (0.0, 0.0);
        for batch in &epoch_batches {
            if cfg.stop_file.as_ref().is_some_and(|p| p.exists()) {
                report.interrupted = true;
                return Ok(report);
            }
            let step = report.steps + 1;
            let mut g = Graph::new();
            let bound = model.bind(&mut g)?;
            let task = model.loss_graph(&mut g, &bound, batch)?;
            let (total, pen) = match run.penalty {
                Some(p) => {
                    let out = loss_with_penalty(&mut g, task, &bound, p)?;
                    (out.total, out.penalty)
                }
                None => (task, None),
            };
            let task_value = g.value(task).item();
            let pen_value = pen.map_or(0.0, |p| g.value(p).item());
            if !g.value(total).item().is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss became {}", g.value(total).item()),
                });
            }
            g.backward(total)?;
            let grads = bound.gradients(&g, model.registry());
            if !grads.all_finite() {
                return Err(Error::Training {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            let before = run.path.as_ref().map(|_| model.registry().snapshot_trainable());
            step_masked(model.registry_mut(), &grads, opt, run.mask)?;
            if let (Some(path), Some(before)) = (run.path.as_deref_mut(), before) {
                path.record_step(&grads, &before, model.registry())?;
            }
            loss_sum += task_value;
            pen_sum += pen_value;
            report.steps = step;
        }
        let n = epoch_batches.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            steps: epoch_batches.len(),
            mean_loss: loss_sum / n,
            mean_penalty: pen_sum / n,
        };
        on_epoch(&stats, model)?;
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Trains every trainable parameter on `corpus`. With `path` set, the
/// path-integral importance is accumulated along the way.
pub fn train_general(
    model: &mut TinyLm,
    corpus: &Corpus,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    path: Option<&mut PathImportance>,
    on_epoch: impl FnMut(&EpochStats, &TinyLm) -> Result<()>,
) -> Result<TrainReport> {
    run_epochs(
        model,
        corpus,
        cfg,
        opt,
        Run {
            mask: None,
            penalty: None,
            path,
        },
        on_epoch,
    )
}

/// Domain-stage training under `plan`. `Base` returns without touching the model.
pub fn train_domain(
    model: &mut TinyLm,
    corpus: &Corpus,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    plan: &DomainPlan<'_>,
    on_epoch: impl FnMut(&EpochStats, &TinyLm) -> Result<()>,
) -> Result<TrainReport> {
    plan.validate(model)?;
    if plan.strategy == Strategy::Base {
        return Ok(TrainReport::default());
    }
    run_epochs(
        model,
        corpus,
        cfg,
        opt,
        Run {
            mask: plan.mask,
            penalty: plan.penalty,
            path: None,
        },
        on_epoch,
    )
}
