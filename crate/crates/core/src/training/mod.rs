//! Masked optimisation, anchoring penalties, training loops and evaluation.

mod eval;
mod loops;
mod optimizer;
mod penalty;
mod strategy;

pub use eval::{candidate_losses, choice_accuracy, evaluate, perplexity, EvalResult};
pub use loops::{train_domain, train_general, DomainPlan, EpochStats, TrainConfig, TrainReport};
pub use optimizer::{step_masked, OptimizerConfig, OptimizerKind, OptimizerState};
pub use penalty::{loss_with_penalty, PenalizedLoss, PenaltyConfig};
pub use strategy::Strategy;
