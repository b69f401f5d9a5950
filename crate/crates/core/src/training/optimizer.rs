use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::FreezeMask;
use crate::model::{Gradients, ParameterRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping over the updated scalars; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 8e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..Default::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer hyperparameters plus per-scalar Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments of `id`, if Adam has touched it.
    pub fn moments(&self, id: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(id).map(|m| (m.m.as_slice(), m.v.as_slice()))
    }

    /// Bytes held by optimizer state.
    pub fn state_bytes(&self) -> usize {
        self.moments.values().map(|m| (m.m.len() + m.v.len()) * 8).sum()
    }
}

/// One optimizer step over the trainable entries of `registry`.
///
/// Scalars marked frozen by `mask` are skipped outright: their values and
/// their Adam moments are left bit-for-bit as they were, and their gradients
/// do not enter the clipping norm. The step counter advances once per call.
pub fn step_masked(
    registry: &mut ParameterRegistry,
    grads: &Gradients,
    opt: &mut OptimizerState,
    mask: Option<&FreezeMask>,
) -> Result<()> {
    if let Some(mask) = mask {
        mask.check_aligned(registry)?;
    }
    let trainable = registry.trainable().count();
    if grads.len() != trainable {
        return Err(Error::Contract(format!(
            "gradients cover {} parameters, registry has {trainable} trainable",
            grads.len()
        )));
    }
    for (id, t) in registry.trainable() {
        match grads.get(id) {
            Some(g) if g.len() == t.numel() => {}
            _ => return Err(Error::Contract(format!("gradient for {id} missing or misshaped"))),
        }
    }

    let frozen_at = |id: &str, i: usize| mask.and_then(|m| m.get(id)).is_some_and(|f| f[i]);

    let clip = match opt.config.clip_norm {
        Some(max_norm) => {
            let sq: f64 = grads
                .iter()
                .flat_map(|(id, g)| g.iter().enumerate().filter(move |(i, _)| !frozen_at(id, *i)))
                .map(|(_, x)| x * x)
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    opt.step += 1;
    let cfg = opt.config;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (id, tensor) in registry.iter_mut() {
        if !tensor.requires_grad() {
            continue;
        }
        let g = grads.get(id).expect("checked above");
        let frozen = mask.and_then(|m| m.get(id));
        let w = tensor.data_mut();
        match cfg.kind {
            OptimizerKind::Sgd => {
                for i in 0..w.len() {
                    if frozen.is_some_and(|f| f[i]) {
                        continue;
                    }
                    w[i] -= cfg.lr * g[i] * clip;
                }
            }
            OptimizerKind::Adam => {
                let mom = opt.moments.entry(id.to_string()).or_insert_with(|| Moments {
                    m: vec![0.0; w.len()],
                    v: vec![0.0; w.len()],
                });
                for i in 0..w.len() {
                    if frozen.is_some_and(|f| f[i]) {
                        continue;
                    }
                    let gi = g[i] * clip;
                    mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi;
                    mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi;
                    let m_hat = mom.m[i] / bc1;
                    let v_hat = mom.v[i] / bc2;
                    w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}
