use std::slice;

use indexmap::IndexMap;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::importance::{EstimatorKind, ImportanceMap};
use crate::model::{Gradients, ParameterRegistry, TinyLm};

/// SI damping ξ in the displacement normaliser.
pub const DEFAULT_SI_DAMPING: f64 = 1e-3;

fn accumulate<S>(
    kind: EstimatorKind,
    registry: &ParameterRegistry,
    samples: impl IntoIterator<Item = S>,
    max_samples: usize,
    mut per_sample: impl FnMut(&S) -> Result<Gradients>,
    transform: fn(f64) -> f64,
) -> Result<ImportanceMap> {
    if max_samples == 0 {
        return Err(Error::Data("importance estimation needs max_samples >= 1".into()));
    }
    let mut sums: IndexMap<String, Vec<f64>> = registry
        .trainable()
        .map(|(id, t)| (id.to_string(), vec![0.0; t.numel()]))
        .collect();
    let mut count = 0u64;
    for sample in samples.into_iter().take(max_samples) {
        let grads = per_sample(&sample)?;
        if grads.len() != sums.len() {
            return Err(Error::Contract(format!(
                "sample gradients cover {} parameters, expected {}",
                grads.len(),
                sums.len()
            )));
        }
        for (id, acc) in sums.iter_mut() {
            let g = grads
                .get(id)
                .filter(|g| g.len() == acc.len())
                .ok_or_else(|| Error::Contract(format!("sample gradient for {id} missing or misshaped")))?;
            acc.iter_mut().zip(g).for_each(|(a, g)| *a += transform(*g));
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("importance sample stream is empty".into()));
    }
    let n = count as f64;
    sums.values_mut().flatten().for_each(|x| *x /= n);
    ImportanceMap::new(kind, count, sums)
}

/// `I_i = (1/S) Σ_s |∂ℓ_s/∂w_i|`, one gradient evaluation per sample.
///
/// `per_sample` must return gradients for exactly the trainable entries of
/// `registry`; parameters are not modified.
pub fn accumulate_grad_importance<S>(
    registry: &ParameterRegistry,
    samples: impl IntoIterator<Item = S>,
    max_samples: usize,
    per_sample: impl FnMut(&S) -> Result<Gradients>,
) -> Result<ImportanceMap> {
    accumulate(EstimatorKind::Gradient, registry, samples, max_samples, per_sample, f64::abs)
}

/// Empirical diagonal Fisher `F_i = (1/S) Σ_s (∂ℓ_s/∂w_i)²` with observed labels.
pub fn accumulate_fisher_diag<S>(
    registry: &ParameterRegistry,
    samples: impl IntoIterator<Item = S>,
    max_samples: usize,
    per_sample: impl FnMut(&S) -> Result<Gradients>,
) -> Result<ImportanceMap> {
    accumulate(EstimatorKind::Fisher, registry, samples, max_samples, per_sample, |g| g * g)
}

/// Gradient-magnitude importance of `model`'s trainable parameters.
pub fn grad_importance<'a>(
    model: &TinyLm,
    samples: impl IntoIterator<Item = &'a Sample>,
    max_samples: usize,
) -> Result<ImportanceMap> {
    accumulate_grad_importance(model.registry(), samples, max_samples, |s| {
        model.loss_and_grads(slice::from_ref(*s)).map(|(_, g)| g)
    })
}

pub fn fisher_diag<'a>(
    model: &TinyLm,
    samples: impl IntoIterator<Item = &'a Sample>,
    max_samples: usize,
) -> Result<ImportanceMap> {
    accumulate_fisher_diag(model.registry(), samples, max_samples, |s| {
        model.loss_and_grads(slice::from_ref(*s)).map(|(_, g)| g)
    })
}

/// Online synaptic-intelligence accumulator, fed once per optimizer step.
///
/// Keeps `Σ_t −g_i(t)·Δw_i(t)` per scalar. [`PathImportance::finish`] clamps
/// that sum at zero and divides by `(w_i(end) − w_i(start))² + ξ`.
#[derive(Debug, Clone)]
pub struct PathImportance {
    start: IndexMap<String, Vec<f64>>,
    raw: IndexMap<String, Vec<f64>>,
    damping: f64,
    steps: u64,
}

impl PathImportance {
    pub fn new(registry: &ParameterRegistry, damping: f64) -> Self {
        let start = registry.snapshot_trainable();
        let raw = start.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
        PathImportance {
            start,
            raw,
            damping,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Unnormalised path integral so far.
    pub fn raw(&self) -> &IndexMap<String, Vec<f64>> {
        &self.raw
    }

    /// Adds one step: `grads` drove the update from `before` to `after`.
    pub fn record_step(
        &mut self,
        grads: &Gradients,
        before: &IndexMap<String, Vec<f64>>,
        after: &ParameterRegistry,
    ) -> Result<()> {
        if before.len() != self.raw.len() || grads.len() != self.raw.len() {
            return Err(Error::Contract("path importance hook given a mismatched registry".into()));
        }
        for (id, acc) in self.raw.iter_mut() {
            let (Some(g), Some(w0), Some(w1)) = (grads.get(id), before.get(id), after.get(id)) else {
                return Err(Error::Contract(format!("path importance hook missing {id}")));
            };
            if g.len() != acc.len() || w0.len() != acc.len() || w1.numel() != acc.len() {
                return Err(Error::Contract(format!("path importance hook misshaped at {id}")));
            }
            for (((a, g), w0), w1) in acc.iter_mut().zip(g).zip(w0).zip(w1.data()) {
                *a -= g * (w1 - w0);
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn finish(&self, registry: &ParameterRegistry) -> Result<ImportanceMap> {
        if self.steps == 0 {
            return Err(Error::Data("path importance recorded no steps".into()));
        }
        let mut out = IndexMap::new();
        for (id, raw) in &self.raw {
            let end = registry
                .get(id)
                .ok_or_else(|| Error::Contract(format!("path importance: {id} left the registry")))?;
            let start = &self.start[id];
            let scores = raw
                .iter()
                .zip(start)
                .zip(end.data())
                .map(|((r, s), e)| r.max(0.0) / ((e - s).powi(2) + self.damping))
                .collect();
            out.insert(id.clone(), scores);
        }
        ImportanceMap::new(EstimatorKind::Path, self.steps, out)
    }
}
