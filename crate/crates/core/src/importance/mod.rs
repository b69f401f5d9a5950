//! Per-parameter importance scores and the core/non-core split they induce.
//!
//! Three estimators share one map type:
//!
//! * gradient magnitude, the mean over samples of `|∂ℓ/∂w_i|`, each sample
//!   differentiated on its own so signs never cancel across a batch;
//! * empirical diagonal Fisher, the mean of `(∂ℓ/∂w_i)²`;
//! * path integral (synaptic intelligence), accumulated from optimizer steps.
//!
//! A [`FreezeMask`] marks every scalar with score `>= θ` as core.

mod estimators;
mod partition;
mod summary;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterRegistry;

pub use estimators::{
    accumulate_fisher_diag, accumulate_grad_importance, fisher_diag, grad_importance, PathImportance,
    DEFAULT_SI_DAMPING,
};
pub use partition::{partition, top_fraction_threshold, PartitionCriterion};
pub use summary::{importance_rows, importance_summary, Histogram, ImportanceSummary, LayerStats, ScoreRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Gradient,
    Fisher,
    Path,
}

impl EstimatorKind {
    pub fn code(self) -> u8 {
        match self {
            EstimatorKind::Gradient => 0,
            EstimatorKind::Fisher => 1,
            EstimatorKind::Path => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EstimatorKind::Gradient),
            1 => Some(EstimatorKind::Fisher),
            2 => Some(EstimatorKind::Path),
            _ => None,
        }
    }
}

/// Score aggregation level. Scalar is the default; the coarser modes replace
/// each score by the mean over its row or its whole tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Scalar,
    Row,
    Tensor,
}

/// Nonnegative score per scalar, keyed by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    kind: EstimatorKind,
    sample_count: u64,
    scores: IndexMap<String, Vec<f64>>,
}

impl ImportanceMap {
    pub fn new(
        kind: EstimatorKind,
        sample_count: u64,
        scores: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::Data("importance map built from zero samples".into()));
        }
        let scores: IndexMap<String, Vec<f64>> = scores.into_iter().collect();
        for (id, s) in &scores {
            if let Some(bad) = s.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::Contract(format!("importance score {bad} for {id} is not a finite nonnegative")));
            }
        }
        Ok(ImportanceMap {
            kind,
            sample_count,
            scores,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.scores.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.scores.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.scores.values().map(Vec::len).sum()
    }

    pub fn all_scores(&self) -> Vec<f64> {
        self.scores.values().flatten().copied().collect()
    }

    /// The map must cover exactly the trainable entries of `registry`.
    pub fn check_aligned(&self, registry: &ParameterRegistry) -> Result<()> {
        check_alignment("importance map", self.scores.iter().map(|(k, v)| (k.as_str(), v.len())), registry)
    }

    /// Coarsens scores to per-row or per-tensor means.
    pub fn aggregate(&self, registry: &ParameterRegistry, granularity: Granularity) -> Result<ImportanceMap> {
        let mut out = IndexMap::new();
        for (id, scores) in &self.scores {
            let tensor = registry
                .get(id)
                .ok_or_else(|| Error::Contract(format!("importance entry {id} not in registry")))?;
            let chunk = match (granularity, tensor.dims2()) {
                (Granularity::Scalar, _) => 1,
                (Granularity::Row, Some((_, cols))) => cols,
                _ => scores.len(),
            };
            let agg = scores
                .chunks(chunk)
                .flat_map(|c| {
                    let mean = c.iter().sum::<f64>() / c.len() as f64;
                    std::iter::repeat_n(mean, c.len())
                })
                .collect();
            out.insert(id.clone(), agg);
        }
        ImportanceMap::new(self.kind, self.sample_count, out)
    }
}

/// Boolean split of the scored scalars; `true` is core (frozen).
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    threshold: f64,
    core_fraction: f64,
    frozen: IndexMap<String, Vec<bool>>,
}

impl FreezeMask {
    pub fn new(threshold: f64, frozen: impl IntoIterator<Item = (String, Vec<bool>)>) -> Self {
        let frozen: IndexMap<String, Vec<bool>> = frozen.into_iter().collect();
        let total: usize = frozen.values().map(Vec::len).sum();
        let core: usize = frozen.values().flatten().filter(|b| **b).count();
        let core_fraction = if total == 0 { 0.0 } else { core as f64 / total as f64 };
        FreezeMask {
            threshold,
            core_fraction,
            frozen,
        }
    }

    /// Uniform mask over the trainable entries of `registry`.
    pub fn uniform(registry: &ParameterRegistry, frozen: bool) -> Self {
        let threshold = if frozen { f64::NEG_INFINITY } else { f64::INFINITY };
        FreezeMask::new(
            threshold,
            registry
                .trainable()
                .map(|(id, t)| (id.to_string(), vec![frozen; t.numel()])),
        )
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn core_fraction(&self) -> f64 {
        self.core_fraction
    }

    pub fn get(&self, id: &str) -> Option<&[bool]> {
        self.frozen.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.frozen.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn total(&self) -> usize {
        self.frozen.values().map(Vec::len).sum()
    }

    pub fn core_count(&self) -> usize {
        self.frozen.values().flatten().filter(|b| **b).count()
    }

    pub fn check_aligned(&self, registry: &ParameterRegistry) -> Result<()> {
        check_alignment("freeze mask", self.frozen.iter().map(|(k, v)| (k.as_str(), v.len())), registry)
    }
}

fn check_alignment<'a>(
    what: &str,
    entries: impl Iterator<Item = (&'a str, usize)>,
    registry: &ParameterRegistry,
) -> Result<()> {
    let mut seen = 0;
    for (id, len) in entries {
        let tensor = registry
            .get(id)
            .ok_or_else(|| Error::Contract(format!("{what} names unknown parameter {id}")))?;
        if !tensor.requires_grad() {
            return Err(Error::Contract(format!("{what} covers non-trainable parameter {id}")));
        }
        if tensor.numel() != len {
            return Err(Error::Contract(format!(
                "{what} entry {id} has {len} scalars, parameter has {}",
                tensor.numel()
            )));
        }
        seen += 1;
    }
    let trainable = registry.trainable().count();
    if seen != trainable {
        return Err(Error::Contract(format!(
            "{what} covers {seen} parameters but the registry has {trainable} trainable"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn rejects_negative_scores_and_zero_samples() {
        assert!(ImportanceMap::new(EstimatorKind::Gradient, 1, [("a".to_string(), vec![-1.0])]).is_err());
        assert!(ImportanceMap::new(EstimatorKind::Gradient, 0, [("a".to_string(), vec![1.0])]).is_err());
    }

    #[test]
    fn aggregation_modes() {
        let mut r = ParameterRegistry::new();
        r.insert("w", Tensor::matrix(2, 2, vec![0.0; 4]).unwrap().with_grad(true))
            .unwrap();
        r.insert("b", Tensor::vector(vec![0.0; 2]).unwrap().with_grad(true)).unwrap();
        let m = ImportanceMap::new(
            EstimatorKind::Gradient,
            3,
            [("w".to_string(), vec![1.0, 3.0, 5.0, 7.0]), ("b".to_string(), vec![2.0, 4.0])],
        )
        .unwrap();
        let row = m.aggregate(&r, Granularity::Row).unwrap();
        assert_eq!(row.get("w").unwrap(), &[2.0, 2.0, 6.0, 6.0]);
        assert_eq!(row.get("b").unwrap(), &[3.0, 3.0]);
        let t = m.aggregate(&r, Granularity::Tensor).unwrap();
        assert_eq!(t.get("w").unwrap(), &[4.0; 4]);
        assert_eq!(m.aggregate(&r, Granularity::Scalar).unwrap(), m);
    }

    #[test]
    fn alignment_checks() {
        let mut r = ParameterRegistry::new();
        r.insert("w", Tensor::vector(vec![0.0; 2]).unwrap().with_grad(true)).unwrap();
        let good = FreezeMask::new(0.5, [("w".to_string(), vec![true, false])]);
        good.check_aligned(&r).unwrap();
        assert_eq!(good.core_fraction(), 0.5);
        let short = FreezeMask::new(0.5, [("w".to_string(), vec![true])]);
        assert!(matches!(short.check_aligned(&r), Err(Error::Contract(_))));
        let missing = FreezeMask::new(0.5, Vec::<(String, Vec<bool>)>::new());
        assert!(missing.check_aligned(&r).is_err());
    }
}
