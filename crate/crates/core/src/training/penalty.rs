use indexmap::IndexMap;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::model::{BoundParams, TinyLm};

/// Quadratic pull `λ/2 · Σ w·(x − a)²` of selected weights towards anchors.
///
/// `x` is the value a layer actually uses, so for an adapted weight the
/// penalty sees `W0 + scale·B·A`, not the frozen `W0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    lambda: f64,
    anchors: IndexMap<String, Vec<f64>>,
    weights: IndexMap<String, Vec<f64>>,
}

impl PenaltyConfig {
    pub fn new(
        lambda: f64,
        anchors: IndexMap<String, Vec<f64>>,
        weights: IndexMap<String, Vec<f64>>,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("penalty lambda must be finite and >= 0, got {lambda}")));
        }
        for (id, w) in &weights {
            let Some(a) = anchors.get(id) else {
                return Err(Error::Config(format!("penalty weight for {id} has no anchor")));
            };
            if a.len() != w.len() {
                return Err(Error::Config(format!(
                    "anchor for {id} has {} values, weight has {}",
                    a.len(),
                    w.len()
                )));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Config(format!("penalty weight for {id} is negative or non-finite")));
            }
        }
        Ok(PenaltyConfig {
            lambda,
            anchors,
            weights,
        })
    }

    /// Anchors the given parameters at their current effective values in
    /// `model`, weighted by `scores`.
    pub fn anchored(lambda: f64, model: &TinyLm, ids: &[String], scores: &ImportanceMap) -> Result<Self> {
        let mut anchors = IndexMap::new();
        let mut weights = IndexMap::new();
        for id in ids {
            let current = model
                .registry()
                .get(id)
                .ok_or_else(|| Error::Config(format!("penalty target {id} is not a model parameter")))?;
            let w = scores
                .get(id)
                .ok_or_else(|| Error::Config(format!("no importance scores for penalty target {id}")))?;
            anchors.insert(id.clone(), current.data().to_vec());
            weights.insert(id.clone(), w.to_vec());
        }
        PenaltyConfig::new(lambda, anchors, weights)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PenalizedLoss {
    pub total: Var,
    /// `None` when λ = 0; the total is then the task loss node itself.
    pub penalty: Option<Var>,
}

pub fn loss_with_penalty(
    graph: &mut Graph,
    task_loss: Var,
    bound: &BoundParams,
    penalty: &PenaltyConfig,
) -> Result<PenalizedLoss> {
    if penalty.lambda == 0.0 {
        return Ok(PenalizedLoss {
            total: task_loss,
            penalty: None,
        });
    }
    let mut acc: Option<Var> = None;
    for (id, w) in &penalty.weights {
        let x = bound
            .effective(id)
            .map_err(|_| Error::Config(format!("penalty target {id} is not bound")))?;
        let shape = graph.shape(x).to_vec();
        if shape.iter().product::<usize>() != w.len() {
            return Err(Error::Config(format!("penalty weight for {id} does not match its shape")));
        }
        let anchor = graph.constant(Tensor::new(&shape, penalty.anchors[id].iter().map(|a| -a).collect())?);
        let weight = graph.constant(Tensor::new(&shape, w.clone())?);
        let diff = graph.add(x, anchor)?;
        let sq = graph.mul(diff, diff)?;
        let weighted = graph.mul(sq, weight)?;
        let s = graph.sum(weighted)?;
        acc = Some(match acc {
            Some(a) => graph.add(a, s)?,
            None => s,
        });
    }
    let Some(sum) = acc else {
        return Ok(PenalizedLoss {
            total: task_loss,
            penalty: None,
        });
    };
    let pen = graph.scale(sum, penalty.lambda / 2.0)?;
    let total = graph.add(task_loss, pen)?;
    Ok(PenalizedLoss {
        total,
        penalty: Some(pen),
    })
}
