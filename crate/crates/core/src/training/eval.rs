use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph};
use crate::data::{samples, ChoiceItem, Corpus, Sample};
use crate::error::{Error, Result};
use crate::model::TinyLm;

// samples per forward pass during evaluation
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ppl: f64,
    pub mean_ce: f64,
    pub tokens: usize,
    pub accuracy: Option<f64>,
}

/// Per-position cross-entropy of every target in `batch`, in order.
fn token_losses(model: &TinyLm, batch: &[Sample]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let xs: Vec<&[usize]> = batch.iter().map(|s| s.x.as_slice()).collect();
    let logits = model.forward_graph(&mut g, &bound, &xs)?;
    let v = model.config().vocab_size;
    let data = g.value(logits).data();
    let targets = batch.iter().flat_map(|s| s.y.iter().copied());
    Ok(data
        .chunks_exact(v)
        .zip(targets)
        .map(|(row, t)| log_sum_exp(row).0 - row[t])
        .collect())
}

/// `exp` of the token-weighted mean cross-entropy over `samples`.
pub fn perplexity(model: &TinyLm, samples: &[Sample]) -> Result<(f64, f64, usize)> {
    if samples.is_empty() {
        return Err(Error::Data("no evaluation samples".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let losses = token_losses(model, chunk)?;
        n += losses.len();
        sum += losses.iter().sum::<f64>();
    }
    let mean = sum / n as f64;
    Ok((mean.exp(), mean, n))
}

/// Mean per-token loss of each candidate continuation after the prompt.
pub fn candidate_losses(model: &TinyLm, item: &ChoiceItem) -> Result<Vec<f64>> {
    item.validate()?;
    let p = item.prompt.len();
    item.candidates
        .iter()
        .map(|cand| {
            let mut tokens = item.prompt.clone();
            tokens.extend_from_slice(cand);
            let x = &tokens[..tokens.len() - 1];
            let sample = Sample {
                x: x.to_vec(),
                y: tokens[1..].to_vec(),
            };
            let losses = token_losses(model, std::slice::from_ref(&sample))?;
            let cont = &losses[p - 1..];
            Ok(cont.iter().sum::<f64>() / cont.len() as f64)
        })
        .collect()
}

/// Share of items whose correct candidate has the lowest loss. Ties go to
/// the earliest candidate.
pub fn choice_accuracy(model: &TinyLm, items: &[ChoiceItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Data("no choice items".into()));
    }
    let mut correct = 0usize;
    for item in items {
        let losses = candidate_losses(model, item)?;
        let best = losses
            .iter()
            .enumerate()
            .fold(0, |best, (i, l)| if *l < losses[best] { i } else { best });
        if best == item.correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Perplexity on `corpus` and, if given, accuracy on `items`.
pub fn evaluate(model: &TinyLm, corpus: &Corpus, items: Option<&[ChoiceItem]>, context: usize) -> Result<EvalResult> {
    let s = samples(corpus, context)?;
    let (ppl, mean_ce, tokens) = perplexity(model, &s)?;
    let accuracy = items.map(|it| choice_accuracy(model, it)).transpose()?;
    Ok(EvalResult {
        ppl,
        mean_ce,
        tokens,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, HEAD_BIAS, HEAD_WEIGHT};

    fn tiny() -> TinyLm {
        let cfg = ModelConfig {
            vocab_size: 4,
            embed_dim: 2,
            depth: 1,
            context: 8,
            window: 2,
            hidden: 4,
        };
        TinyLm::build(&cfg, 1).unwrap()
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = tiny();
        for id in [HEAD_WEIGHT, HEAD_BIAS] {
            m.registry_mut().get_mut(id).unwrap().data_mut().fill(0.0);
        }
        let s = vec![Sample {
            x: vec![0, 1, 2],
            y: vec![1, 2, 3],
        }];
        let (ppl, _, n) = perplexity(&m, &s).unwrap();
        assert!((ppl - 4.0).abs() < 1e-12);
        assert_eq!(n, 3);
    }

    #[test]
    fn candidate_loss_matches_model_loss() {
        let m = tiny();
        let item = ChoiceItem {
            prompt: vec![0, 1],
            candidates: vec![vec![2, 3], vec![3, 3]],
            correct: 0,
        };
        let l = candidate_losses(&m, &item).unwrap();
        let logits = m.forward(&[0, 1, 2]).unwrap();
        let row = |i: usize| &logits.data()[i * 4..(i + 1) * 4];
        let want = ((log_sum_exp(row(1)).0 - row(1)[2]) + (log_sum_exp(row(2)).0 - row(2)[3])) / 2.0;
        assert!((l[0] - want).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_first_candidate() {
        let m = tiny();
        let item = ChoiceItem {
            prompt: vec![0],
            candidates: vec![vec![1], vec![1]],
            correct: 0,
        };
        assert_eq!(choice_accuracy(&m, &[item]).unwrap(), 1.0);
    }
}
