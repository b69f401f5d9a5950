use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::grammar::Grammar;
use crate::error::{Error, Result};

/// Multiple-choice continuation item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceItem {
    pub prompt: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub correct: usize,
}

impl ChoiceItem {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::Data("choice item needs at least two candidates".into()));
        }
        if self.correct >= self.candidates.len() {
            return Err(Error::Data(format!(
                "correct index {} out of {} candidates",
                self.correct,
                self.candidates.len()
            )));
        }
        if self.prompt.is_empty() || self.candidates.iter().any(Vec::is_empty) {
            return Err(Error::Data("choice item has an empty prompt or candidate".into()));
        }
        Ok(())
    }
}

const DISTRACTOR_ATTEMPTS: usize = 200;
const ITEM_ATTEMPTS: usize = 1000;

/// Builds `count` items with 2–4 candidates each.
///
/// The prompt and the correct continuation are sampled from `primary`;
/// distractors are sampled from `contrast` and kept only if `primary` gives
/// them strictly lower likelihood than the correct continuation.
pub fn gen_choice_items(
    primary: &Grammar,
    contrast: &Grammar,
    prompt_len: usize,
    continuation_len: usize,
    seed: u64,
    count: usize,
) -> Result<Vec<ChoiceItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(count);
    'items: while items.len() < count {
        for _ in 0..ITEM_ATTEMPTS {
            let prompt = primary.sample(&mut rng, prompt_len, None);
            let prev = *prompt.last().expect("prompt_len >= 1");
            let correct = primary.sample(&mut rng, continuation_len, Some(prev));
            let correct_lp = primary.log_prob(prev, &correct);
            let n_candidates = rng.gen_range(2..=4);
            let mut candidates = vec![correct];
            while candidates.len() < n_candidates {
                let found = (0..DISTRACTOR_ATTEMPTS).find_map(|_| {
                    let d = contrast.sample(&mut rng, continuation_len, Some(prev));
                    (primary.log_prob(prev, &d) < correct_lp && !candidates.contains(&d)).then_some(d)
                });
                match found {
                    Some(d) => candidates.push(d),
                    None => break,
                }
            }
            if candidates.len() < n_candidates {
                continue;
            }
            let correct_at = rng.gen_range(0..n_candidates);
            candidates.swap(0, correct_at);
            items.push(ChoiceItem {
                prompt,
                candidates,
                correct: correct_at,
            });
            continue 'items;
        }
        return Err(Error::Data("could not construct a choice item".into()));
    }
    Ok(items)
}
