use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::Corpus;
use crate::error::{Error, Result};

/// Next-token pair: `y[i]` is the token after `x[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

/// Non-overlapping windows of `context + 1` tokens from every sequence, in
/// corpus order. Trailing tokens that do not fill a window are dropped.
pub fn samples(corpus: &Corpus, context: usize) -> Result<Vec<Sample>> {
    if context < 2 {
        return Err(Error::Config(format!("context must be >= 2, got {context}")));
    }
    let mut out = Vec::new();
    for seq in corpus.sequences() {
        let mut start = 0;
        while start + context < seq.len() {
            out.push(Sample {
                x: seq[start..start + context].to_vec(),
                y: seq[start + 1..start + context + 1].to_vec(),
            });
            start += context;
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "corpus has no sequence longer than the context of {context}"
        )));
    }
    Ok(out)
}

/// Seeded shuffle of [`samples`] grouped into full batches.
pub fn batches(corpus: &Corpus, batch_size: usize, context: usize, seed: u64) -> Result<Vec<Vec<Sample>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut all = samples(corpus, context)?;
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(all
        .chunks_exact(batch_size)
        .map(<[Sample]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{Role, Split};
    use crate::data::vocab::Vocab;

    fn corpus(seqs: Vec<Vec<usize>>) -> Corpus {
        Corpus::new(seqs, Vocab::new("abcd".chars()).unwrap(), Role::General, Split::Train).unwrap()
    }

    #[test]
    fn shift_by_one() {
        let s = samples(&corpus(vec![vec![0, 1, 2, 3]]), 3).unwrap();
        assert_eq!(
            s,
            vec![Sample {
                x: vec![0, 1, 2],
                y: vec![1, 2, 3]
            }]
        );
    }

    #[test]
    fn too_short_is_data_error() {
        assert!(matches!(samples(&corpus(vec![vec![0, 1, 2]]), 3), Err(Error::Data(_))));
        assert!(matches!(samples(&corpus(vec![vec![0, 1, 2]]), 1), Err(Error::Config(_))));
    }

    #[test]
    fn batching_is_seeded_and_drops_partial() {
        let seqs: Vec<Vec<usize>> = (0..7).map(|i| vec![i % 4, 1, 2, (i + 1) % 4]).collect();
        let c = corpus(seqs);
        let a = batches(&c, 2, 3, 5).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, batches(&c, 2, 3, 5).unwrap());
        let flat: Vec<_> = a.iter().flatten().collect();
        assert!(flat.iter().all(|s| s.x.iter().chain(&s.y).all(|&t| t < 4)));
    }
}
