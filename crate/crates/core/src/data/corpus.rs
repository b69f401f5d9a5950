use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::choice::{gen_choice_items, ChoiceItem};
use crate::data::grammar::Grammar;
use crate::data::vocab::{escape, unescape, UnknownPolicy, Vocab, VocabPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    General,
    Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Token sequences over one vocab.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    sequences: Vec<Vec<usize>>,
    vocab: Vocab,
    role: Role,
    split: Split,
}

impl Corpus {
    pub fn new(sequences: Vec<Vec<usize>>, vocab: Vocab, role: Role, split: Split) -> Result<Self> {
        let v = vocab.len();
        if let Some(bad) = sequences.iter().flatten().find(|&&id| id >= v) {
            return Err(Error::Data(format!("token id {bad} outside vocab of {v}")));
        }
        Ok(Corpus {
            sequences,
            vocab,
            role,
            split,
        })
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Writes one escaped sequence per line plus a `<path>.vocab` sidecar.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for seq in &self.sequences {
            out.push_str(&escape(&self.vocab.decode(seq)?));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
        self.vocab.write_sidecar(&sidecar_path(path))
    }

    pub fn import(path: &Path, role: Role, split: Split) -> Result<Self> {
        let vocab = Vocab::read_sidecar(&sidecar_path(path))?;
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let sequences = text
            .lines()
            .map(|l| vocab.encode(&unescape(l)?, UnknownPolicy::Reject))
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(sequences, vocab, role, split)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpus {
    pub train: Corpus,
    pub eval: Corpus,
}

/// Shape of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub alphabet: String,
    pub seq_len: usize,
    pub grammar_seed: u64,
    pub prompt_len: usize,
    pub continuation_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            alphabet: "abcdefghijklmnop".into(),
            seq_len: 33,
            grammar_seed: 0,
            prompt_len: 8,
            continuation_len: 6,
        }
    }
}

const DOMAIN_GRAMMAR_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const CONTRAST_GRAMMAR_SALT: u64 = 0xC2B2_AE3D_27D4_EB4F;
const CHOICE_SEED_SALT: u64 = 0x1656_67B1_9E37_79F9;

/// Fraction of generated sequences held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.1;

impl SyntheticSpec {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.alphabet.chars())
    }

    pub fn general_grammar(&self) -> Result<Grammar> {
        Ok(Grammar::general(self.vocab()?.len(), self.grammar_seed))
    }

    pub fn domain_grammar(&self, skew: f64) -> Result<Grammar> {
        Grammar::domain(
            &self.general_grammar()?,
            self.grammar_seed ^ DOMAIN_GRAMMAR_SALT,
            skew,
        )
    }

    /// Unrelated chain used for distractors of general choice items.
    pub fn contrast_grammar(&self) -> Result<Grammar> {
        Ok(Grammar::general(self.vocab()?.len(), self.grammar_seed ^ CONTRAST_GRAMMAR_SALT))
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        if self.prompt_len == 0 || self.continuation_len == 0 {
            return Err(Error::Config("prompt_len and continuation_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Number of held-out sequences for a corpus of `size`.
pub fn eval_count(size: usize) -> usize {
    if size < 2 {
        0
    } else {
        ((size as f64 * EVAL_FRACTION).round() as usize).clamp(1, size - 1)
    }
}

fn sample_split(
    spec: &SyntheticSpec,
    grammar: &Grammar,
    seed: u64,
    size: usize,
    role: Role,
) -> Result<SplitCorpus> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::Data("corpus size must be >= 1".into()));
    }
    let vocab = spec.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(size);
    let mut sequences = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while sequences.len() < size {
        attempts += 1;
        if attempts > size.saturating_mul(100).max(1000) {
            return Err(Error::Data(format!(
                "could not draw {size} distinct sequences of length {}",
                spec.seq_len
            )));
        }
        let seq = grammar.sample(&mut rng, spec.seq_len, None);
        if seen.insert(seq.clone()) {
            sequences.push(seq);
        }
    }
    let eval = sequences.split_off(size - eval_count(size));
    Ok(SplitCorpus {
        train: Corpus::new(sequences, vocab.clone(), role, Split::Train)?,
        eval: Corpus::new(eval, vocab, role, Split::Eval)?,
    })
}

/// General-task corpus: distinct sequences from the general chain, the last
/// tenth held out before any shuffling.
pub fn gen_general_corpus(spec: &SyntheticSpec, seed: u64, size: usize) -> Result<SplitCorpus> {
    sample_split(spec, &spec.general_grammar()?, seed, size, Role::General)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub corpus: SplitCorpus,
    pub choices: Vec<ChoiceItem>,
}

/// Domain corpus from the `skew`-mixed chain plus choice items whose correct
/// continuation comes from the domain chain and whose distractors come from
/// the general chain.
pub fn gen_domain_corpus(
    spec: &SyntheticSpec,
    seed: u64,
    size: usize,
    skew: f64,
    choice_items: usize,
) -> Result<DomainData> {
    let domain = spec.domain_grammar(skew)?;
    let corpus = sample_split(spec, &domain, seed, size, Role::Domain)?;
    let choices = gen_choice_items(
        &domain,
        &spec.general_grammar()?,
        spec.prompt_len,
        spec.continuation_len,
        seed ^ CHOICE_SEED_SALT,
        choice_items,
    )?;
    Ok(DomainData { corpus, choices })
}

/// General choice items: correct from the general chain, distractors from the
/// contrast chain.
pub fn gen_general_choices(spec: &SyntheticSpec, seed: u64, choice_items: usize) -> Result<Vec<ChoiceItem>> {
    spec.validate()?;
    gen_choice_items(
        &spec.general_grammar()?,
        &spec.contrast_grammar()?,
        spec.prompt_len,
        spec.continuation_len,
        seed ^ CHOICE_SEED_SALT,
        choice_items,
    )
}

/// Reads a UTF-8 text file as a single character-level sequence.
///
/// Carriage returns are dropped so CRLF and LF files tokenize the same.
pub fn ingest_text(path: &Path, policy: &VocabPolicy, role: Role) -> Result<Corpus> {
    let raw = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let text: String = raw.chars().filter(|&c| c != '\r').collect();
    if text.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    let (vocab, ids) = match policy {
        VocabPolicy::Fresh => {
            let mut symbols = Vec::new();
            let mut seen = HashSet::new();
            for c in text.chars() {
                if seen.insert(c) {
                    symbols.push(c);
                }
            }
            let vocab = Vocab::new(symbols)?;
            let ids = vocab.encode(&text, UnknownPolicy::Reject)?;
            (vocab, ids)
        }
        VocabPolicy::Fixed { vocab, unknown } => (vocab.clone(), vocab.encode(&text, *unknown)?),
    };
    Corpus::new(vec![ids], vocab, role, Split::Train)
}

pub fn unigram_distribution(corpus: &Corpus) -> Vec<f64> {
    let mut counts = vec![0.0; corpus.vocab().len()];
    for &id in corpus.sequences().iter().flatten() {
        counts[id] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn general_corpus_is_deterministic_and_split() {
        let spec = SyntheticSpec::default();
        let a = gen_general_corpus(&spec, 3, 50).unwrap();
        let b = gen_general_corpus(&spec, 3, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 45);
        assert_eq!(a.eval.len(), 5);
        let train: HashSet<_> = a.train.sequences().iter().collect();
        assert!(a.eval.sequences().iter().all(|s| !train.contains(s)));
        assert_ne!(a, gen_general_corpus(&spec, 4, 50).unwrap());
    }

    #[test]
    fn eval_counts() {
        assert_eq!(eval_count(1), 0);
        assert_eq!(eval_count(2), 1);
        assert_eq!(eval_count(1000), 100);
    }

    #[test]
    fn ingest_fresh_and_reject() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        fs::write(&p, "abab").unwrap();
        let c = ingest_text(&p, &VocabPolicy::Fresh, Role::General).unwrap();
        assert_eq!(c.sequences(), &[vec![0, 1, 0, 1]]);

        fs::write(&p, "abz").unwrap();
        let fixed = VocabPolicy::Fixed {
            vocab: Vocab::new("ab".chars()).unwrap(),
            unknown: UnknownPolicy::Reject,
        };
        let err = ingest_text(&p, &fixed, Role::General).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("'z'"));

        fs::write(&p, "").unwrap();
        assert!(matches!(ingest_text(&p, &VocabPolicy::Fresh, Role::General), Err(Error::Data(_))));
        assert!(matches!(
            ingest_text(&dir.path().join("missing"), &VocabPolicy::Fresh, Role::General),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn ingest_roundtrips_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        let text = "the cat\nsat on\\the mat.\n";
        fs::write(&p, text).unwrap();
        let c = ingest_text(&p, &VocabPolicy::Fresh, Role::Domain).unwrap();
        assert_eq!(c.vocab().decode(&c.sequences()[0]).unwrap(), text);

        let out = dir.path().join("export.txt");
        c.export(&out).unwrap();
        let back = Corpus::import(&out, Role::Domain, Split::Train).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn total_variation_basics() {
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }
}
