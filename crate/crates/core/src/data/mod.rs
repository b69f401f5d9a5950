//! Synthetic general/domain corpora, text ingestion, batching and
//! multiple-choice evaluation items.
//!
//! Both synthetic tasks share one alphabet. The general task is a random
//! first-order Markov chain; the domain task mixes it with a second chain
//! that leans towards the upper half of the alphabet, the mixing weight
//! being `skew`.

mod batch;
mod choice;
mod corpus;
mod grammar;
mod vocab;

pub use batch::{batches, samples, Sample};
pub use choice::{gen_choice_items, ChoiceItem};
pub use corpus::{
    eval_count, gen_domain_corpus, gen_general_choices, gen_general_corpus, ingest_text, sidecar_path,
    total_variation, unigram_distribution, Corpus, DomainData, Role, Split, SplitCorpus, SyntheticSpec,
    EVAL_FRACTION,
};
pub use grammar::Grammar;
pub use vocab::{escape, unescape, UnknownPolicy, Vocab, VocabPolicy, UNKNOWN_SYMBOL};
