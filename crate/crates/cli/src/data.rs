//! Corpora and choice items for one experiment, generated or loaded from a
//! `gen-data` directory.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use selfreeze_core::data::{
    gen_domain_corpus, gen_general_choices, gen_general_corpus, ChoiceItem, Corpus, Role, Split, SplitCorpus,
};
use selfreeze_core::Error;

use crate::config::{ExperimentConfig, DATA_FILES};

#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub general: SplitCorpus,
    pub domain: SplitCorpus,
    pub general_choices: Vec<ChoiceItem>,
    pub domain_choices: Vec<ChoiceItem>,
}

pub fn synthesize(cfg: &ExperimentConfig) -> selfreeze_core::Result<DataBundle> {
    let d = &cfg.data;
    let seed = cfg.seeds.data;
    let general = gen_general_corpus(&d.synthetic, seed, d.general_size)?;
    let domain = gen_domain_corpus(&d.synthetic, seed.wrapping_add(1), d.domain_size, d.skew, d.choice_items)?;
    let general_choices = gen_general_choices(&d.synthetic, seed.wrapping_add(2), d.choice_items)?;
    Ok(DataBundle {
        general,
        domain: domain.corpus,
        general_choices,
        domain_choices: domain.choices,
    })
}

fn read_choices(path: &Path) -> selfreeze_core::Result<Vec<ChoiceItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let items: Vec<ChoiceItem> =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for it in &items {
        it.validate()?;
    }
    Ok(items)
}

pub fn load_dir(dir: &Path) -> selfreeze_core::Result<DataBundle> {
    let corpus = |name: &str, role, split| Corpus::import(&dir.join(name), role, split);
    Ok(DataBundle {
        general: SplitCorpus {
            train: corpus(DATA_FILES[0], Role::General, Split::Train)?,
            eval: corpus(DATA_FILES[1], Role::General, Split::Eval)?,
        },
        domain: SplitCorpus {
            train: corpus(DATA_FILES[2], Role::Domain, Split::Train)?,
            eval: corpus(DATA_FILES[3], Role::Domain, Split::Eval)?,
        },
        general_choices: read_choices(&dir.join(DATA_FILES[4]))?,
        domain_choices: read_choices(&dir.join(DATA_FILES[5]))?,
    })
}

impl DataBundle {
    /// Generated or loaded per `cfg.data.dir`, checked against the model vocab.
    pub fn for_config(cfg: &ExperimentConfig) -> selfreeze_core::Result<Self> {
        let bundle = match &cfg.data.dir {
            Some(dir) => load_dir(dir)?,
            None => synthesize(cfg)?,
        };
        let v = cfg.model.vocab_size;
        for c in bundle.corpora() {
            if c.vocab().len() > v {
                return Err(Error::Data(format!(
                    "corpus vocab has {} symbols, model.vocab_size is {v}",
                    c.vocab().len()
                )));
            }
        }
        let too_big = bundle
            .general_choices
            .iter()
            .chain(&bundle.domain_choices)
            .flat_map(|it| it.prompt.iter().chain(it.candidates.iter().flatten()))
            .any(|&t| t >= v);
        if too_big {
            return Err(Error::Data(format!("choice item token outside model vocab of {v}")));
        }
        Ok(bundle)
    }

    fn corpora(&self) -> [&Corpus; 4] {
        [&self.general.train, &self.general.eval, &self.domain.train, &self.domain.eval]
    }

    pub fn write_dir(&self, dir: &Path) -> selfreeze_core::Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
        for (name, corpus) in DATA_FILES.iter().zip(self.corpora()) {
            corpus.export(&dir.join(name))?;
        }
        for (name, items) in DATA_FILES[4..].iter().zip([&self.general_choices, &self.domain_choices]) {
            let path = dir.join(name);
            let text = serde_json::to_string_pretty(items).map_err(|e| Error::Data(e.to_string()))?;
            fs::write(&path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// SHA-256 over every token stream and choice item, in a fixed order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in self.corpora() {
            h.update((c.len() as u64).to_le_bytes());
            for s in c.sequences() {
                h.update((s.len() as u64).to_le_bytes());
                for &t in s {
                    h.update((t as u64).to_le_bytes());
                }
            }
        }
        for items in [&self.general_choices, &self.domain_choices] {
            h.update(serde_json::to_vec(items).expect("choice items serialise"));
        }
        hex::encode(h.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.general_size = 40;
        c.data.domain_size = 30;
        c.data.choice_items = 5;
        c
    }

    #[test]
    fn directory_roundtrip_keeps_fingerprint() {
        let b = DataBundle::for_config(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.write_dir(dir.path()).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.fingerprint(), b.fingerprint());
    }

    #[test]
    fn seeds_change_the_fingerprint() {
        let a = DataBundle::for_config(&small()).unwrap();
        let mut c = small();
        c.seeds.data = 99;
        assert_ne!(DataBundle::for_config(&c).unwrap().fingerprint(), a.fingerprint());
    }
}
