use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Character ↔ id map. Id = position in `symbols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
    unknown: Option<usize>,
}

/// What to do with a character the vocab does not know.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownPolicy {
    Reject,
    /// Map to the vocab's reserved unknown id.
    MapToReserved,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VocabPolicy {
    /// Build a vocab from the text, ids in order of first appearance.
    Fresh,
    Fixed { vocab: Vocab, unknown: UnknownPolicy },
}

pub const UNKNOWN_SYMBOL: char = '\u{FFFD}';

impl Vocab {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Data(format!("duplicate vocab symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::Data("empty vocab".into()));
        }
        Ok(Vocab {
            symbols,
            index,
            unknown: None,
        })
    }

    /// Appends a reserved unknown symbol (`U+FFFD`).
    pub fn with_reserved_unknown(mut self) -> Result<Self> {
        if self.unknown.is_some() {
            return Ok(self);
        }
        if self.index.contains_key(&UNKNOWN_SYMBOL) {
            return Err(Error::Data("vocab already uses the unknown symbol".into()));
        }
        let id = self.symbols.len();
        self.symbols.push(UNKNOWN_SYMBOL);
        self.index.insert(UNKNOWN_SYMBOL, id);
        self.unknown = Some(id);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn unknown_id(&self) -> Option<usize> {
        self.unknown
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str, policy: UnknownPolicy) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match (self.id(c), policy) {
                (Some(id), _) => Ok(id),
                (None, UnknownPolicy::Reject) => Err(Error::Data(format!("character {c:?} not in vocab"))),
                (None, UnknownPolicy::MapToReserved) => self
                    .unknown
                    .ok_or_else(|| Error::Config("vocab has no reserved unknown id".into())),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.symbols.get(i).copied().ok_or(Error::Index {
                    op: "decode",
                    index: i,
                    bound: self.symbols.len(),
                })
            })
            .collect()
    }

    /// One escaped symbol per line; line number = id.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &c in &self.symbols {
            out.push_str(&escape(&c.to_string()));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read vocab {}: {e}", path.display())))?;
        let mut symbols = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let s = unescape(line)?;
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                _ => return Err(Error::Data(format!("vocab line {} is not one symbol: {line:?}", n + 1))),
            }
        }
        let mut vocab = Vocab::new(symbols)?;
        if let Some(id) = vocab.id(UNKNOWN_SYMBOL) {
            vocab.unknown = Some(id);
        }
        Ok(vocab)
    }
}

/// Escapes backslash, newline and carriage return so any text fits on one line.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(Error::Data(format!("bad escape \\{other:?}"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let v = Vocab::new("ab".chars()).unwrap();
        assert_eq!(v.encode("abab", UnknownPolicy::Reject).unwrap(), vec![0, 1, 0, 1]);
        let err = v.encode("abc", UnknownPolicy::Reject).unwrap_err();
        assert!(err.to_string().contains("'c'"));
        assert!(v.encode("c", UnknownPolicy::MapToReserved).is_err());
        let v = v.with_reserved_unknown().unwrap();
        assert_eq!(v.encode("ca", UnknownPolicy::MapToReserved).unwrap(), vec![2, 0]);
        assert_eq!(v.decode(&[1, 0]).unwrap(), "ba");
    }

    #[test]
    fn escaping_roundtrip() {
        for s in ["plain", "a\\b", "line\nbreak\r", "\\n literal"] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
            assert!(!escape(s).contains('\n'));
        }
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        let v = Vocab::new(['x', '\n', '\\', ' ']).unwrap().with_reserved_unknown().unwrap();
        v.write_sidecar(&p).unwrap();
        assert_eq!(Vocab::read_sidecar(&p).unwrap(), v);
    }
}
