//! Word-level text normalization and vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, splits on whitespace and makes every ASCII punctuation
/// character its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_ascii_punctuation() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn is_punct(tok: &str) -> bool {
    let mut c = tok.chars();
    matches!((c.next(), c.next()), (Some(ch), None) if ch.is_ascii_punctuation())
}

/// Joins tokens with single spaces, attaching punctuation to the previous token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !is_punct(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Canonical form of a string: `detokenize(tokenize(text))`.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by every corpus token in sorted order.
    pub fn build<I, S>(corpus: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = corpus
            .into_iter()
            .flat_map(|t| tokenize(t.as_ref()))
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words)).expect("reserved prefix present")
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::config("vocabulary must start with <pad>, <bos>, <eos>, <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Encoded text followed by EOS.
    pub fn encode_response(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Text up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&toks)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_string)).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The chair."), vec!["the", "chair", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  How many\tchairs?"), vec!["how", "many", "chairs", "?"]);
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        assert_eq!(detokenize(&["the", "chair", "."]), "the chair.");
        assert_eq!(normalize("Is it  RED ?"), "is it red?");
    }

    #[test]
    fn vocabulary_reserved_ids_and_unknowns() {
        let v = Vocabulary::build(["a red chair.", "the chair"]);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.id("zebra"), UNK);
        let ids = v.encode_response("the red chair.");
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), "the red chair.");
        assert_eq!(v.decode(&[BOS, v.id("a"), EOS, v.id("chair")]), "a");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["left of the table", "right"]);
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }
}
