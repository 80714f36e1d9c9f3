//! Corpus ingestion.
//!
//! The vocabulary comes from the training split only. Tokens are ranked by
//! descending frequency, ties broken by byte order, followed by the reserved
//! `<unk>` and, in word mode, `<eos>`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Char,
    Word,
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenMode::Char => "char",
            TokenMode::Word => "word",
        })
    }
}

impl FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenMode::Char),
            "word" => Ok(TokenMode::Word),
            other => Err(Error::Config(format!("unknown tokenization mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn unk(&self) -> usize {
        self.index[UNK]
    }
}

fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Char => text.chars().map(String::from).collect(),
        TokenMode::Word => text
            .lines()
            .flat_map(|line| {
                line.split_whitespace()
                    .map(str::to_owned)
                    .chain(std::iter::once(EOS.to_owned()))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub mode: TokenMode,
    pub vocab: Vocabulary,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Corpus {
    /// Builds a corpus from the text of the three splits. `names` label the
    /// splits in errors.
    pub fn from_texts(texts: [&str; 3], names: [&Path; 3], mode: TokenMode) -> Result<Corpus> {
        for (text, name) in texts.iter().zip(names) {
            if text.trim().is_empty() {
                return Err(Error::EmptyInput(format!("{} has no text", name.display())));
            }
        }
        let train_tokens = tokenize(texts[0], mode);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &train_tokens {
            if t != EOS {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(t, _)| *t != UNK).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.as_bytes().cmp(b.0.as_bytes())));
        let mut tokens: Vec<String> = ranked.into_iter().map(|(t, _)| t.to_owned()).collect();
        tokens.push(UNK.to_owned());
        if mode == TokenMode::Word {
            tokens.push(EOS.to_owned());
        }
        let vocab = Vocabulary::from_tokens(tokens);
        let encode = |tokens: Vec<String>| -> Vec<usize> {
            tokens
                .iter()
                .map(|t| vocab.id(t).unwrap_or_else(|| vocab.unk()))
                .collect()
        };
        let train = encode(train_tokens);
        let valid = encode(tokenize(texts[1], mode));
        let test = encode(tokenize(texts[2], mode));
        Ok(Corpus {
            mode,
            vocab,
            train,
            valid,
            test,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    String::from_utf8(bytes).map_err(|e| Error::Encoding {
        path: path.to_path_buf(),
        detail: e.utf8_error().to_string(),
    })
}

pub fn ingest_corpus(train: &Path, valid: &Path, test: &Path, mode: TokenMode) -> Result<Corpus> {
    let texts = [read_text(train)?, read_text(valid)?, read_text(test)?];
    Corpus::from_texts(
        [&texts[0], &texts[1], &texts[2]],
        [train, valid, test],
        mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(train: &str, test: &str, mode: TokenMode) -> Corpus {
        let p = Path::new("x");
        Corpus::from_texts([train, train, test], [p, p, p], mode).unwrap()
    }

    #[test]
    fn word_mode_example() {
        let c = corpus("a b a\n", "a c\n", TokenMode::Word);
        assert_eq!(c.vocab.tokens(), ["a", "b", UNK, EOS]);
        assert_eq!(c.train, vec![0, 1, 0, 3]);
        assert_eq!(c.test, vec![0, 2, 3]);
    }

    #[test]
    fn char_mode_ranks_by_frequency_then_bytes() {
        let c = corpus("bba\ncc", "z", TokenMode::Char);
        assert_eq!(c.vocab.tokens(), ["b", "c", "\n", "a", UNK]);
        assert_eq!(c.test, vec![4]);
    }

    #[test]
    fn ids_are_below_vocab_size() {
        let c = corpus("the cat sat\non the mat\n", "a dog\n", TokenMode::Word);
        let v = c.vocab_size();
        assert!(c.train.iter().chain(&c.valid).chain(&c.test).all(|&i| i < v));
    }

    #[test]
    fn rebuilding_is_deterministic() {
        let a = corpus("x y z y x w\n", "q\n", TokenMode::Word);
        let b = corpus("x y z y x w\n", "q\n", TokenMode::Word);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.txt");
        let empty = dir.path().join("empty.txt");
        let bad = dir.path().join("bad.txt");
        std::fs::write(&good, "hello\n").unwrap();
        std::fs::write(&empty, "").unwrap();
        std::fs::write(&bad, [0x66, 0xff, 0xfe]).unwrap();
        assert!(matches!(
            ingest_corpus(&good, &empty, &good, TokenMode::Char),
            Err(Error::EmptyInput(_))
        ));
        match ingest_corpus(&good, &good, &bad, TokenMode::Char) {
            Err(Error::Encoding { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected an encoding error, got {other:?}"),
        }
    }
}
