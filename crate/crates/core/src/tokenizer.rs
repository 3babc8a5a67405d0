//! Word-level tokenizer.
//!
//! Normalization is lowercasing plus removal of `. , ! ?`; words are split on
//! whitespace. Ids 0..4 are reserved for PAD, UNK, BOS and EOS.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercases, strips `. , ! ?` and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !matches!(c, '.' | ',' | '!' | '?'))
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from every token seen at least `min_freq` times,
    /// ordered by descending frequency then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in normalize(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !RESERVED.contains(&w.as_str()))
            .collect();
        kept.sort_by(|(wa, ca), (wb, cb)| cb.cmp(ca).then_with(|| wa.cmp(wb)));
        Self::from_tokens(kept.into_iter().map(|(w, _)| w))
    }

    /// Reserved tokens followed by `words` in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { ids, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// `BOS`, one id per normalized word (`UNK` when unknown), `EOS`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = vec![BOS];
        out.extend(normalize(text).iter().map(|w| self.id(w).unwrap_or(UNK)));
        out.push(EOS);
        out
    }

    /// Joins word tokens with single spaces, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Line-delimited `token<TAB>id`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_tsv(text: &str, origin: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                message,
            };
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>id".into()))?;
            let id: usize = id.trim().parse().map_err(|e| parse_err(format!("bad id: {e}")))?;
            if id != rows.len() {
                return Err(parse_err(format!("expected id {}, found {id}", rows.len())));
            }
            rows.push(tok.to_string());
        }
        if rows.len() < RESERVED.len() || rows.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Format {
                path: origin.into(),
                detail: "vocabulary must start with the reserved tokens".into(),
            });
        }
        Self::from_tokens(rows.into_iter().skip(RESERVED.len()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_orders_by_frequency() {
        let v = Vocab::build(&["a b", "a"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        let v2 = Vocab::build(&["a b", "a"], 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("b"), None);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build(&["zeta alpha mid"], 1).unwrap();
        assert_eq!(v.words(), &["alpha", "mid", "zeta"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocab::build(&empty, 1), Err(Error::Input(_))));
    }

    #[test]
    fn encode_cases() {
        let v = Vocab::build(&["a b", "a"], 1).unwrap();
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        assert_eq!(v.encode("a b"), vec![2, 4, 5, 3]);
        assert_eq!(v.encode("A, b! zzz."), vec![2, 4, 5, UNK, 3]);
        assert_eq!(v.decode(&v.encode("A b.")), "a b");
    }

    #[test]
    fn tsv_round_trip() {
        let v = Vocab::build(&["the cat sat", "the dog"], 1).unwrap();
        let back = Vocab::from_tsv(&v.to_tsv(), "mem").unwrap();
        assert_eq!(v, back);
        assert!(Vocab::from_tsv("<pad>\t0\nfoo\t1\n", "mem").is_err());
        assert!(matches!(
            Vocab::from_tsv("<pad>\tx\n", "mem"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab(words in prop::collection::vec("[a-z]{1,6}", 0..12)) {
            let text = words.join(" ");
            let v = Vocab::build(&[text.clone(), "filler".to_string()], 1).unwrap();
            let ids = v.encode(&text);
            prop_assert!(ids.iter().all(|&i| i < v.len() && i != UNK));
            prop_assert_eq!(v.decode(&ids), normalize(&text).join(" "));
        }

        #[test]
        fn unk_iff_oov(known in "[a-m]{1,5}", unknown in "[n-z]{1,5}") {
            let v = Vocab::build(&[known.clone()], 1).unwrap();
            prop_assert!(!v.encode(&known).contains(&UNK));
            prop_assert!(v.encode(&unknown).contains(&UNK));
        }
    }
}
