//! Triplet and perturbation-pair corpora, plus the planted-bias generator.

mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub use synth::{generate_corpus, Axis, GroupPair, NounClass, SentenceKind, SynthCorpus, SynthSpec};

/// Twelve hand-written triplets, three per domain.
pub const SAMPLE_TRIPLETS: &str = include_str!("../../data/sample_triplets.jsonl");

/// A target term in three contexts: stereotypical, anti-stereotypical and
/// meaningless.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub domain: String,
    pub target: String,
    pub stereotype: String,
    pub anti_stereotype: String,
    pub unrelated: String,
}

impl Triplet {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.domain.trim().is_empty() {
            return Err("domain is empty".into());
        }
        for (label, s) in self.sentences() {
            if s.trim().is_empty() {
                return Err(format!("{label} sentence is empty"));
            }
        }
        Ok(())
    }

    pub fn sentences(&self) -> [(&'static str, &str); 3] {
        [
            ("stereotype", &self.stereotype),
            ("anti_stereotype", &self.anti_stereotype),
            ("unrelated", &self.unrelated),
        ]
    }
}

/// A sentence and its demographic rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbationPair {
    pub original: String,
    pub perturbed: String,
    pub axis: String,
}

impl PerturbationPair {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.original.trim().is_empty() || self.perturbed.trim().is_empty() {
            return Err("pair sentences must be non-empty".into());
        }
        if self.original == self.perturbed {
            return Err("perturbed sentence equals the original".into());
        }
        Ok(())
    }
}

fn parse_validated<T, F>(text: &str, origin: &str, check: F) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    F: Fn(&T) -> std::result::Result<(), String>,
{
    io::parse_jsonl_numbered(text, origin)?
        .into_iter()
        .map(|(line, r)| {
            check(&r).map_err(|message| Error::Parse {
                path: origin.to_string(),
                line,
                message,
            })?;
            Ok(r)
        })
        .collect()
}

pub fn parse_triplets(text: &str, origin: &str) -> Result<Vec<Triplet>> {
    parse_validated(text, origin, Triplet::validate)
}

pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<PerturbationPair>> {
    parse_validated(text, origin, PerturbationPair::validate)
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    parse_triplets(&io::read_to_string(path)?, &path.display().to_string())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PerturbationPair>> {
    parse_pairs(&io::read_to_string(path)?, &path.display().to_string())
}

pub fn sample_triplets() -> Vec<Triplet> {
    parse_triplets(SAMPLE_TRIPLETS, "sample_triplets.jsonl").expect("shipped sample parses")
}
