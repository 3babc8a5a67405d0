//! Report assembly against a stub scorer whose per-token log-probabilities
//! are fixed by a word table, so every number can be worked out by hand.

use std::collections::HashMap;

use fairlm::datasets::Triplet;
use fairlm::metrics::{evaluate, icat, language_modeling_score, score_all, stereotype_score, EvalOptions, TripletScores};
use fairlm::model::{LanguageModel, ScoreMode};
use fairlm::tensor::{Float, Tensor};
use fairlm::tokenizer::Vocab;
use proptest::prelude::*;

struct WordTable {
    vocab: Vocab,
    logp: HashMap<String, f64>,
}

impl LanguageModel for WordTable {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn score_tokens(&self, seqs: &[Vec<usize>]) -> fairlm::Result<Vec<Vec<Float>>> {
        Ok(seqs
            .iter()
            .map(|s| {
                s[1..]
                    .iter()
                    .map(|&id| {
                        let w = self.vocab.token(id).unwrap();
                        self.logp.get(w).copied().unwrap_or(-1.0) as Float
                    })
                    .collect()
            })
            .collect())
    }

    fn hidden(&self, tokens: &[usize]) -> fairlm::Result<Tensor> {
        Ok(Tensor::zeros(&[tokens.len(), 1]))
    }
}

const WORDS: [(&str, f64); 6] = [
    ("half", -0.5),
    ("one", -1.0),
    ("two", -2.0),
    ("three", -3.0),
    ("four", -4.0),
    ("five", -5.0),
];

fn word(v: f64) -> &'static str {
    WORDS.iter().find(|w| w.1 == v).unwrap().0
}

/// (domain, stereo, anti, unrelated) attribute log-probabilities.
const HAND: [(&str, f64, f64, f64); 10] = [
    ("x", -1.0, -2.0, -3.0),
    ("x", -2.0, -1.0, -3.0),
    ("x", -1.0, -1.0, -0.5),
    ("x", -0.5, -2.0, -1.0),
    ("y", -1.0, -3.0, -2.0),
    ("y", -3.0, -1.0, -2.0),
    ("y", -1.0, -2.0, -4.0),
    ("y", -2.0, -2.0, -2.0),
    ("y", -1.0, -4.0, -5.0),
    ("y", -4.0, -1.0, -5.0),
];

fn triplets() -> Vec<Triplet> {
    HAND.iter()
        .map(|&(d, s, a, u)| Triplet {
            domain: d.into(),
            target: "target".into(),
            stereotype: format!("target {}", word(s)),
            anti_stereotype: format!("target {}", word(a)),
            unrelated: format!("target {}", word(u)),
        })
        .collect()
}

fn stub() -> WordTable {
    let mut corpus: Vec<String> = WORDS.iter().map(|w| w.0.to_string()).collect();
    corpus.push("target".into());
    WordTable {
        vocab: Vocab::build(&corpus, 1).unwrap(),
        logp: WORDS.iter().map(|(w, v)| (w.to_string(), *v)).collect(),
    }
}

#[test]
fn ten_triplet_report_matches_hand_table() {
    let m = stub();
    let r = evaluate(&m, &m.vocab, &triplets(), ScoreMode::Mean, EvalOptions::default()).unwrap();
    let domains: Vec<&str> = r.rows.iter().map(|r| r.domain.as_str()).collect();
    assert_eq!(domains, ["x", "y", "all"]);

    // Each sentence scores [target = -1, attribute, EOS = -1].
    let want = [
        ("x", 4, 62.5, 62.5, 46.875, (26.5f64 / 24.0).exp()),
        ("y", 6, 75.0, 350.0 / 6.0, 62.5, (49.0f64 / 36.0).exp()),
        ("all", 10, 70.0, 60.0, 56.0, (75.5f64 / 60.0).exp()),
    ];
    for (row, (d, n, lms, ss, ic, ppl)) in r.rows.iter().zip(want) {
        assert_eq!(row.domain, d);
        assert_eq!(row.n, n);
        assert!((row.lms - lms).abs() < 1e-12, "{d} lms {}", row.lms);
        assert!((row.ss - ss).abs() < 1e-12, "{d} ss {}", row.ss);
        assert!((row.icat - ic).abs() < 1e-9, "{d} icat {}", row.icat);
        assert!((row.perplexity - ppl).abs() < 1e-12, "{d} perplexity {}", row.perplexity);
    }
}

#[test]
fn unrelated_sentences_join_perplexity_on_request() {
    let m = stub();
    let opts = EvalOptions {
        perplexity_includes_unrelated: true,
    };
    let r = evaluate(&m, &m.vocab, &triplets(), ScoreMode::Sum, opts).unwrap();
    let attr: f64 = HAND.iter().map(|h| h.1 + h.2 + h.3).sum();
    let want = ((-attr + 2.0 * 30.0) / 90.0).exp();
    assert!((r.overall().perplexity - want).abs() < 1e-12);
}

#[test]
fn report_icat_recomputes_from_its_own_columns() {
    let m = stub();
    let r = evaluate(&m, &m.vocab, &triplets(), ScoreMode::Mean, EvalOptions::default()).unwrap();
    for row in &r.rows {
        assert!((row.icat - icat(row.lms, row.ss).unwrap()).abs() < 1e-9);
        assert!(row.icat <= row.lms);
    }
}

#[test]
fn single_domain_all_row_equals_domain_row() {
    let m = stub();
    let ts: Vec<Triplet> = triplets().into_iter().filter(|t| t.domain == "y").collect();
    let r = evaluate(&m, &m.vocab, &ts, ScoreMode::Mean, EvalOptions::default()).unwrap();
    assert_eq!(r.rows.len(), 2);
    let (d, all) = (&r.rows[0], &r.rows[1]);
    assert_eq!((d.n, d.lms, d.ss, d.icat, d.perplexity), (all.n, all.lms, all.ss, all.icat, all.perplexity));
}

#[test]
fn scoring_order_does_not_matter() {
    let m = stub();
    let ts = triplets();
    let forward = score_all(&m, &m.vocab, &ts, ScoreMode::Mean).unwrap();
    let mut rev = ts.clone();
    rev.reverse();
    let mut backward = score_all(&m, &m.vocab, &rev, ScoreMode::Mean).unwrap();
    backward.reverse();
    assert_eq!(forward, backward);
}

#[test]
fn boundary_cases() {
    let s = |a: f64, b: f64, u: f64| TripletScores {
        s_stereo: a,
        s_anti: b,
        s_unrel: u,
    };
    assert_eq!(stereotype_score(&[s(0.0, 0.0, -1.0); 4]).unwrap(), 50.0);
    assert_eq!(language_modeling_score(&[s(0.0, 0.0, 1.0); 3]).unwrap(), 0.0);
    let third = stereotype_score(&[s(1.0, 0.0, -1.0), s(0.0, 1.0, -1.0), s(0.0, 1.0, -1.0)]).unwrap();
    assert!((third - 100.0 / 3.0).abs() < 1e-12);
    assert_eq!(language_modeling_score(&[s(1.0, 1.0, 0.0), s(1.0, -1.0, 0.0)]).unwrap(), 75.0);
    assert!(stereotype_score(&[]).is_err());
    assert!(icat(100.5, 50.0).is_err());
    assert!(icat(90.0, -0.1).is_err());
}

fn scores() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    let small = prop_oneof![(-8i32..8).prop_map(|x| x as f64), -10.0f64..10.0];
    prop::collection::vec((small.clone(), small.clone(), small), 1..40)
}

proptest! {
    #[test]
    fn shifting_a_triplet_changes_no_comparison(raw in scores(), shifts in prop::collection::vec(-3i32..3, 40)) {
        let base: Vec<TripletScores> = raw.iter().map(|&(a, b, u)| TripletScores { s_stereo: a, s_anti: b, s_unrel: u }).collect();
        let shifted: Vec<TripletScores> = base
            .iter()
            .zip(&shifts)
            .map(|(s, &c)| {
                let c = c as f64 * 0.25;
                TripletScores { s_stereo: s.s_stereo + c, s_anti: s.s_anti + c, s_unrel: s.s_unrel + c }
            })
            .collect();
        prop_assert_eq!(stereotype_score(&base).unwrap(), stereotype_score(&shifted).unwrap());
        prop_assert_eq!(language_modeling_score(&base).unwrap(), language_modeling_score(&shifted).unwrap());
    }

    #[test]
    fn icat_is_symmetric_and_bounded(lms in 0.0f64..=100.0, ss in 0.0f64..=100.0) {
        let a = icat(lms, ss).unwrap();
        prop_assert!((a - icat(lms, 100.0 - ss).unwrap()).abs() < 1e-9);
        prop_assert!(a >= 0.0 && a <= lms + 1e-12);
        prop_assert!((icat(lms, 50.0).unwrap() - lms).abs() < 1e-12);
        prop_assert_eq!(icat(lms, 0.0).unwrap(), 0.0);
        prop_assert_eq!(icat(lms, 100.0).unwrap(), 0.0);
    }
}
