//! Downstream probe: multinomial logistic regression on mean-pooled final
//! hidden states, used to check that fine-tuning does not wreck the
//! representation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub text: String,
    pub label: usize,
    /// `"train"` or `"test"`.
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub train: Vec<ProbeExample>,
    pub test: Vec<ProbeExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub classes: usize,
}

const STEPS: usize = 300;
const LEARNING_RATE: f64 = 0.5;
const L2: f64 = 1e-4;

impl ProbeTask {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_examples(crate::io::read_jsonl(path)?)
    }

    pub fn from_examples(examples: Vec<ProbeExample>) -> Result<Self> {
        let mut task = ProbeTask {
            train: Vec::new(),
            test: Vec::new(),
        };
        for ex in examples {
            match ex.split.as_str() {
                "train" => task.train.push(ex),
                "test" => task.test.push(ex),
                other => return Err(Error::Input(format!("unknown probe split `{other}`"))),
            }
        }
        let mut labels: Vec<usize> = task.train.iter().map(|e| e.label).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::Input(format!(
                "probe training split needs at least two classes, found {}",
                labels.len()
            )));
        }
        if task.test.is_empty() {
            return Err(Error::Input("probe test split is empty".into()));
        }
        Ok(task)
    }

    fn classes(&self) -> usize {
        self.train.iter().chain(&self.test).map(|e| e.label).max().unwrap_or(0) + 1
    }
}

fn features(model: &dyn LanguageModel, vocab: &Vocab, examples: &[ProbeExample]) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|ex| {
            let h = model.hidden(&vocab.encode(&ex.text))?;
            let (t, d) = h.as_matrix();
            let mut mean = vec![0.0; d];
            for row in h.values().chunks(d) {
                mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x as f64);
            }
            mean.iter_mut().for_each(|m| *m /= t as f64);
            Ok(mean)
        })
        .collect()
}

/// Fits the probe on the train split and reports accuracy on both splits.
/// Features are standardised with train statistics; training is full-batch
/// gradient descent from zero weights, so the result is deterministic.
pub fn downstream_probe(model: &dyn LanguageModel, vocab: &Vocab, task: &ProbeTask) -> Result<ProbeResult> {
    let k = task.classes();
    let mut xtr = features(model, vocab, &task.train)?;
    let mut xte = features(model, vocab, &task.test)?;
    let d = xtr[0].len();
    let n = xtr.len() as f64;
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for x in &xtr {
        mu.iter_mut().zip(x).for_each(|(m, &v)| *m += v / n);
    }
    for x in &xtr {
        sd.iter_mut().zip(x.iter().zip(&mu)).for_each(|(s, (&v, &m))| *s += (v - m).powi(2) / n);
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    for x in xtr.iter_mut().chain(xte.iter_mut()) {
        for j in 0..d {
            x[j] = (x[j] - mu[j]) / sd[j];
        }
    }
    let ytr: Vec<usize> = task.train.iter().map(|e| e.label).collect();
    let yte: Vec<usize> = task.test.iter().map(|e| e.label).collect();

    let mut w = vec![vec![0.0; d + 1]; k];
    let mut probs = vec![0.0; k];
    for _ in 0..STEPS {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for (x, &y) in xtr.iter().zip(&ytr) {
            class_probs(&w, x, &mut probs);
            for c in 0..k {
                let e = probs[c] - if c == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += e * x[j] / n;
                }
                grad[c][d] += e / n;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                let reg = if j < d { L2 * w[c][j] } else { 0.0 };
                w[c][j] -= LEARNING_RATE * (grad[c][j] + reg);
            }
        }
    }
    Ok(ProbeResult {
        train_accuracy: accuracy(&w, &xtr, &ytr),
        test_accuracy: accuracy(&w, &xte, &yte),
        classes: k,
    })
}

fn class_probs(w: &[Vec<f64>], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, wc) in out.iter_mut().zip(w) {
        *o = wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn accuracy(w: &[Vec<f64>], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let mut probs = vec![0.0; w.len()];
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            class_probs(w, x, &mut probs);
            let best = (0..probs.len()).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
            best == y
        })
        .count();
    100.0 * hits as f64 / ys.len() as f64
}
