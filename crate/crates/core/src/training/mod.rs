//! Next-token training loops: full-parameter pretraining and adapter-only
//! debias fine-tuning. Both minimise the same mean cross-entropy.

mod optim;
pub mod probe;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdaptedModel;
use crate::model::{Batch, ModelConfig, TransformerLM};
use crate::tape::Tape;
use crate::tensor::{Float, Tensor};

pub use optim::{clip_grad_norm, Adam};
pub use probe::{downstream_probe, ProbeExample, ProbeResult, ProbeTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
            shuffle: true,
        }
    }

    pub fn debias_default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-4,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0,1) and eps > 0".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be > 0 when set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    /// Token-weighted mean loss over the epoch.
    pub loss: f64,
}

/// Renders `epoch,split,loss` CSV.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,split,loss\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.split, e.loss));
    }
    s
}

/// Batches of sequence indices for one epoch; shuffled by `(seed, epoch)`.
pub fn epoch_order(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
        idx.shuffle(&mut rng);
    }
    idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

fn run_epochs<F>(seqs: &[Vec<usize>], cfg: &TrainConfig, split: &str, mut step: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&Batch) -> Result<f64>,
{
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in epoch_order(seqs.len(), cfg, epoch) {
            let picked: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let batch = Batch::next_token(&picked)?;
            let loss = step(&batch)?;
            total += loss * batch.rows() as f64;
            tokens += batch.rows();
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            split: split.to_string(),
            loss: total / tokens as f64,
        });
    }
    Ok(log)
}

/// Mean next-token loss over `seqs` without updating anything.
pub fn mean_loss(model: &TransformerLM, adapters: Option<&AdaptedModel>, seqs: &[Vec<usize>]) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in seqs.chunks(64) {
        let lp = match adapters {
            Some(a) => a.token_log_probs(chunk)?,
            None => model.token_log_probs(chunk)?,
        };
        for row in lp {
            total -= row.iter().map(|&x| x as f64).sum::<f64>();
            tokens += row.len();
        }
    }
    Ok(total / tokens as f64)
}

/// Trains a fresh model on `seqs` (already encoded, BOS..EOS) with every
/// parameter trainable.
pub fn pretrain(config: ModelConfig, seqs: &[Vec<usize>], cfg: &TrainConfig) -> Result<(TransformerLM, Vec<EpochLog>)> {
    let mut model = TransformerLM::new(config)?;
    let log = continue_pretraining(&mut model, seqs, cfg)?;
    Ok((model, log))
}

pub fn continue_pretraining(model: &mut TransformerLM, seqs: &[Vec<usize>], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    let mut adam = Adam::new(cfg);
    run_epochs(seqs, cfg, "train", |batch| {
        let (loss, grads, rec) = {
            let mut tape = Tape::new();
            let (loss, rec) = model.record_loss(&mut tape, batch, None)?;
            let grads = tape.backward(loss)?;
            (tape.value(loss)[0] as f64, grads, rec)
        };
        let mut params = model.params_mut();
        for (p, &v) in params.iter_mut().zip(&rec.params) {
            grads.accumulate_into(v, p);
        }
        apply_update(&mut adam, &mut params, cfg);
        Ok(loss)
    })
}

/// Fine-tunes only the adapters on `seqs`; the base must come out bit-identical.
pub fn debias_finetune(
    adapted: &mut AdaptedModel,
    seqs: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if adapted.adapters().is_empty() {
        return Err(Error::Contract("debias fine-tuning needs injected adapters".into()));
    }
    if seqs.is_empty() {
        return Err(Error::Input("no perturbed sentences to fine-tune on".into()));
    }
    let before = adapted.frozen_digest();
    let mut adam = Adam::new(cfg);
    let log = run_epochs(seqs, cfg, "debias", |batch| {
        let (loss, grads, rec) = {
            let mut tape = Tape::new();
            let (loss, rec) = adapted.base().record_loss(&mut tape, batch, Some(adapted.adapters()))?;
            let grads = tape.backward(loss)?;
            (tape.value(loss)[0] as f64, grads, rec)
        };
        let mut params: Vec<&mut Tensor> = Vec::with_capacity(2 * rec.adapters.len());
        let mut vars = Vec::with_capacity(2 * rec.adapters.len());
        for (ad, &(va, vb)) in adapted.adapters_mut().iter_mut().zip(&rec.adapters) {
            params.push(&mut ad.a);
            params.push(&mut ad.b);
            vars.extend([va, vb]);
        }
        for (p, &v) in params.iter_mut().zip(&vars) {
            grads.accumulate_into(v, p);
        }
        apply_update(&mut adam, &mut params, cfg);
        Ok(loss)
    })?;
    if adapted.frozen_digest() != before {
        return Err(Error::Contract("frozen base parameters changed during fine-tuning".into()));
    }
    Ok(log)
}

fn apply_update(adam: &mut Adam, params: &mut [&mut Tensor], cfg: &TrainConfig) {
    if let Some(max) = cfg.grad_clip {
        clip_grad_norm(params, max as Float);
    }
    adam.step(params);
    params.iter_mut().for_each(|p| p.zero_grad());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 8,
            max_seq_len: 8,
            seed: 1,
        }
    }

    fn corpus() -> Vec<Vec<usize>> {
        (0..24).map(|i| vec![2, 4 + i % 2, 6 + i % 2, 7, 3]).collect()
    }

    fn fast() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-2,
            ..TrainConfig::pretrain_default()
        }
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let (m1, log) = pretrain(tiny_cfg(), &corpus(), &fast()).unwrap();
        assert!(log[0].loss > log[1].loss && log[1].loss > log[2].loss, "{log:?}");
        let (m2, _) = pretrain(tiny_cfg(), &corpus(), &fast()).unwrap();
        assert_eq!(m1.to_checkpoint_bytes(None), m2.to_checkpoint_bytes(None));
    }

    #[test]
    fn order_depends_on_seed_and_epoch() {
        let cfg = fast();
        assert_ne!(epoch_order(50, &cfg, 0), epoch_order(50, &cfg, 1));
        assert_eq!(epoch_order(50, &cfg, 2), epoch_order(50, &cfg, 2));
        let flat: Vec<usize> = {
            let mut v: Vec<usize> = epoch_order(50, &cfg, 0).concat();
            v.sort();
            v
        };
        assert_eq!(flat, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(pretrain(tiny_cfg(), &[], &fast()), Err(Error::Input(_))));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..fast()
        };
        assert!(matches!(pretrain(tiny_cfg(), &corpus(), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn debias_keeps_base_and_moves_adapters() {
        let (base, _) = pretrain(tiny_cfg(), &corpus(), &fast()).unwrap();
        let mut adapted = AdaptedModel::inject(base.clone(), LoraConfig::default()).unwrap();
        let digest = adapted.frozen_digest();
        let before = adapted.adapters().to_vec();
        let log = debias_finetune(&mut adapted, &corpus(), &fast()).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(adapted.frozen_digest(), digest);
        assert_ne!(adapted.adapters(), before.as_slice());
        assert!(adapted.adapters().iter().all(|a| a.a.grad().is_none() && a.b.grad().is_none()));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (base, _) = pretrain(tiny_cfg(), &corpus(), &fast()).unwrap();
        let mut adapted = AdaptedModel::inject(base.clone(), LoraConfig::default()).unwrap();
        let snapshot = adapted.clone();
        let cfg = TrainConfig { epochs: 0, ..fast() };
        assert!(debias_finetune(&mut adapted, &corpus(), &cfg).unwrap().is_empty());
        assert_eq!(adapted, snapshot);
        assert_eq!(adapted.merge(), base);
    }

    #[test]
    fn csv_log_format() {
        let log = vec![EpochLog {
            epoch: 1,
            split: "train".into(),
            loss: 0.5,
        }];
        assert_eq!(log_csv(&log), "epoch,split,loss\n1,train,0.5\n");
    }
}
