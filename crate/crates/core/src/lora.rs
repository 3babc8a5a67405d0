//! Low-rank adapters on the attention projections.
//!
//! Each targeted `W: [d_out, d_in]` gains a trainable `A: [r, d_in]` and
//! `B: [d_out, r]`; the projection becomes `x · (W + (α/r)·B·A)ᵀ`. `B` starts
//! at zero, so a freshly injected model computes exactly what its base does.
//! The base stays frozen throughout.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{Error, Result};
use crate::model::{AttnMatrix, LanguageModel, ScoreMode, TransformerLM};
use crate::tensor::{gemm, Float, Tensor};

pub const ADAPTER_MAGIC: &str = "FAIRLM-LORA1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "all_targets")]
    pub targets: Vec<AttnMatrix>,
    #[serde(default)]
    pub seed: u64,
}

fn all_targets() -> Vec<AttnMatrix> {
    AttnMatrix::ALL.to_vec()
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            alpha: 2.0,
            targets: all_targets(),
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> Float {
        (self.alpha / self.rank as f64) as Float
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 || self.rank > d_model {
            return Err(Error::Config(format!(
                "lora rank {} must be in 1..={d_model}",
                self.rank
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("lora alpha must be > 0, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora target set is empty".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(Error::Config("lora target set repeats a matrix".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer: usize,
    pub matrix: AttnMatrix,
    /// `[r, d_in]`
    pub a: Tensor,
    /// `[d_out, r]`
    pub b: Tensor,
    pub scale: Float,
}

impl LoraAdapter {
    pub fn param_count(&self) -> u64 {
        (self.a.len() + self.b.len()) as u64
    }

    pub fn name(&self) -> String {
        format!("layers.{}.attn.{}", self.layer, self.matrix.name())
    }

    /// `scale · B · A`, shaped like the wrapped matrix.
    pub fn delta(&self) -> Tensor {
        let (d_out, r) = (self.b.shape()[0], self.b.shape()[1]);
        let d_in = self.a.shape()[1];
        let mut out = vec![0.0; d_out * d_in];
        gemm(d_out, r, d_in, self.scale, self.b.values(), false, self.a.values(), false, 0.0, &mut out);
        Tensor::from_vec(&[d_out, d_in], out).expect("delta shape")
    }
}

/// Exact parameter accounting for an adapted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrainableFraction {
    pub adapter_params: u64,
    pub total_params: u64,
}

impl TrainableFraction {
    pub fn fraction(&self) -> f64 {
        self.adapter_params as f64 / self.total_params as f64
    }
}

/// A frozen base model with adapters attached.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    base: TransformerLM,
    config: LoraConfig,
    adapters: Vec<LoraAdapter>,
}

impl AdaptedModel {
    /// Freezes every base parameter and attaches adapters to each targeted
    /// matrix of every layer. `A ~ normal(0, 1/r)`, `B = 0`.
    pub fn inject(mut base: TransformerLM, config: LoraConfig) -> Result<Self> {
        let d = base.config().d_model;
        config.validate(d)?;
        base.set_trainable(false);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 1.0 / config.rank as f64;
        let mut targets = config.targets.clone();
        targets.sort();
        let mut adapters = Vec::new();
        for layer in 0..base.config().n_layers {
            for &m in &targets {
                let w = base.attn_matrix(layer, m).shape();
                let (d_out, d_in) = (w[0], w[1]);
                adapters.push(LoraAdapter {
                    layer,
                    matrix: m,
                    a: Tensor::randn(&[config.rank, d_in], std, &mut rng).with_requires_grad(true),
                    b: Tensor::zeros(&[d_out, config.rank]).with_requires_grad(true),
                    scale: config.scale(),
                });
            }
        }
        Ok(Self {
            base,
            config,
            adapters,
        })
    }

    pub fn base(&self) -> &TransformerLM {
        &self.base
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn trainable_fraction(&self) -> TrainableFraction {
        let adapter_params: u64 = self.adapters.iter().map(LoraAdapter::param_count).sum();
        TrainableFraction {
            adapter_params,
            total_params: self.base.param_count().total + adapter_params,
        }
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.base.forward_with(tokens, Some(&self.adapters))
    }

    pub fn hidden_states(&self, tokens: &[usize]) -> Result<Tensor> {
        self.base.hidden_states_with(tokens, Some(&self.adapters))
    }

    pub fn token_log_probs<S: AsRef<[usize]>>(&self, seqs: &[S]) -> Result<Vec<Vec<Float>>> {
        self.base.token_log_probs_with(seqs, Some(&self.adapters))
    }

    pub fn sentence_log_prob(&self, tokens: &[usize], mode: ScoreMode) -> Result<f64> {
        Ok(mode.reduce(&self.token_log_probs(&[tokens])?[0]))
    }

    /// Plain model with `W + scale·B·A` baked into every targeted matrix.
    pub fn merge(&self) -> TransformerLM {
        let mut merged = self.base.clone();
        for ad in &self.adapters {
            let w = merged.attn_matrix_mut(ad.layer, ad.matrix);
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            gemm(
                d_out,
                self.config.rank,
                d_in,
                ad.scale,
                ad.b.values(),
                false,
                ad.a.values(),
                false,
                1.0,
                w.values_mut(),
            );
        }
        merged.set_trainable(true);
        merged
    }

    /// SHA-256 over every frozen base tensor, in parameter order.
    pub fn frozen_digest(&self) -> String {
        params_digest(&self.base)
    }

    pub fn to_adapter_bytes(&self) -> Vec<u8> {
        let meta = serde_json::json!({
            "config": self.config,
            "d_model": self.base.config().d_model,
            "n_layers": self.base.config().n_layers,
        });
        let mut named = Vec::with_capacity(2 * self.adapters.len());
        for ad in &self.adapters {
            named.push((format!("{}.lora_a", ad.name()), &ad.a));
            named.push((format!("{}.lora_b", ad.name()), &ad.b));
        }
        container::encode(ADAPTER_MAGIC, meta, &named)
    }

    pub fn save_adapters(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_adapter_bytes())
    }

    pub fn load_adapters(base: TransformerLM, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_adapter_bytes(base, &bytes, path)
    }

    pub fn from_adapter_bytes(base: TransformerLM, bytes: &[u8], origin: &Path) -> Result<Self> {
        let (meta, tensors) = container::decode(ADAPTER_MAGIC, bytes, origin)?;
        let config: LoraConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            detail: format!("adapter config: {e}"),
        })?;
        let mut adapted = Self::inject(base, config)?;
        if tensors.len() != 2 * adapted.adapters.len() {
            return Err(Error::Incompatible {
                matrix: "<all>".into(),
                detail: format!(
                    "file holds {} tensors, model expects {}",
                    tensors.len(),
                    2 * adapted.adapters.len()
                ),
            });
        }
        for (ad, pair) in adapted.adapters.iter_mut().zip(tensors.chunks(2)) {
            let name = ad.name();
            for ((got_name, got), (suffix, want)) in pair.iter().zip([("lora_a", &mut ad.a), ("lora_b", &mut ad.b)]) {
                let want_name = format!("{name}.{suffix}");
                if *got_name != want_name {
                    return Err(Error::Incompatible {
                        matrix: want_name,
                        detail: format!("found `{got_name}` in its place"),
                    });
                }
                if got.shape() != want.shape() {
                    return Err(Error::Incompatible {
                        matrix: want_name,
                        detail: format!("shape {:?} does not fit {:?}", got.shape(), want.shape()),
                    });
                }
                *want = got.clone().with_requires_grad(true);
            }
        }
        Ok(adapted)
    }
}

impl LanguageModel for AdaptedModel {
    fn vocab_size(&self) -> usize {
        self.base.config().vocab_size
    }

    fn score_tokens(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<Float>>> {
        self.token_log_probs(seqs)
    }

    fn hidden(&self, tokens: &[usize]) -> Result<Tensor> {
        self.hidden_states(tokens)
    }
}

pub fn params_digest(model: &TransformerLM) -> String {
    let mut h = Sha256::new();
    for (name, _, t) in model.named_params() {
        h.update(name.as_bytes());
        for v in t.values() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> TransformerLM {
        TransformerLM::new(ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 9,
            max_seq_len: 8,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn identity_at_init() {
        let base = tiny();
        let adapted = AdaptedModel::inject(base.clone(), LoraConfig::default()).unwrap();
        let toks = [2, 4, 5, 6, 3];
        assert_eq!(adapted.forward(&toks).unwrap(), base.forward(&toks).unwrap());
        assert_eq!(adapted.adapters().len(), 2 * 4);
        assert!(adapted.base().named_params().iter().all(|(_, _, t)| !t.requires_grad()));
    }

    #[test]
    fn rank_bounds() {
        let cfg = LoraConfig {
            rank: 9,
            ..LoraConfig::default()
        };
        assert!(matches!(AdaptedModel::inject(tiny(), cfg), Err(Error::Config(_))));
        let cfg = LoraConfig {
            targets: vec![AttnMatrix::Wq, AttnMatrix::Wq],
            ..LoraConfig::default()
        };
        assert!(AdaptedModel::inject(tiny(), cfg).is_err());
    }

    #[test]
    fn fraction_accounting() {
        let a1 = AdaptedModel::inject(tiny(), LoraConfig::default()).unwrap();
        let f1 = a1.trainable_fraction();
        // r·(d_in + d_out) per matrix, 2 layers × 4 matrices
        assert_eq!(f1.adapter_params, 8 * (8 + 8));
        assert_eq!(f1.total_params, tiny().param_count().total + f1.adapter_params);
        let a2 = AdaptedModel::inject(
            tiny(),
            LoraConfig {
                rank: 2,
                ..LoraConfig::default()
            },
        )
        .unwrap();
        assert_eq!(a2.trainable_fraction().adapter_params, 2 * f1.adapter_params);
    }

    #[test]
    fn merge_untrained_is_base() {
        let base = tiny();
        let adapted = AdaptedModel::inject(base.clone(), LoraConfig::default()).unwrap();
        let merged = adapted.merge();
        assert_eq!(merged, base);
        let again = AdaptedModel::inject(merged.clone(), LoraConfig::default()).unwrap().merge();
        assert_eq!(again, merged);
    }

    #[test]
    fn merge_matches_adapted_after_perturbation() {
        let mut adapted = AdaptedModel::inject(tiny(), LoraConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for ad in adapted.adapters_mut() {
            ad.b = Tensor::randn(ad.b.shape(), 0.1, &mut rng).with_requires_grad(true);
        }
        let merged = adapted.merge();
        let toks = [2, 7, 5, 6, 3];
        let (x, y) = (adapted.forward(&toks).unwrap(), merged.forward(&toks).unwrap());
        let diff = x.values().iter().zip(y.values()).map(|(a, b)| (a - b).abs()).fold(0.0, Float::max);
        assert!(diff < 1e-6, "{diff}");
        assert!(diff > 0.0 || x == y);
    }

    #[test]
    fn adapter_file_round_trip_and_mismatch() {
        let mut adapted = AdaptedModel::inject(tiny(), LoraConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ad in adapted.adapters_mut() {
            ad.b = Tensor::randn(ad.b.shape(), 0.1, &mut rng).with_requires_grad(true);
        }
        let bytes = adapted.to_adapter_bytes();
        assert!(bytes.starts_with(b"FAIRLM-LORA1\n"));
        let back = AdaptedModel::from_adapter_bytes(tiny(), &bytes, Path::new("mem")).unwrap();
        assert_eq!(back, adapted);

        let wider = TransformerLM::new(ModelConfig {
            d_model: 12,
            ..tiny().config().clone()
        })
        .unwrap();
        let err = AdaptedModel::from_adapter_bytes(wider, &bytes, Path::new("mem")).unwrap_err();
        match err {
            Error::Incompatible { matrix, .. } => assert_eq!(matrix, "layers.0.attn.wq.lora_a"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
