//! Decoder-only causal transformer.
//!
//! Pre-norm residual blocks with GELU MLPs and learned positional embeddings.
//! Every linear weight is stored `[out, in]` and applied as `x · Wᵀ`; the four
//! attention projections carry no bias.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::tape::{Span, Tape, Var};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::Vocab;

pub const CHECKPOINT_MAGIC: &str = "FAIRLM1";
const LN_EPS: Float = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// The shipped toy configuration.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_seq_len: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return fail("d_ff and max_seq_len must be positive".into());
        }
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} leaves no room beyond reserved ids", self.vocab_size));
        }
        Ok(())
    }

    /// Parameters in one transformer block.
    pub fn per_layer_param_count(&self) -> u64 {
        let (d, f) = (self.d_model as u64, self.d_ff as u64);
        4 * d * d + (d * f + f) + (f * d + d) + 4 * d
    }

    /// Parameter total from the architecture formula. `n_layers = 0` is
    /// accepted and gives the embeddings-plus-head baseline.
    pub fn closed_form_param_count(&self) -> u64 {
        let (v, d, s) = (self.vocab_size as u64, self.d_model as u64, self.max_seq_len as u64);
        v * d + s * d + self.n_layers as u64 * self.per_layer_param_count() + 2 * d + d * v + v
    }
}

/// How a sentence's token log-probabilities are reduced to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Sum,
    #[default]
    Mean,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ScoreMode::Sum),
            "mean" | "per-token-mean" => Ok(ScoreMode::Mean),
            other => Err(Error::Input(format!("unknown score mode `{other}` (expected mean|sum)"))),
        }
    }
}

impl ScoreMode {
    pub fn reduce(self, log_probs: &[Float]) -> f64 {
        let total: f64 = log_probs.iter().map(|&x| x as f64).sum();
        match self {
            ScoreMode::Sum => total,
            ScoreMode::Mean => total / log_probs.len() as f64,
        }
    }

    pub fn reduce_f64(self, log_probs: &[f64]) -> f64 {
        let total: f64 = log_probs.iter().sum();
        match self {
            ScoreMode::Sum => total,
            ScoreMode::Mean => total / log_probs.len() as f64,
        }
    }
}

/// The four bias-free attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMatrix {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl AttnMatrix {
    pub const ALL: [AttnMatrix; 4] = [AttnMatrix::Wq, AttnMatrix::Wk, AttnMatrix::Wv, AttnMatrix::Wo];

    pub fn name(self) -> &'static str {
        match self {
            AttnMatrix::Wq => "wq",
            AttnMatrix::Wk => "wk",
            AttnMatrix::Wv => "wv",
            AttnMatrix::Wo => "wo",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for AttnMatrix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttnMatrix::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown attention matrix `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embeddings,
    Attention,
    Mlp,
    Norms,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ParamCount {
    pub embeddings: u64,
    pub attention: u64,
    pub mlp: u64,
    pub norms: u64,
    pub head: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn: [Tensor; 4],
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
}

impl Block {
    fn fields(&self) -> [(&'static str, ParamGroup, &Tensor); 12] {
        use ParamGroup::*;
        [
            ("ln1.gain", Norms, &self.ln1_gain),
            ("ln1.bias", Norms, &self.ln1_bias),
            ("attn.wq", Attention, &self.attn[0]),
            ("attn.wk", Attention, &self.attn[1]),
            ("attn.wv", Attention, &self.attn[2]),
            ("attn.wo", Attention, &self.attn[3]),
            ("ln2.gain", Norms, &self.ln2_gain),
            ("ln2.bias", Norms, &self.ln2_bias),
            ("mlp.in.weight", Mlp, &self.mlp_in),
            ("mlp.in.bias", Mlp, &self.mlp_in_bias),
            ("mlp.out.weight", Mlp, &self.mlp_out),
            ("mlp.out.bias", Mlp, &self.mlp_out_bias),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        let [q, k, v, o] = &mut self.attn;
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            q,
            k,
            v,
            o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLM {
    config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head: Tensor,
    pub head_bias: Tensor,
}

/// Packed sequences ready for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub positions: Vec<usize>,
    pub spans: Vec<Span>,
    /// Next-token targets aligned with `inputs`; empty for inference batches.
    pub targets: Vec<usize>,
}

impl Batch {
    /// Feeds every token.
    pub fn inference<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        Self::pack(seqs.iter().map(|s| (s.as_ref(), None)))
    }

    /// Feeds `seq[..t-1]` and targets `seq[1..]` for each sequence.
    pub fn next_token<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        for s in seqs {
            if s.as_ref().len() < 2 {
                return Err(Error::Input(format!(
                    "sequence of {} tokens has nothing to predict",
                    s.as_ref().len()
                )));
            }
        }
        Self::pack(seqs.iter().map(|s| {
            let s = s.as_ref();
            (&s[..s.len() - 1], Some(&s[1..]))
        }))
    }

    fn pack<'s>(items: impl Iterator<Item = (&'s [usize], Option<&'s [usize]>)>) -> Result<Self> {
        let mut b = Batch {
            inputs: Vec::new(),
            positions: Vec::new(),
            spans: Vec::new(),
            targets: Vec::new(),
        };
        for (inp, tgt) in items {
            if inp.is_empty() {
                return Err(Error::Input("empty sequence".into()));
            }
            b.spans.push(Span {
                start: b.inputs.len(),
                len: inp.len(),
            });
            b.inputs.extend_from_slice(inp);
            b.positions.extend(0..inp.len());
            if let Some(t) = tgt {
                b.targets.extend_from_slice(t);
            }
        }
        if b.spans.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.inputs.len()
    }
}

/// Vars produced by recording one forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub logits: Var,
    pub hidden: Var,
    /// One leaf per parameter, in [`TransformerLM::named_params`] order.
    pub params: Vec<Var>,
    /// `(A, B)` leaves, in the order of the adapter slice given to `record`.
    pub adapters: Vec<(Var, Var)>,
}

impl TransformerLM {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f, s) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        let mut w = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng).with_requires_grad(true);
        let tok_emb = w(&[v, d]);
        let pos_emb = w(&[s, d]);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = [w(&[d, d]), w(&[d, d]), w(&[d, d]), w(&[d, d])];
            let mlp_in = w(&[f, d]);
            let mlp_out = w(&[d, f]);
            blocks.push(Block {
                ln1_gain: Tensor::ones(&[d]).with_requires_grad(true),
                ln1_bias: Tensor::zeros(&[d]).with_requires_grad(true),
                attn,
                ln2_gain: Tensor::ones(&[d]).with_requires_grad(true),
                ln2_bias: Tensor::zeros(&[d]).with_requires_grad(true),
                mlp_in,
                mlp_in_bias: Tensor::zeros(&[f]).with_requires_grad(true),
                mlp_out,
                mlp_out_bias: Tensor::zeros(&[d]).with_requires_grad(true),
            });
        }
        let head = w(&[v, d]);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::ones(&[d]).with_requires_grad(true),
            lnf_bias: Tensor::zeros(&[d]).with_requires_grad(true),
            head,
            head_bias: Tensor::zeros(&[v]).with_requires_grad(true),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), ParamGroup::Embeddings, &self.tok_emb),
            ("pos_emb".to_string(), ParamGroup::Embeddings, &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, g, t) in b.fields() {
                out.push((format!("layers.{i}.{name}"), g, t));
            }
        }
        out.push(("lnf.gain".into(), ParamGroup::Norms, &self.lnf_gain));
        out.push(("lnf.bias".into(), ParamGroup::Norms, &self.lnf_bias));
        out.push(("head.weight".into(), ParamGroup::Head, &self.head));
        out.push(("head.bias".into(), ParamGroup::Head, &self.head_bias));
        out
    }

    /// Mutable view in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.head,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(on));
    }

    pub fn attn_matrix(&self, layer: usize, m: AttnMatrix) -> &Tensor {
        &self.blocks[layer].attn[m.index()]
    }

    pub fn attn_matrix_mut(&mut self, layer: usize, m: AttnMatrix) -> &mut Tensor {
        &mut self.blocks[layer].attn[m.index()]
    }

    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for (_, g, t) in self.named_params() {
            let n = t.len() as u64;
            match g {
                ParamGroup::Embeddings => c.embeddings += n,
                ParamGroup::Attention => c.attention += n,
                ParamGroup::Mlp => c.mlp += n,
                ParamGroup::Norms => c.norms += n,
                ParamGroup::Head => c.head += n,
            }
            c.total += n;
        }
        c
    }

    fn check_tokens(&self, batch: &Batch) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(&bad) = batch.inputs.iter().chain(&batch.targets).find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: v,
            });
        }
        if let Some(s) = batch.spans.iter().find(|s| s.len > self.config.max_seq_len) {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                s.len, self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Records one forward pass. Adapters, when given, add `scale · x·Aᵀ·Bᵀ`
    /// to their target projection.
    pub fn record<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &Batch,
        adapters: Option<&'a [LoraAdapter]>,
    ) -> Result<Recorded> {
        self.check_tokens(batch)?;
        let params: Vec<Var> = self.named_params().into_iter().map(|(_, _, t)| tape.leaf(t)).collect();
        let mut lookup = vec![[None; 4]; self.blocks.len()];
        let mut adapter_vars = Vec::new();
        for ad in adapters.unwrap_or(&[]) {
            let a = tape.leaf(&ad.a);
            let b = tape.leaf(&ad.b);
            lookup[ad.layer][ad.matrix.index()] = Some((a, b, ad.scale));
            adapter_vars.push((a, b));
        }

        let heads = self.config.n_heads;
        let tok = tape.gather_rows(params[0], &batch.inputs)?;
        let pos = tape.gather_rows(params[1], &batch.positions)?;
        let mut x = tape.add(tok, pos)?;
        for (layer, ad) in lookup.iter().enumerate() {
            let p = &params[2 + 12 * layer..2 + 12 * (layer + 1)];
            let h = tape.layer_norm(x, p[0], p[1], LN_EPS)?;
            let q = attn_linear(tape, h, p[2], ad[AttnMatrix::Wq.index()])?;
            let k = attn_linear(tape, h, p[3], ad[AttnMatrix::Wk.index()])?;
            let v = attn_linear(tape, h, p[4], ad[AttnMatrix::Wv.index()])?;
            let a = tape.causal_attention(q, k, v, &batch.spans, heads)?;
            let o = attn_linear(tape, a, p[5], ad[AttnMatrix::Wo.index()])?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, p[6], p[7], LN_EPS)?;
            let up = tape.matmul_nt(h2, p[8])?;
            let up = tape.add_row(up, p[9])?;
            let act = tape.gelu(up);
            let down = tape.matmul_nt(act, p[10])?;
            let down = tape.add_row(down, p[11])?;
            x = tape.add(x, down)?;
        }
        let n = params.len();
        let hidden = tape.layer_norm(x, params[n - 4], params[n - 3], LN_EPS)?;
        let logits = tape.matmul_nt(hidden, params[n - 2])?;
        let logits = tape.add_row(logits, params[n - 1])?;
        Ok(Recorded {
            logits,
            hidden,
            params,
            adapters: adapter_vars,
        })
    }

    /// Logits `[t, V]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_with(tokens, None)
    }

    pub(crate) fn forward_with(&self, tokens: &[usize], adapters: Option<&[LoraAdapter]>) -> Result<Tensor> {
        let batch = Batch::inference(&[tokens])?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &batch, adapters)?;
        Ok(tape.to_tensor(rec.logits))
    }

    /// Final-norm hidden states `[t, d_model]`.
    pub fn hidden_states(&self, tokens: &[usize]) -> Result<Tensor> {
        self.hidden_states_with(tokens, None)
    }

    pub(crate) fn hidden_states_with(&self, tokens: &[usize], adapters: Option<&[LoraAdapter]>) -> Result<Tensor> {
        let batch = Batch::inference(&[tokens])?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &batch, adapters)?;
        Ok(tape.to_tensor(rec.hidden))
    }

    /// `log p(seq[i] | seq[..i])` for `i = 1..t`, per sequence, in one pass.
    pub fn token_log_probs<S: AsRef<[usize]>>(&self, seqs: &[S]) -> Result<Vec<Vec<Float>>> {
        self.token_log_probs_with(seqs, None)
    }

    pub(crate) fn token_log_probs_with<S: AsRef<[usize]>>(
        &self,
        seqs: &[S],
        adapters: Option<&[LoraAdapter]>,
    ) -> Result<Vec<Vec<Float>>> {
        let batch = Batch::next_token(seqs)?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &batch, adapters)?;
        let v = self.config.vocab_size;
        let logits = tape.value(rec.logits);
        let per_row: Vec<Float> = logits
            .chunks(v)
            .zip(&batch.targets)
            .map(|(row, &t)| row[t] - crate::tape::log_sum_exp(row))
            .collect();
        Ok(batch
            .spans
            .iter()
            .map(|s| per_row[s.start..s.start + s.len].to_vec())
            .collect())
    }

    /// Sentence score: sum or per-token mean of next-token log-probabilities.
    pub fn sentence_log_prob(&self, tokens: &[usize], mode: ScoreMode) -> Result<f64> {
        let lp = self.token_log_probs(&[tokens])?;
        Ok(mode.reduce(&lp[0]))
    }

    /// Mean next-token cross-entropy of a batch, recorded for backward.
    pub fn record_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &Batch,
        adapters: Option<&'a [LoraAdapter]>,
    ) -> Result<(Var, Recorded)> {
        let rec = self.record(tape, batch, adapters)?;
        let loss = tape.cross_entropy(rec.logits, &batch.targets)?;
        Ok((loss, rec))
    }

    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((dst, (want_name, want_shape)), (name, t)) in model.params_mut().into_iter().zip(expected).zip(tensors) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Input(format!(
                    "tensor `{name}` {:?} does not match expected `{want_name}` {want_shape:?}",
                    t.shape()
                )));
            }
            let rg = dst.requires_grad();
            *dst = t.with_requires_grad(rg);
        }
        Ok(model)
    }

    pub fn to_checkpoint_bytes(&self, vocab: Option<&Vocab>) -> Vec<u8> {
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": vocab.map(|v| v.words().to_vec()),
        });
        let named: Vec<(String, &Tensor)> = self.named_params().into_iter().map(|(n, _, t)| (n, t)).collect();
        container::encode(CHECKPOINT_MAGIC, meta, &named)
    }

    pub fn save(&self, path: &Path, vocab: Option<&Vocab>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_checkpoint_bytes(vocab))
    }
}

/// Anything that can score token sequences and expose final hidden states.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Per-sequence next-token log-probabilities, `t - 1` entries each.
    fn score_tokens(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<Float>>>;

    /// Final-norm hidden states `[t, d_model]`.
    fn hidden(&self, tokens: &[usize]) -> Result<Tensor>;
}

impl LanguageModel for TransformerLM {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn score_tokens(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<Float>>> {
        self.token_log_probs(seqs)
    }

    fn hidden(&self, tokens: &[usize]) -> Result<Tensor> {
        self.hidden_states(tokens)
    }
}

fn attn_linear(tape: &mut Tape<'_>, x: Var, w: Var, adapter: Option<(Var, Var, Float)>) -> Result<Var> {
    let base = tape.matmul_nt(x, w)?;
    match adapter {
        None => Ok(base),
        Some((a, b, scale)) => {
            let down = tape.matmul_nt(x, a)?;
            let up = tape.matmul_nt(down, b)?;
            let up = tape.scale(up, scale);
            tape.add(base, up)
        }
    }
}

/// A model plus the vocabulary it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TransformerLM,
    pub vocab: Option<Vocab>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (meta, tensors) = container::decode(CHECKPOINT_MAGIC, bytes, origin)?;
        let bad = |detail: String| Error::Format {
            path: origin.to_path_buf(),
            detail,
        };
        let config: ModelConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| bad(format!("config: {e}")))?;
        let vocab = match &meta["vocab"] {
            serde_json::Value::Null => None,
            v => {
                let words: Vec<String> = serde_json::from_value(v.clone()).map_err(|e| bad(format!("vocab: {e}")))?;
                Some(Vocab::from_tokens(words)?)
            }
        };
        if let Some(v) = &vocab {
            if v.len() != config.vocab_size {
                return Err(bad(format!(
                    "vocab has {} entries but config says {}",
                    v.len(),
                    config.vocab_size
                )));
            }
        }
        let model = TransformerLM::from_named(config, tensors).map_err(|e| bad(e.to_string()))?;
        Ok(Self { model, vocab })
    }

    pub fn vocab(&self) -> Result<&Vocab> {
        self.vocab
            .as_ref()
            .ok_or_else(|| Error::Input("checkpoint carries no vocabulary".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize, seed: u64) -> TransformerLM {
        TransformerLM::new(ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: vocab,
            max_seq_len: 8,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        let m = tiny(10, 1);
        let a = m.forward(&[2, 5, 6, 7, 8]).unwrap();
        let b = m.forward(&[2, 5, 6, 7, 9]).unwrap();
        let v = 10;
        assert_eq!(&a.values()[..4 * v], &b.values()[..4 * v]);
        assert_ne!(&a.values()[4 * v..], &b.values()[4 * v..]);
    }

    #[test]
    fn single_token_shape_and_row_sums() {
        let m = tiny(10, 1);
        let l = m.forward(&[2]).unwrap();
        assert_eq!(l.shape(), &[1, 10]);
        let l = m.forward(&[2, 4, 5, 6]).unwrap();
        for row in l.values().chunks(10) {
            let max = row.iter().cloned().fold(Float::MIN, Float::max);
            let z: f64 = row.iter().map(|x| ((x - max) as f64).exp()).sum();
            let s: f64 = row.iter().map(|x| ((x - max) as f64).exp() / z).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn input_errors() {
        let m = tiny(10, 1);
        assert!(matches!(m.forward(&[2; 9]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[2, 10]), Err(Error::Index { index: 10, .. })));
        assert!(m.sentence_log_prob(&[2], ScoreMode::Sum).is_err());
    }

    #[test]
    fn zeroed_head_is_uniform() {
        let mut m = tiny(5, 3);
        m.head = Tensor::zeros(m.head.shape());
        m.head_bias = Tensor::zeros(m.head_bias.shape());
        let toks = [2, 4, 4, 1, 3];
        let s = m.sentence_log_prob(&toks, ScoreMode::Sum).unwrap();
        let expect = 4.0 * (1.0f64 / 5.0).ln();
        assert!((s - expect).abs() < 1e-12);
        let mean = m.sentence_log_prob(&toks, ScoreMode::Mean).unwrap();
        assert!((mean - s / 4.0).abs() < 1e-15);
    }

    #[test]
    fn chain_rule_oracle() {
        // Score from one packed pass vs. stepping through prefixes.
        let m = tiny(6, 11);
        let toks = [2usize, 4, 5, 4, 4, 3];
        let packed = m.sentence_log_prob(&toks, ScoreMode::Sum).unwrap();
        let mut oracle = 0.0f64;
        for i in 1..toks.len() {
            let logits = m.forward(&toks[..i]).unwrap();
            let row: Vec<f64> = logits.values()[(i - 1) * 6..i * 6].iter().map(|&x| x as f64).collect();
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            oracle += row[toks[i]] - max - z.ln();
        }
        assert!((packed - oracle).abs() < 1e-12, "{packed} vs {oracle}");
        assert!(packed <= 0.0);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let m = tiny(10, 0);
        let c = m.param_count();
        assert_eq!(c.total, m.config().closed_form_param_count());
        assert_eq!(c.embeddings + c.attention + c.mlp + c.norms + c.head, c.total);
        assert_eq!(c.attention, 2 * 4 * 64);

        let base = ModelConfig {
            n_layers: 0,
            ..m.config().clone()
        };
        let (v, d, s) = (10u64, 8u64, 8u64);
        assert_eq!(base.closed_form_param_count(), v * d + s * d + 2 * d + d * v + v);

        let mut cfg = ModelConfig::toy(200);
        let one = cfg.closed_form_param_count();
        cfg.n_layers *= 2;
        assert_eq!(cfg.closed_form_param_count() - one, 4 * cfg.per_layer_param_count());
    }

    #[test]
    fn toy_config_count_by_hand() {
        // 4 layers, d=128, d_ff=512, V=200, S=16
        let per_layer = 4 * 128 * 128 + 128 * 512 + 512 + 512 * 128 + 128 + 4 * 128;
        let total = 200 * 128 + 16 * 128 + 4 * per_layer + 2 * 128 + 128 * 200 + 200;
        let m = TransformerLM::new(ModelConfig::toy(200)).unwrap();
        assert_eq!(m.param_count().total, total as u64);
    }

    #[test]
    fn seeds_matter() {
        let (a, b) = (tiny(10, 1), tiny(10, 2));
        assert_ne!(a.forward(&[2, 4]).unwrap(), b.forward(&[2, 4]).unwrap());
        assert_eq!(a, tiny(10, 1));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy(50);
        c.n_heads = 3;
        assert!(matches!(TransformerLM::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(7, 5);
        let vocab = Vocab::from_tokens(["x", "y", "z"].map(String::from)).unwrap();
        let bytes = m.to_checkpoint_bytes(Some(&vocab));
        assert!(bytes.starts_with(b"FAIRLM1\n"));
        let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.vocab.unwrap(), vocab);
        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(Checkpoint::from_bytes(&broken, Path::new("mem")).is_err());
    }

    #[test]
    fn batched_scores_match_single() {
        let m = tiny(10, 4);
        let seqs = vec![vec![2, 4, 5, 3], vec![2, 6, 3], vec![2, 7, 8, 9, 3]];
        let batched = m.token_log_probs(&seqs).unwrap();
        for (s, b) in seqs.iter().zip(&batched) {
            let single = &m.token_log_probs(&[s]).unwrap()[0];
            for (x, y) in single.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
