//! Encoder building blocks shared by every model variant.

use rand::Rng;

use crate::corpus::TokenSequence;
use crate::error::{shape_err, Error, Result};
use crate::nn::params::{ParamStore, Session};
use crate::nn::tape::{softmax_into, Activation, AttentionLayout, Var};
use crate::nn::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROB_EPS: f64 = 1e-12;
const EMBED_STD: f64 = 0.3;

/// Shape hyperparameters of a text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads must divide hidden size {}", self.heads, self.dim)));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Token sequences of one common length, flattened for batched kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub count: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl SeqBatch {
    pub fn new(seqs: &[&TokenSequence]) -> Result<Self> {
        let len = seqs.first().map_or(0, |s| s.len());
        if seqs.iter().any(|s| s.len() != len) {
            return shape_err("sequences in a batch must share one length");
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(&s.ids);
            mask.extend(s.attention_mask.iter().map(|&m| m == 1));
        }
        Ok(Self { count: seqs.len(), len, ids, mask })
    }

    pub fn from_owned(seqs: &[TokenSequence]) -> Result<Self> {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        Self::new(&refs)
    }
}

fn normal_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.init_normal(&format!("{prefix}/w"), &[fan_in, fan_out], normal_std(fan_in), rng);
    store.init_const(&format!("{prefix}/b"), &[fan_out], 0.0);
}

/// `x W + b` with parameters `{prefix}/w`, `{prefix}/b`.
pub fn linear(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{prefix}/w"))?;
    let b = s.param(&format!("{prefix}/b"))?;
    let y = s.tape.matmul(x, w)?;
    s.tape.add_bias(y, b)
}

pub fn init_embeddings(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) {
    store.init_normal(&format!("{prefix}/tok"), &[cfg.vocab_size, cfg.dim], EMBED_STD, rng);
    store.init_normal(&format!("{prefix}/pos"), &[cfg.max_positions, cfg.dim], EMBED_STD, rng);
}

/// Row `i` of each sequence is `tok[ids[i]] + pos[i]`.
pub fn embed_sequences(s: &mut Session, prefix: &str, batch: &SeqBatch) -> Result<Var> {
    let tok = s.param(&format!("{prefix}/tok"))?;
    let pos = s.param(&format!("{prefix}/pos"))?;
    let positions = s.tape.value(pos).rows();
    if batch.len > positions {
        return Err(Error::OutOfRange(format!("sequence length {} exceeds {positions} positions", batch.len)));
    }
    let pos_idx: Vec<usize> = (0..batch.count).flat_map(|_| 0..batch.len).collect();
    let t = s.tape.gather_rows(tok, &batch.ids)?;
    let p = s.tape.gather_rows(pos, &pos_idx)?;
    s.tape.add(t, p)
}

pub fn init_transformer_layer(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let d = cfg.dim;
    for name in ["ln1", "ln2"] {
        store.init_const(&format!("{prefix}/{name}_g"), &[d], 1.0);
        store.init_const(&format!("{prefix}/{name}_b"), &[d], 0.0);
    }
    for name in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}/{name}"), d, d, rng);
    }
    init_linear(store, &format!("{prefix}/ffn1"), d, d * cfg.ffn_mult, rng);
    init_linear(store, &format!("{prefix}/ffn2"), d * cfg.ffn_mult, d, rng);
}

fn layer_norm(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let g = s.param(&format!("{prefix}_g"))?;
    let b = s.param(&format!("{prefix}_b"))?;
    s.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `+ FFN(LN(.))` with a
/// GELU feed-forward. Padded positions are excluded as attention keys.
pub fn transformer_layer(s: &mut Session, prefix: &str, x: Var, batch: &SeqBatch, heads: usize) -> Result<Var> {
    let d = s.tape.value(x).cols();
    if s.tape.value(x).rows() != batch.count * batch.len {
        return shape_err("transformer input rows do not match the batch");
    }
    let h = layer_norm(s, &format!("{prefix}/ln1"), x)?;
    let q = linear(s, &format!("{prefix}/q"), h)?;
    let k = linear(s, &format!("{prefix}/k"), h)?;
    let v = linear(s, &format!("{prefix}/v"), h)?;
    let layout = AttentionLayout {
        segments: batch.count,
        seg_len: batch.len,
        heads,
        key_mask: batch.mask.clone(),
        scale: 1.0 / ((d / heads.max(1)) as f64).sqrt(),
    };
    let a = s.tape.attention(q, k, v, layout)?;
    let o = linear(s, &format!("{prefix}/o"), a)?;
    let x1 = s.tape.add(x, o)?;
    let h2 = layer_norm(s, &format!("{prefix}/ln2"), x1)?;
    let f = linear(s, &format!("{prefix}/ffn1"), h2)?;
    let f = s.tape.activation(f, Activation::Gelu);
    let f = linear(s, &format!("{prefix}/ffn2"), f)?;
    s.tape.add(x1, f)
}

/// Scores every position by `<H[i], w>`, softmaxes over unmasked positions
/// of each sequence and returns the weighted row sum per sequence.
pub fn weighted_avg_pool(s: &mut Session, weight_name: &str, h: Var, batch: &SeqBatch) -> Result<Var> {
    let w = s.param(weight_name)?;
    let scores = s.tape.matmul(h, w)?;
    let scores = s.tape.reshape(scores, &[batch.count, batch.len])?;
    let alpha = s.tape.softmax_rows(scores, Some(&batch.mask), false)?;
    s.tape.segment_combine(alpha, h)
}

/// Token and position tables plus `cfg.layers` encoder layers under
/// `{prefix}/layer{l}`.
pub fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) {
    init_embeddings(store, prefix, cfg, rng);
    for l in 0..cfg.layers {
        init_transformer_layer(store, &format!("{prefix}/layer{l}"), cfg, rng);
    }
}

/// Final token states of every sequence, `(count * len) x d`.
pub fn encoder_states(s: &mut Session, prefix: &str, batch: &SeqBatch, layers: usize, heads: usize) -> Result<Var> {
    let mut x = embed_sequences(s, prefix, batch)?;
    for l in 0..layers {
        x = transformer_layer(s, &format!("{prefix}/layer{l}"), x, batch, heads)?;
    }
    Ok(x)
}

/// Encoder followed by weighted-average pooling with `{prefix}/pool_w`.
pub fn encode_pooled(s: &mut Session, prefix: &str, batch: &SeqBatch, layers: usize, heads: usize) -> Result<Var> {
    let h = encoder_states(s, prefix, batch, layers, heads)?;
    weighted_avg_pool(s, &format!("{prefix}/pool_w"), h, batch)
}

pub fn init_pool(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) {
    store.init_normal(&format!("{prefix}/pool_w"), &[dim, 1], normal_std(dim), rng);
}

/// Row `0` of every sequence.
pub fn cls_rows(s: &mut Session, h: Var, batch: &SeqBatch) -> Result<Var> {
    let idx: Vec<usize> = (0..batch.count).map(|i| i * batch.len).collect();
    s.tape.gather_rows(h, &idx)
}

pub fn init_mlp_match(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
    init_linear(store, &format!("{prefix}/l1"), input, hidden, rng);
    init_linear(store, &format!("{prefix}/l2"), hidden, 2, rng);
}

/// One-hidden-layer matching head producing two logits per row.
pub fn mlp_match(s: &mut Session, prefix: &str, input: Var) -> Result<Var> {
    let h = linear(s, &format!("{prefix}/l1"), input)?;
    let h = s.tape.activation(h, Activation::Gelu);
    linear(s, &format!("{prefix}/l2"), h)
}

/// Mean cross-entropy of probability rows against integer class labels.
/// Probabilities are clamped to `[PROB_EPS, 1]` before the log.
pub fn cross_entropy_mean(s: &mut Session, probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = (s.tape.value(probs).rows(), s.tape.value(probs).cols());
    if labels.len() != rows || labels.iter().any(|&l| l >= cols) {
        return shape_err("labels do not match probability rows");
    }
    let mut onehot = vec![0.0; rows * cols];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * cols + l] = -1.0 / rows as f64;
    }
    let logp = s.tape.log_clamped(probs, PROB_EPS);
    let picked = s.tape.mul_const(logp, &Tensor::matrix(rows, cols, onehot)?)?;
    Ok(s.tape.sum(picked))
}

/// Max-subtracted softmax. `-inf` entries act as masked; an all `-inf`
/// input is an error.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, |_| true, &mut out)?;
    Ok(out)
}

/// `-sum_i y_i ln(max(p_i, eps))` for a one-hot `y`.
pub fn cross_entropy(y: &[f64], y_prob: &[f64]) -> f64 {
    -y.iter().zip(y_prob).map(|(yi, pi)| yi * pi.max(PROB_EPS).ln()).sum::<f64>()
}
