//! The relevance model family and the shared batch plumbing.

pub mod edge;
pub mod node;
pub mod token;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::corpus::{encode_single, Vocab};
use crate::error::{Error, Result};
use crate::graph::{BehaviorGraph, NeighborSample, Side};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{cross_entropy_mean, encode_pooled, EncoderConfig, SeqBatch};
use crate::nn::params::{ParamStore, Session};
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Text-only two-tower baseline: the node model without neighbors.
    Twin,
    Node,
    Edge,
    Token,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Twin, Variant::Node, Variant::Edge, Variant::Token];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Twin => "twin",
            Variant::Node => "n",
            Variant::Edge => "e",
            Variant::Token => "t",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (expected n, e, t or twin)")))
    }
}

/// Architecture of one model instance; persisted as checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    /// Neighbor slots per entity.
    pub k: usize,
    pub max_len_single: usize,
    pub max_len_pair: usize,
    /// Node model: neighbor encoders reuse their side's center encoder.
    pub share_center_neighbor: bool,
    /// Token model: add the CLS input back onto graph-attention outputs.
    pub graph_residual: bool,
    /// Edge model ablation switches.
    pub use_first: bool,
    pub use_second: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        let max_len_single = 16;
        let max_len_pair = 32;
        Self {
            variant,
            encoder: EncoderConfig {
                dim: 64,
                heads: 4,
                layers: 3,
                ffn_mult: 4,
                vocab_size,
                max_positions: max_len_single.max(max_len_pair),
            },
            k: 3,
            max_len_single,
            max_len_pair,
            share_center_neighbor: false,
            graph_residual: false,
            use_first: true,
            use_second: true,
        }
    }

    /// Neighbor slots actually consumed by the variant.
    pub fn slots(&self) -> usize {
        if self.variant == Variant::Twin {
            0
        } else {
            self.k
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_len_single < 2 || self.max_len_pair < 3 {
            return Err(Error::Config("max lengths must be at least 2 (single) and 3 (pair)".into()));
        }
        if self.encoder.max_positions < self.max_len_single.max(self.max_len_pair) {
            return Err(Error::Config("position table shorter than max length".into()));
        }
        if self.encoder.layers == 0 {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        Ok(())
    }

    pub fn write_meta(&self, ck: Checkpoint) -> Checkpoint {
        let e = &self.encoder;
        ck.with_meta("variant", self.variant)
            .with_meta("dim", e.dim)
            .with_meta("heads", e.heads)
            .with_meta("layers", e.layers)
            .with_meta("ffn_mult", e.ffn_mult)
            .with_meta("vocab_size", e.vocab_size)
            .with_meta("max_positions", e.max_positions)
            .with_meta("k", self.k)
            .with_meta("max_len_single", self.max_len_single)
            .with_meta("max_len_pair", self.max_len_pair)
            .with_meta("share_center_neighbor", self.share_center_neighbor)
            .with_meta("graph_residual", self.graph_residual)
            .with_meta("use_first", self.use_first)
            .with_meta("use_second", self.use_second)
    }

    pub fn from_meta(ck: &Checkpoint) -> Result<Self> {
        let cfg = Self {
            variant: ck.meta_parse("variant")?,
            encoder: EncoderConfig {
                dim: ck.meta_parse("dim")?,
                heads: ck.meta_parse("heads")?,
                layers: ck.meta_parse("layers")?,
                ffn_mult: ck.meta_parse("ffn_mult")?,
                vocab_size: ck.meta_parse("vocab_size")?,
                max_positions: ck.meta_parse("max_positions")?,
            },
            k: ck.meta_parse("k")?,
            max_len_single: ck.meta_parse("max_len_single")?,
            max_len_pair: ck.meta_parse("max_len_pair")?,
            share_center_neighbor: ck.meta_parse("share_center_neighbor")?,
            graph_residual: ck.meta_parse("graph_residual")?,
            use_first: ck.meta_parse("use_first")?,
            use_second: ck.meta_parse("use_second")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One query–ad pair with the neighbor slots each side will consume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub query: String,
    pub ad: String,
    pub q_neighbors: NeighborSample,
    pub a_neighbors: NeighborSample,
}

impl PairExample {
    pub fn from_graph(graph: &BehaviorGraph, query: &str, ad: &str, k: usize) -> Result<Self> {
        Ok(Self {
            query: query.to_string(),
            ad: ad.to_string(),
            q_neighbors: graph.sample_neighbors(query, Side::Query, k)?,
            a_neighbors: graph.sample_neighbors(ad, Side::Ad, k)?,
        })
    }
}

/// Distinct strings in first-seen order.
#[derive(Debug, Default, Clone)]
pub(crate) struct Interner<K> {
    pub items: Vec<K>,
    index: HashMap<K, usize>,
}

impl<K: Clone + Eq + std::hash::Hash> Interner<K> {
    pub fn new() -> Self {
        Self { items: Vec::new(), index: HashMap::new() }
    }

    pub fn id(&mut self, key: &K) -> usize {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        self.items.push(key.clone());
        self.index.insert(key.clone(), self.items.len() - 1);
        self.items.len() - 1
    }
}

/// Pooled encodings of distinct texts, `U x d`.
pub(crate) fn encode_texts(s: &mut Session, prefix: &str, texts: &[String], vocab: &Vocab, cfg: &ModelConfig) -> Result<Var> {
    let seqs: Vec<_> = texts.iter().map(|t| encode_single(t, vocab, cfg.max_len_single)).collect();
    let batch = SeqBatch::from_owned(&seqs)?;
    encode_pooled(s, prefix, &batch, cfg.encoder.layers, cfg.encoder.heads)
}

/// Encodes `texts` once per distinct value and returns one row per input.
pub(crate) fn encode_rows(s: &mut Session, prefix: &str, texts: &[&str], vocab: &Vocab, cfg: &ModelConfig) -> Result<Var> {
    let mut uniq = Interner::new();
    let idx: Vec<usize> = texts.iter().map(|t| uniq.id(&t.to_string())).collect();
    let enc = encode_texts(s, prefix, &uniq.items, vocab, cfg)?;
    s.tape.gather_rows(enc, &idx)
}

pub(crate) fn zeros(s: &mut Session, rows: usize, cols: usize) -> Var {
    s.tape.constant(Tensor::zeros(&[rows, cols]))
}

/// A model configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = match config.variant {
            Variant::Twin | Variant::Node => node::init(&config, rng),
            Variant::Edge => edge::init(&config, rng),
            Variant::Token => token::init(&config, rng),
        };
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.config.write_meta(Checkpoint::new(self.params.clone()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self { config: ModelConfig::from_meta(ck)?, params: ck.params.clone() })
    }

    /// Like [`Model::from_checkpoint`] but rejects any other variant.
    pub fn from_checkpoint_as(ck: &Checkpoint, expected: Variant) -> Result<Self> {
        let m = Self::from_checkpoint(ck)?;
        if m.config.variant != expected {
            return Err(Error::VariantMismatch { expected: expected.to_string(), found: m.config.variant.to_string() });
        }
        Ok(m)
    }

    /// Build example inputs for `(query, ad)` pairs from the graph.
    pub fn examples<'a>(&self, graph: &BehaviorGraph, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Vec<PairExample>> {
        let k = self.config.slots();
        pairs.into_iter().map(|(q, a)| PairExample::from_graph(graph, q, a, k)).collect()
    }

    /// Class probabilities `B x 2`; column 1 is "relevant".
    pub fn forward(&self, s: &mut Session, vocab: &Vocab, batch: &[PairExample]) -> Result<Var> {
        forward(s, &self.config, vocab, batch)
    }

    /// Positive-class probability of every example, with frozen weights.
    pub fn predict(&self, vocab: &Vocab, batch: &[PairExample]) -> Result<Vec<f64>> {
        let mut s = Session::new(&self.params, false);
        let p = forward(&mut s, &self.config, vocab, batch)?;
        Ok(s.tape.value(p).data().chunks(2).map(|r| r[1]).collect())
    }
}

pub fn forward(s: &mut Session, cfg: &ModelConfig, vocab: &Vocab, batch: &[PairExample]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let logits = match cfg.variant {
        Variant::Twin | Variant::Node => node::logits(s, cfg, vocab, batch)?,
        Variant::Edge => edge::logits(s, cfg, vocab, batch)?,
        Variant::Token => token::logits(s, cfg, vocab, batch)?,
    };
    s.tape.softmax_rows(logits, None, false)
}

/// Mean cross-entropy of the model's probabilities against `labels`.
pub fn loss(s: &mut Session, cfg: &ModelConfig, vocab: &Vocab, batch: &[PairExample], labels: &[u8]) -> Result<Var> {
    let probs = forward(s, cfg, vocab, batch)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    cross_entropy_mean(s, probs, &labels)
}
