//! Graph-aware warm-up of the encoders.
//!
//! Two tasks are available. Neighbor-enhanced masked language modeling
//! corrupts a center entity's tokens and predicts them from a token-level
//! tower in which the center's unmasked neighbors take part. Neighbor
//! prediction classifies `[CLS] x [SEP] y` pairs as graph-adjacent or not.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_pair, encode_single, TokenSequence, Vocab, MASK, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::graph::{BehaviorGraph, NeighborSample, Side};
use crate::models::token::{init_tower, tower_states};
use crate::models::{Model, Variant};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{cross_entropy_mean, embed_sequences, init_linear, linear, transformer_layer, EncoderConfig, SeqBatch};
use crate::nn::params::{Adam, AdamConfig, ParamStore, Session};
use crate::nn::tape::Var;

pub const NP_MAX_ATTEMPTS: usize = 100;
const PREFIX: &str = "pre";

/// How a selected position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// Token selection rate and the split between the three corruption kinds.
/// The remaining probability `1 - mask_prob - random_prob` keeps the token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingRecipe {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingRecipe {
    fn default() -> Self {
        Self { rate: 0.15, mask_prob: 0.8, random_prob: 0.1 }
    }
}

impl MaskingRecipe {
    pub fn with_rate(rate: f64) -> Self {
        Self { rate, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub corrupted_positions: Vec<usize>,
    pub corruption: Vec<Corruption>,
}

impl MaskedExample {
    /// The corrupted input with the original attention mask.
    pub fn input_sequence(&self, original: &TokenSequence) -> TokenSequence {
        TokenSequence { ids: self.input_ids.clone(), attention_mask: original.attention_mask.clone() }
    }
}

/// Seeded corruption of the non-special positions of `seq`.
pub fn mask_tokens(seq: &TokenSequence, rate: f64, rng_seed: u64, vocab: &Vocab) -> MaskedExample {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    mask_tokens_with(seq, &MaskingRecipe::with_rate(rate), &mut rng, vocab.len())
}

/// Corruption driven by an external generator.
pub fn mask_tokens_with(seq: &TokenSequence, recipe: &MaskingRecipe, rng: &mut impl Rng, vocab_len: usize) -> MaskedExample {
    let mut out =
        MaskedExample { input_ids: seq.ids.clone(), target_ids: Vec::new(), corrupted_positions: Vec::new(), corruption: Vec::new() };
    let rate = recipe.rate.clamp(0.0, 1.0);
    for (i, &id) in seq.ids.iter().enumerate() {
        if Vocab::is_special(id) || seq.attention_mask[i] == 0 {
            continue;
        }
        if !rng.gen_bool(rate) {
            continue;
        }
        let u: f64 = rng.gen();
        let kind = if u < recipe.mask_prob {
            Corruption::Mask
        } else if u < recipe.mask_prob + recipe.random_prob && vocab_len > NUM_SPECIAL {
            Corruption::Random
        } else {
            Corruption::Keep
        };
        out.input_ids[i] = match kind {
            Corruption::Mask => MASK,
            Corruption::Random => rng.gen_range(NUM_SPECIAL..vocab_len),
            Corruption::Keep => id,
        };
        out.target_ids.push(id);
        out.corrupted_positions.push(i);
        out.corruption.push(kind);
    }
    out
}

/// A corrupted center with its unmasked neighbors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeMlmExample {
    pub center: TokenSequence,
    pub masked: MaskedExample,
    pub neighbors: NeighborSample,
}

pub fn build_ne_mlm_example(
    graph: &BehaviorGraph,
    entity: &str,
    side: Side,
    k: usize,
    vocab: &Vocab,
    rng_seed: u64,
    max_len: usize,
) -> Result<NeMlmExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    ne_mlm_example_with(graph, entity, side, k, vocab, max_len, &MaskingRecipe::default(), &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn ne_mlm_example_with(
    graph: &BehaviorGraph,
    entity: &str,
    side: Side,
    k: usize,
    vocab: &Vocab,
    max_len: usize,
    recipe: &MaskingRecipe,
    rng: &mut impl Rng,
) -> Result<NeMlmExample> {
    if !graph.contains(entity, side) {
        return Err(Error::UnknownEntity(entity.to_string()));
    }
    let center = encode_single(entity, vocab, max_len);
    let masked = mask_tokens_with(&center, recipe, rng, vocab.len());
    Ok(NeMlmExample { neighbors: graph.sample_neighbors(entity, side, k)?, center, masked })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborPredictionExample {
    pub first: String,
    pub second: String,
    pub pair: TokenSequence,
    pub label: u8,
}

/// Draws neighbor-prediction examples from a fixed graph.
pub struct NpSampler<'g> {
    graph: &'g BehaviorGraph,
    edges: Vec<(&'g str, &'g str)>,
    queries: Vec<&'g str>,
    ads: Vec<&'g str>,
}

impl<'g> NpSampler<'g> {
    pub fn new(graph: &'g BehaviorGraph) -> Result<Self> {
        let s = Self {
            graph,
            edges: graph.edges().keys().map(|(q, a)| (q.as_str(), a.as_str())).collect(),
            queries: graph.queries().iter().map(String::as_str).collect(),
            ads: graph.ads().iter().map(String::as_str).collect(),
        };
        if s.edges.is_empty() || s.ads.len() < 2 {
            return Err(Error::Config("neighbor prediction needs an edge and two ads".into()));
        }
        Ok(s)
    }

    /// Returns `(query, ad, label)`; `force` fixes the label.
    pub fn draw(&self, rng: &mut impl Rng, force: Option<u8>) -> Result<(String, String, u8)> {
        let positive = force.map_or_else(|| rng.gen_bool(0.5), |f| f == 1);
        if positive {
            let (q, a) = self.edges[rng.gen_range(0..self.edges.len())];
            return Ok((q.to_string(), a.to_string(), 1));
        }
        for _ in 0..NP_MAX_ATTEMPTS {
            let q = self.queries[rng.gen_range(0..self.queries.len())];
            let degree = self.graph.degree(q, Side::Query);
            if degree >= self.ads.len() {
                continue;
            }
            let free: Vec<&str> = self.ads.iter().copied().filter(|a| !self.graph.has_edge(q, a)).collect();
            let a = free[rng.gen_range(0..free.len())];
            return Ok((q.to_string(), a.to_string(), 0));
        }
        Err(Error::NegativeSampling(NP_MAX_ATTEMPTS))
    }

    /// A drawn pair in random order, encoded as one sequence.
    pub fn example(&self, rng: &mut impl Rng, vocab: &Vocab, max_len: usize, force: Option<u8>) -> Result<NeighborPredictionExample> {
        let (q, a, label) = self.draw(rng, force)?;
        let (first, second) = if rng.gen_bool(0.5) { (q, a) } else { (a, q) };
        Ok(NeighborPredictionExample { pair: encode_pair(&first, &second, vocab, max_len), first, second, label })
    }
}

pub fn build_np_example(graph: &BehaviorGraph, vocab: &Vocab, max_len: usize, rng_seed: u64) -> Result<NeighborPredictionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    NpSampler::new(graph)?.example(&mut rng, vocab, max_len, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tasks {
    pub ne_mlm: bool,
    pub np: bool,
}

impl Tasks {
    pub const NONE: Tasks = Tasks { ne_mlm: false, np: false };
    pub const BOTH: Tasks = Tasks { ne_mlm: true, np: true };
}

impl FromStr for Tasks {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Tasks::NONE),
            "ne-mlm" => Ok(Tasks { ne_mlm: true, np: false }),
            "np" => Ok(Tasks { ne_mlm: false, np: true }),
            "both" => Ok(Tasks::BOTH),
            _ => Err(Error::Config(format!("unknown tasks {s:?} (expected ne-mlm, np, both or none)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub tasks: Tasks,
    pub encoder: EncoderConfig,
    pub k: usize,
    pub max_len_single: usize,
    pub max_len_pair: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub masking: MaskingRecipe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean summed loss of each epoch's batches.
    pub loss_curve: Vec<f64>,
}

/// One batch of pre-training inputs.
struct PretrainBatch {
    mlm: Vec<NeMlmExample>,
    np: Vec<NeighborPredictionExample>,
}

pub fn init_params(cfg: &PretrainConfig, rng: &mut impl Rng) -> ParamStore {
    let mut p = ParamStore::new();
    init_tower(&mut p, PREFIX, &cfg.encoder, rng);
    init_linear(&mut p, "pre/mlm", cfg.encoder.dim, cfg.encoder.vocab_size, rng);
    init_linear(&mut p, "pre/np", cfg.encoder.dim, 2, rng);
    p
}

fn mlm_loss(s: &mut Session, cfg: &PretrainConfig, vocab: &Vocab, items: &[NeMlmExample]) -> Result<Option<Var>> {
    let mut targets = Vec::new();
    let mut positions = Vec::new();
    for (g, ex) in items.iter().enumerate() {
        for (&p, &t) in ex.masked.corrupted_positions.iter().zip(&ex.masked.target_ids) {
            positions.push((g, p));
            targets.push(t);
        }
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let centers: Vec<TokenSequence> = items.iter().map(|e| e.masked.input_sequence(&e.center)).collect();
    let nbs: Vec<&NeighborSample> = items.iter().map(|e| &e.neighbors).collect();
    let t = tower_states(s, PREFIX, &cfg.encoder, vocab, &centers, &nbs, cfg.max_len_single, false)?;
    let rows: Vec<usize> = positions.iter().map(|&(g, p)| t.row(g, 0, p)).collect();
    let h = s.tape.gather_rows(t.states, &rows)?;
    let logits = linear(s, "pre/mlm", h)?;
    let probs = s.tape.softmax_rows(logits, None, false)?;
    Ok(Some(cross_entropy_mean(s, probs, &targets)?))
}

fn np_loss(s: &mut Session, cfg: &PretrainConfig, items: &[NeighborPredictionExample]) -> Result<Option<Var>> {
    if items.is_empty() {
        return Ok(None);
    }
    let seqs: Vec<TokenSequence> = items.iter().map(|e| e.pair.clone()).collect();
    let batch = SeqBatch::from_owned(&seqs)?;
    let mut x = embed_sequences(s, PREFIX, &batch)?;
    for l in 0..cfg.encoder.layers {
        x = transformer_layer(s, &format!("{PREFIX}/layer{l}/text"), x, &batch, cfg.encoder.heads)?;
    }
    let cls: Vec<usize> = (0..batch.count).map(|i| i * batch.len).collect();
    let h = s.tape.gather_rows(x, &cls)?;
    let logits = linear(s, "pre/np", h)?;
    let probs = s.tape.softmax_rows(logits, None, false)?;
    let labels: Vec<usize> = items.iter().map(|e| e.label as usize).collect();
    Ok(Some(cross_entropy_mean(s, probs, &labels)?))
}

/// Sum of the enabled task losses over one batch; `None` when no enabled
/// task has anything to predict.
pub fn pretrain_loss(
    s: &mut Session,
    cfg: &PretrainConfig,
    vocab: &Vocab,
    mlm: &[NeMlmExample],
    np: &[NeighborPredictionExample],
) -> Result<Option<Var>> {
    let parts: Vec<Var> =
        [if cfg.tasks.ne_mlm { mlm_loss(s, cfg, vocab, mlm)? } else { None }, if cfg.tasks.np { np_loss(s, cfg, np)? } else { None }]
            .into_iter()
            .flatten()
            .collect();
    match parts.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some(*one)),
        [a, b] => Ok(Some(s.tape.add(*a, *b)?)),
        _ => unreachable!(),
    }
}

/// Every entity on both sides, in a fixed order.
fn entities(graph: &BehaviorGraph) -> Vec<(String, Side)> {
    let q = graph.queries().iter().map(|e| (e.clone(), Side::Query));
    let a = graph.ads().iter().map(|e| (e.clone(), Side::Ad));
    q.chain(a).collect()
}

fn make_batches(
    graph: &BehaviorGraph,
    vocab: &Vocab,
    cfg: &PretrainConfig,
    order: &[(String, Side)],
    rng: &mut impl Rng,
) -> Result<Vec<PretrainBatch>> {
    let sampler = if cfg.tasks.np { Some(NpSampler::new(graph)?) } else { None };
    let mut out = Vec::new();
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        let mut b = PretrainBatch { mlm: Vec::new(), np: Vec::new() };
        for (entity, side) in chunk {
            if cfg.tasks.ne_mlm {
                b.mlm.push(ne_mlm_example_with(graph, entity, *side, cfg.k, vocab, cfg.max_len_single, &cfg.masking, rng)?);
            }
            if let Some(sm) = &sampler {
                b.np.push(sm.example(rng, vocab, cfg.max_len_pair, None)?);
            }
        }
        out.push(b);
    }
    Ok(out)
}

/// Mean summed task loss over a fixed, seeded sample of examples.
pub fn evaluation_loss(params: &ParamStore, graph: &BehaviorGraph, vocab: &Vocab, cfg: &PretrainConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = entities(graph);
    let batches = make_batches(graph, vocab, cfg, &order, &mut rng)?;
    let mut total = 0.0;
    let mut n = 0;
    for b in &batches {
        let mut s = Session::new(params, false);
        if let Some(l) = pretrain_loss(&mut s, cfg, vocab, &b.mlm, &b.np)? {
            total += s.tape.scalar(l);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

pub fn checkpoint_for(cfg: &PretrainConfig, params: ParamStore) -> Checkpoint {
    let e = &cfg.encoder;
    Checkpoint::new(params)
        .with_meta("kind", "pretrain")
        .with_meta("dim", e.dim)
        .with_meta("heads", e.heads)
        .with_meta("layers", e.layers)
        .with_meta("ffn_mult", e.ffn_mult)
        .with_meta("vocab_size", e.vocab_size)
        .with_meta("max_positions", e.max_positions)
}

/// Optimizes the selected tasks from a seeded random initialization.
pub fn pretrain_run(graph: &BehaviorGraph, vocab: &Vocab, cfg: &PretrainConfig) -> Result<(Checkpoint, PretrainReport)> {
    cfg.encoder.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(cfg, &mut rng);
    let mut report = PretrainReport { loss_curve: Vec::new() };
    if cfg.tasks == Tasks::NONE {
        return Ok((checkpoint_for(cfg, params), report));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut order = entities(graph);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches = make_batches(graph, vocab, cfg, &order, &mut rng)?;
        let (mut total, mut n) = (0.0, 0);
        for b in &batches {
            let mut s = Session::new(&params, true);
            let Some(l) = pretrain_loss(&mut s, cfg, vocab, &b.mlm, &b.np)? else { continue };
            total += s.tape.scalar(l);
            n += 1;
            let grads = s.backward(l)?;
            drop(s);
            adam.step(&mut params, &grads)?;
        }
        report.loss_curve.push(if n == 0 { 0.0 } else { total / n as f64 });
    }
    Ok((checkpoint_for(cfg, params), report))
}

/// Encoder parameter prefixes of a model that receive pre-trained weights.
fn encoder_prefixes(model: &Model) -> Vec<&'static str> {
    match model.config.variant {
        Variant::Twin => vec!["n/qc", "n/ac"],
        Variant::Node => {
            if model.config.share_center_neighbor {
                vec!["n/qc", "n/ac"]
            } else {
                vec!["n/qc", "n/qn", "n/ac", "n/an"]
            }
        }
        Variant::Edge => vec!["e/enc_in", "e/enc_1st", "e/enc_2nd"],
        Variant::Token => vec!["t/q", "t/a"],
    }
}

/// Overwrites the embeddings and the first layers of every encoder of
/// `model` with a pre-trained checkpoint. Token towers also take the graph
/// projections.
pub fn apply_pretrained(model: &mut Model, ck: &Checkpoint) -> Result<()> {
    if ck.meta("kind")? != "pretrain" {
        return Err(Error::Checkpoint("not a pre-training checkpoint".into()));
    }
    let e = &model.config.encoder;
    let dims_ok = ck.meta_parse::<usize>("dim")? == e.dim
        && ck.meta_parse::<usize>("heads")? == e.heads
        && ck.meta_parse::<usize>("ffn_mult")? == e.ffn_mult
        && ck.meta_parse::<usize>("vocab_size")? == e.vocab_size
        && ck.meta_parse::<usize>("max_positions")? == e.max_positions
        && ck.meta_parse::<usize>("layers")? >= e.layers;
    if !dims_ok {
        return Err(Error::Checkpoint("pre-trained encoder shape does not match the model".into()));
    }
    let token = model.config.variant == Variant::Token;
    for prefix in encoder_prefixes(model) {
        let mut copies = vec![(format!("{PREFIX}/tok"), format!("{prefix}/tok")), (format!("{PREFIX}/pos"), format!("{prefix}/pos"))];
        for l in 0..e.layers {
            let text = ck.params.with_prefix(&format!("{PREFIX}/layer{l}/text"));
            let dst = if token { format!("{prefix}/layer{l}/text") } else { format!("{prefix}/layer{l}") };
            copies.extend(text.names().map(|n| (format!("{PREFIX}/layer{l}/text/{n}"), format!("{dst}/{n}"))));
            if token {
                for w in ["wq", "wk", "wv"] {
                    copies.push((format!("{PREFIX}/layer{l}/graph/{w}"), format!("{prefix}/layer{l}/graph/{w}")));
                }
            }
        }
        for (src, dst) in copies {
            let t = ck.params.get(&src)?.clone();
            if model.params.get(&dst)?.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape of {src} does not fit {dst}")));
            }
            model.params.insert(dst, t);
        }
    }
    Ok(())
}
