//! Token-level fusion: every layer first lets the CLS rows of a center and
//! its neighbors attend to one another (the graph transformer), writes the
//! results back into each node's CLS position, and then runs an ordinary
//! text layer within each node.

use rand::Rng;

use crate::corpus::{encode_single, Vocab};
use crate::error::{shape_err, Result};
use crate::graph::NeighborSample;
use crate::models::{Interner, ModelConfig, PairExample};
use crate::nn::layers::{
    embed_sequences, init_embeddings, init_mlp_match, init_transformer_layer, mlp_match, transformer_layer, EncoderConfig, SeqBatch,
};
use crate::nn::params::{ParamStore, Session};
use crate::nn::tape::{AttentionLayout, Var};

/// Graph projections start small (near-uniform attention) and the value
/// projection near the identity, so each CLS row starts close to its text.
const GRAPH_INIT_STD: f64 = 0.1;

pub fn init_tower(p: &mut ParamStore, prefix: &str, e: &EncoderConfig, rng: &mut impl Rng) {
    init_embeddings(p, prefix, e, rng);
    let std = 1.0 / (e.dim as f64).sqrt();
    for l in 0..e.layers {
        let g = format!("{prefix}/layer{l}/graph");
        for w in ["wq", "wk", "wv"] {
            p.init_normal(&format!("{g}/{w}"), &[e.dim, e.dim], GRAPH_INIT_STD * std, rng);
        }
        let wv = p.get_mut(&format!("{g}/wv")).expect("just inserted");
        for i in 0..e.dim {
            wv.data_mut()[i * e.dim + i] += 1.0;
        }
        init_transformer_layer(p, &format!("{prefix}/layer{l}/text"), e, rng);
    }
}

pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let mut p = ParamStore::new();
    init_tower(&mut p, "t/q", &cfg.encoder, rng);
    init_tower(&mut p, "t/a", &cfg.encoder, rng);
    init_mlp_match(&mut p, "t/match", 2 * cfg.encoder.dim, cfg.encoder.dim, rng);
    p
}

/// Single-head attention among node rows: `softmax(Q K^T / sqrt(d)) V` with
/// `Q = H W_Q`, `K = H W_K`, `V = H W_V`, within consecutive groups of
/// `rows / groups` nodes. Masked nodes are never attended to and keep their
/// input row. With `residual`, unmasked outputs get the input added.
#[allow(clippy::too_many_arguments)]
pub fn graph_transformer(
    s: &mut Session,
    wq: Var,
    wk: Var,
    wv: Var,
    h: Var,
    groups: usize,
    node_mask: &[bool],
    residual: bool,
) -> Result<Var> {
    let (rows, d) = (s.tape.value(h).rows(), s.tape.value(h).cols());
    if groups == 0 || rows % groups != 0 || node_mask.len() != rows {
        return shape_err(format!("{rows} node rows in {groups} groups"));
    }
    let nodes = rows / groups;
    if (0..groups).any(|g| !node_mask[g * nodes]) {
        return shape_err("the center node of every group must be unmasked");
    }
    let q = s.tape.matmul(h, wq)?;
    let k = s.tape.matmul(h, wk)?;
    let v = s.tape.matmul(h, wv)?;
    if s.tape.value(q).cols() != d || s.tape.value(v).cols() != d {
        return shape_err("graph projections must be square");
    }
    let layout =
        AttentionLayout { segments: groups, seg_len: nodes, heads: 1, key_mask: node_mask.to_vec(), scale: 1.0 / (d as f64).sqrt() };
    let mut out = s.tape.attention(q, k, v, layout)?;
    if residual {
        out = s.tape.add(out, h)?;
    }
    s.tape.blend_rows(out, h, node_mask)
}

/// Token states of every node after all layers of one tower.
#[derive(Debug)]
pub struct TowerStates {
    pub states: Var,
    pub batch: SeqBatch,
    /// Nodes per group, center first.
    pub nodes: usize,
    pub groups: usize,
}

impl TowerStates {
    /// Row index of node `node` of group `g`, token `t`.
    pub fn row(&self, g: usize, node: usize, t: usize) -> usize {
        (g * self.nodes + node) * self.batch.len + t
    }
}

/// Runs a tower over groups of `(center, neighbors)`. Every group must have
/// the same number of neighbor slots.
#[allow(clippy::too_many_arguments)]
pub fn tower_states(
    s: &mut Session,
    prefix: &str,
    e: &EncoderConfig,
    vocab: &Vocab,
    centers: &[crate::corpus::TokenSequence],
    neighbors: &[&NeighborSample],
    max_len: usize,
    residual: bool,
) -> Result<TowerStates> {
    let groups = centers.len();
    if neighbors.len() != groups || groups == 0 {
        return shape_err("one neighbor sample per center is required");
    }
    let k = neighbors[0].len();
    let nodes = k + 1;
    let mut seqs = Vec::with_capacity(groups * nodes);
    let mut node_mask = Vec::with_capacity(groups * nodes);
    for (c, nb) in centers.iter().zip(neighbors) {
        if nb.len() != k {
            return shape_err("neighbor samples differ in slot count");
        }
        seqs.push(c.clone());
        node_mask.push(true);
        for (t, &m) in nb.neighbors.iter().zip(&nb.mask) {
            let text = if m == 1 { t.as_str() } else { "" };
            seqs.push(encode_single(text, vocab, max_len));
            node_mask.push(m == 1);
        }
    }
    let batch = SeqBatch::from_owned(&seqs)?;
    let cls_rows: Vec<usize> = (0..groups * nodes).map(|i| i * batch.len).collect();
    let mut x = embed_sequences(s, prefix, &batch)?;
    for l in 0..e.layers {
        let hc = s.tape.gather_rows(x, &cls_rows)?;
        let wq = s.param(&format!("{prefix}/layer{l}/graph/wq"))?;
        let wk = s.param(&format!("{prefix}/layer{l}/graph/wk"))?;
        let wv = s.param(&format!("{prefix}/layer{l}/graph/wv"))?;
        let hc = graph_transformer(s, wq, wk, wv, hc, groups, &node_mask, residual)?;
        x = s.tape.replace_rows(x, hc, &cls_rows)?;
        x = transformer_layer(s, &format!("{prefix}/layer{l}/text"), x, &batch, e.heads)?;
    }
    Ok(TowerStates { states: x, batch, nodes, groups })
}

/// Final CLS embedding of each center, one row per input, computing each
/// distinct `(center, neighbors)` group once.
fn tower_cls(s: &mut Session, cfg: &ModelConfig, prefix: &str, vocab: &Vocab, items: &[(&str, &NeighborSample)]) -> Result<Var> {
    let mut uniq = Interner::new();
    let idx: Vec<usize> = items.iter().map(|&(c, nb)| uniq.id(&(c.to_string(), nb.clone()))).collect();
    let centers: Vec<_> = uniq.items.iter().map(|(c, _)| encode_single(c, vocab, cfg.max_len_single)).collect();
    let nbs: Vec<&NeighborSample> = uniq.items.iter().map(|(_, nb)| nb).collect();
    let t = tower_states(s, prefix, &cfg.encoder, vocab, &centers, &nbs, cfg.max_len_single, cfg.graph_residual)?;
    let rows: Vec<usize> = (0..t.groups).map(|g| t.row(g, 0, 0)).collect();
    let cls = s.tape.gather_rows(t.states, &rows)?;
    s.tape.gather_rows(cls, &idx)
}

pub fn logits(s: &mut Session, cfg: &ModelConfig, vocab: &Vocab, batch: &[PairExample]) -> Result<Var> {
    let q: Vec<(&str, &NeighborSample)> = batch.iter().map(|e| (e.query.as_str(), &e.q_neighbors)).collect();
    let a: Vec<(&str, &NeighborSample)> = batch.iter().map(|e| (e.ad.as_str(), &e.a_neighbors)).collect();
    let z_q = tower_cls(s, cfg, "t/q", vocab, &q)?;
    let z_a = tower_cls(s, cfg, "t/a", vocab, &a)?;
    let z = s.tape.concat_cols(&[z_q, z_a])?;
    mlp_match(s, "t/match", z)
}
