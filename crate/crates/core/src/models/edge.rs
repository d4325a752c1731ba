//! Edge-level fusion: one tower over the input pair and its context edges.
//!
//! Context edges come in two orders. First-order edges join each center to
//! one of its own neighbors; second-order edges join each center to a
//! neighbor of the other center. Every order has its own pair encoder and
//! attention pooling, and a final attention over the three order summaries
//! feeds the matching head.

use rand::Rng;

use crate::corpus::{encode_pair, Vocab};
use crate::error::{shape_err, Result};
use crate::graph::{BehaviorGraph, NeighborSample, Side};
use crate::models::node::{Attended, LEAKY_SLOPE};
use crate::models::{zeros, Interner, ModelConfig, PairExample};
use crate::nn::layers::{encode_pooled, init_encoder, init_mlp_match, init_pool, mlp_match, SeqBatch};
use crate::nn::params::{ParamStore, Session};
use crate::nn::tape::{Activation, Var};

/// The input edge and its context edges. Masked slots hold a center paired
/// with the empty text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub input: (String, String),
    pub first_order: Vec<(String, String)>,
    pub first_mask: Vec<bool>,
    pub second_order: Vec<(String, String)>,
    pub second_mask: Vec<bool>,
}

impl EdgeSet {
    pub fn from_samples(q: &str, a: &str, q_neighbors: &NeighborSample, a_neighbors: &NeighborSample) -> Self {
        let mut set = EdgeSet {
            input: (q.to_string(), a.to_string()),
            first_order: Vec::new(),
            first_mask: Vec::new(),
            second_order: Vec::new(),
            second_mask: Vec::new(),
        };
        let push = |edges: &mut Vec<(String, String)>, mask: &mut Vec<bool>, center: &str, nb: &NeighborSample| {
            for (t, &m) in nb.neighbors.iter().zip(&nb.mask) {
                edges.push((center.to_string(), if m == 1 { t.clone() } else { String::new() }));
                mask.push(m == 1);
            }
        };
        push(&mut set.first_order, &mut set.first_mask, q, q_neighbors);
        push(&mut set.first_order, &mut set.first_mask, a, a_neighbors);
        push(&mut set.second_order, &mut set.second_mask, q, a_neighbors);
        push(&mut set.second_order, &mut set.second_mask, a, q_neighbors);
        set
    }
}

pub fn enumerate_context_edges(q: &str, a: &str, graph: &BehaviorGraph, k: usize) -> Result<EdgeSet> {
    let qn = graph.sample_neighbors(q, Side::Query, k)?;
    let an = graph.sample_neighbors(a, Side::Ad, k)?;
    Ok(EdgeSet::from_samples(q, a, &qn, &an))
}

pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let e = &cfg.encoder;
    let d = e.dim;
    let mut p = ParamStore::new();
    for enc in ["e/enc_in", "e/enc_1st", "e/enc_2nd"] {
        init_encoder(&mut p, enc, e, rng);
        init_pool(&mut p, enc, d, rng);
    }
    for att in ["e/att_1st", "e/att_2nd"] {
        p.init_normal(&format!("{att}/w"), &[d, 1], 1.0 / (d as f64).sqrt(), rng);
        p.init_const(&format!("{att}/b"), &[1], 0.0);
    }
    p.init_normal("e/att_type/a", &[2 * d, 1], 1.0 / (2.0 * d as f64).sqrt(), rng);
    init_mlp_match(&mut p, "e/match", 2 * d, d, rng);
    p
}

/// `a_i = tanh(<w, h_i> + b)`, softmax over unmasked edges of each group,
/// weighted sum. Groups with every edge masked pool to zeros.
pub fn order_attention(s: &mut Session, w: Var, b: Var, edges: Var, groups: usize, mask: &[bool]) -> Result<Attended> {
    let (rows, d) = (s.tape.value(edges).rows(), s.tape.value(edges).cols());
    if groups == 0 || rows % groups != 0 || mask.len() != rows {
        return shape_err(format!("{rows} edges in {groups} groups"));
    }
    if s.tape.value(w).numel() != d || s.tape.value(b).numel() != 1 {
        return shape_err("order attention parameters do not match edge width");
    }
    let w = s.tape.reshape(w, &[d, 1])?;
    let scores = s.tape.matmul(edges, w)?;
    let scores = s.tape.add_bias(scores, b)?;
    let scores = s.tape.activation(scores, Activation::Tanh);
    let scores = s.tape.reshape(scores, &[groups, rows / groups])?;
    let weights = s.tape.softmax_rows(scores, Some(mask), true)?;
    Ok(Attended { output: s.tape.segment_combine(weights, edges)?, weights })
}

/// Center `s_in` attends over `{s_in, s_first, s_second}` with
/// `LeakyReLU(<a, [s_in || s_i]>)` logits; the output is
/// `[s_in || sum_i alpha_i s_i]`.
pub fn edge_type_aggregate(s: &mut Session, a: Var, s_in: Var, s_first: Var, s_second: Var) -> Result<Attended> {
    let shape = s.tape.value(s_in).shape().to_vec();
    if s.tape.value(s_first).shape() != shape || s.tape.value(s_second).shape() != shape {
        return shape_err("edge-type summaries differ in shape");
    }
    let (b, d) = (s.tape.value(s_in).rows(), s.tape.value(s_in).cols());
    if s.tape.value(a).numel() != 2 * d {
        return shape_err("edge-type attention vector size");
    }
    let a = s.tape.reshape(a, &[2 * d, 1])?;
    let a_center = s.tape.gather_rows(a, &(0..d).collect::<Vec<_>>())?;
    let a_type = s.tape.gather_rows(a, &(d..2 * d).collect::<Vec<_>>())?;
    let c = s.tape.matmul(s_in, a_center)?;
    let mut cols = Vec::with_capacity(3);
    for v in [s_in, s_first, s_second] {
        let e = s.tape.matmul(v, a_type)?;
        cols.push(s.tape.add(c, e)?);
    }
    let logits = s.tape.concat_cols(&cols)?;
    let logits = s.tape.activation(logits, Activation::LeakyRelu(LEAKY_SLOPE));
    let weights = s.tape.softmax_rows(logits, None, false)?;
    let stacked = s.tape.concat_cols(&[s_in, s_first, s_second])?;
    let stacked = s.tape.reshape(stacked, &[3 * b, d])?;
    let mixed = s.tape.segment_combine(weights, stacked)?;
    Ok(Attended { output: s.tape.concat_cols(&[s_in, mixed])?, weights })
}

/// Pooled pair encodings, one row per input pair, encoding each distinct
/// pair once.
fn encode_pair_rows(s: &mut Session, prefix: &str, pairs: &[(&str, &str)], vocab: &Vocab, cfg: &ModelConfig) -> Result<Var> {
    let mut uniq = Interner::new();
    let idx: Vec<usize> = pairs.iter().map(|&(x, y)| uniq.id(&(x.to_string(), y.to_string()))).collect();
    let seqs: Vec<_> = uniq.items.iter().map(|(x, y)| encode_pair(x, y, vocab, cfg.max_len_pair)).collect();
    let batch = SeqBatch::from_owned(&seqs)?;
    let enc = encode_pooled(s, prefix, &batch, cfg.encoder.layers, cfg.encoder.heads)?;
    s.tape.gather_rows(enc, &idx)
}

fn order_summary(
    s: &mut Session,
    cfg: &ModelConfig,
    vocab: &Vocab,
    order: &str,
    edges: &[&[(String, String)]],
    masks: &[&[bool]],
) -> Result<Var> {
    let b = edges.len();
    let per = edges.first().map_or(0, |e| e.len());
    if edges.iter().any(|e| e.len() != per) {
        return shape_err("edge groups differ in size");
    }
    let mask: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    if per == 0 || !mask.contains(&true) {
        return Ok(zeros(s, b, cfg.encoder.dim));
    }
    // masked slots reuse the first real edge; their weight is exactly zero
    let fallback = mask.iter().position(|&m| m).expect("some edge is real");
    let flat: Vec<(&str, &str)> = edges.iter().flat_map(|e| e.iter()).map(|(x, y)| (x.as_str(), y.as_str())).collect();
    let pairs: Vec<(&str, &str)> = (0..flat.len()).map(|i| if mask[i] { flat[i] } else { flat[fallback] }).collect();
    let h = encode_pair_rows(s, &format!("e/enc_{order}"), &pairs, vocab, cfg)?;
    let w = s.param(&format!("e/att_{order}/w"))?;
    let bias = s.param(&format!("e/att_{order}/b"))?;
    Ok(order_attention(s, w, bias, h, b, &mask)?.output)
}

/// The one-tower representation `[s_in || mix]`, `B x 2d`.
pub fn representation(s: &mut Session, cfg: &ModelConfig, vocab: &Vocab, batch: &[PairExample]) -> Result<Var> {
    let sets: Vec<EdgeSet> = batch.iter().map(|e| EdgeSet::from_samples(&e.query, &e.ad, &e.q_neighbors, &e.a_neighbors)).collect();
    let inputs: Vec<(&str, &str)> = sets.iter().map(|e| (e.input.0.as_str(), e.input.1.as_str())).collect();
    let s_in = encode_pair_rows(s, "e/enc_in", &inputs, vocab, cfg)?;
    let b = batch.len();
    let s_first = if cfg.use_first {
        let edges: Vec<&[(String, String)]> = sets.iter().map(|e| e.first_order.as_slice()).collect();
        let masks: Vec<&[bool]> = sets.iter().map(|e| e.first_mask.as_slice()).collect();
        order_summary(s, cfg, vocab, "1st", &edges, &masks)?
    } else {
        zeros(s, b, cfg.encoder.dim)
    };
    let s_second = if cfg.use_second {
        let edges: Vec<&[(String, String)]> = sets.iter().map(|e| e.second_order.as_slice()).collect();
        let masks: Vec<&[bool]> = sets.iter().map(|e| e.second_mask.as_slice()).collect();
        order_summary(s, cfg, vocab, "2nd", &edges, &masks)?
    } else {
        zeros(s, b, cfg.encoder.dim)
    };
    let a = s.param("e/att_type/a")?;
    Ok(edge_type_aggregate(s, a, s_in, s_first, s_second)?.output)
}

pub fn logits(s: &mut Session, cfg: &ModelConfig, vocab: &Vocab, batch: &[PairExample]) -> Result<Var> {
    let z = representation(s, cfg, vocab, batch)?;
    mlp_match(s, "e/match", z)
}
