//! Node-level fusion: each tower encodes its center and the center's graph
//! neighbors separately, attention-pools the neighbors and concatenates the
//! result onto the center encoding.

use rand::Rng;

use crate::corpus::Vocab;
use crate::error::{shape_err, Result};
use crate::graph::{NeighborSample, Side};
use crate::models::{encode_rows, encode_texts, zeros, Interner, ModelConfig, PairExample, Variant};
use crate::nn::layers::{init_encoder, init_mlp_match, init_pool, mlp_match};
use crate::nn::params::{ParamStore, Session};
use crate::nn::tape::{Activation, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// An attention-pooled vector and the `B x N` weights that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

struct TowerNames {
    center: &'static str,
    neighbor: &'static str,
    agg: &'static str,
}

fn names(cfg: &ModelConfig, side: Side) -> TowerNames {
    let (center, neighbor, agg) = match side {
        Side::Query => ("n/qc", "n/qn", "n/agg_q/a"),
        Side::Ad => ("n/ac", "n/an", "n/agg_a/a"),
    };
    TowerNames { center, neighbor: if cfg.share_center_neighbor { center } else { neighbor }, agg }
}

pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let e = &cfg.encoder;
    let mut p = ParamStore::new();
    for side in [Side::Query, Side::Ad] {
        let n = names(cfg, side);
        init_encoder(&mut p, n.center, e, rng);
        init_pool(&mut p, n.center, e.dim, rng);
        if cfg.variant == Variant::Twin {
            continue;
        }
        if !cfg.share_center_neighbor {
            init_encoder(&mut p, n.neighbor, e, rng);
            init_pool(&mut p, n.neighbor, e.dim, rng);
        }
        p.init_normal(n.agg, &[2 * e.dim, 1], 1.0 / (2.0 * e.dim as f64).sqrt(), rng);
    }
    init_mlp_match(&mut p, "n/match", 4 * e.dim, e.dim, rng);
    p
}

/// Neighbor attention: logits `LeakyReLU(<a, [h_c || h_i]>)`, softmax over
/// unmasked slots, weighted sum, ELU. A row whose slots are all masked
/// yields zeros.
///
/// `centers` is `B x d`, `neighbors` is `(B * N) x d` grouped by center, `a`
/// holds `2d` values.
pub fn attend_and_aggregate(s: &mut Session, a: Var, centers: Var, neighbors: Var, mask: &[bool]) -> Result<Attended> {
    let (b, d) = (s.tape.value(centers).rows(), s.tape.value(centers).cols());
    let (bn, d2) = (s.tape.value(neighbors).rows(), s.tape.value(neighbors).cols());
    if d2 != d || b == 0 || bn % b != 0 || mask.len() != bn {
        return shape_err(format!("aggregate over {bn}x{d2} neighbors for {b}x{d} centers"));
    }
    if s.tape.value(a).numel() != 2 * d {
        return shape_err(format!("attention vector of {} for width {d}", s.tape.value(a).numel()));
    }
    let n = bn / b;
    let a = s.tape.reshape(a, &[2 * d, 1])?;
    let a_center = s.tape.gather_rows(a, &(0..d).collect::<Vec<_>>())?;
    let a_neighbor = s.tape.gather_rows(a, &(d..2 * d).collect::<Vec<_>>())?;
    let c = s.tape.matmul(centers, a_center)?;
    let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let c = s.tape.gather_rows(c, &rep)?;
    let e = s.tape.matmul(neighbors, a_neighbor)?;
    let logits = s.tape.add(c, e)?;
    let logits = s.tape.activation(logits, Activation::LeakyRelu(LEAKY_SLOPE));
    let logits = s.tape.reshape(logits, &[b, n])?;
    let weights = s.tape.softmax_rows(logits, Some(mask), true)?;
    let pooled = s.tape.segment_combine(weights, neighbors)?;
    Ok(Attended { output: s.tape.activation(pooled, Activation::Elu), weights })
}

/// `[h || z]` row by row.
pub fn residual_concat(s: &mut Session, h: Var, z: Var) -> Result<Var> {
    if s.tape.value(h).shape() != s.tape.value(z).shape() {
        return shape_err("residual_concat operands differ in shape");
    }
    s.tape.concat_cols(&[h, z])
}

/// `z = [h_center || aggregate(neighbors)]` for one side, `B x 2d`.
pub fn tower(s: &mut Session, cfg: &ModelConfig, vocab: &Vocab, side: Side, centers: &[&str], samples: &[&NeighborSample]) -> Result<Var> {
    let n = names(cfg, side);
    let (b, d, k) = (centers.len(), cfg.encoder.dim, cfg.slots());
    if samples.len() != b {
        return shape_err("one neighbor sample per center is required");
    }
    let h = encode_rows(s, n.center, centers, vocab, cfg)?;
    let any_real = samples.iter().any(|smp| smp.mask.contains(&1));
    let agg = if k == 0 || !any_real {
        zeros(s, b, d)
    } else {
        let mut uniq = Interner::new();
        let mut idx = Vec::with_capacity(b * k);
        let mut mask = Vec::with_capacity(b * k);
        for smp in samples {
            if smp.len() != k {
                return shape_err(format!("neighbor sample of {} slots, expected {k}", smp.len()));
            }
            for (t, &m) in smp.neighbors.iter().zip(&smp.mask) {
                mask.push(m == 1);
                idx.push(if m == 1 { uniq.id(t) } else { 0 });
            }
        }
        let enc = encode_texts(s, n.neighbor, &uniq.items, vocab, cfg)?;
        let hn = s.tape.gather_rows(enc, &idx)?;
        let a = s.param(n.agg)?;
        attend_and_aggregate(s, a, h, hn, &mask)?.output
    };
    residual_concat(s, h, agg)
}

/// Center encodings of the query-side center encoder, `B x d`.
pub fn center_encoding(s: &mut Session, cfg: &ModelConfig, vocab: &Vocab, side: Side, texts: &[&str]) -> Result<Var> {
    encode_rows(s, names(cfg, side).center, texts, vocab, cfg)
}

pub fn match_logits(s: &mut Session, z_q: Var, z_a: Var) -> Result<Var> {
    let z = s.tape.concat_cols(&[z_q, z_a])?;
    mlp_match(s, "n/match", z)
}

pub fn logits(s: &mut Session, cfg: &ModelConfig, vocab: &Vocab, batch: &[PairExample]) -> Result<Var> {
    let queries: Vec<&str> = batch.iter().map(|e| e.query.as_str()).collect();
    let ads: Vec<&str> = batch.iter().map(|e| e.ad.as_str()).collect();
    let qn: Vec<&NeighborSample> = batch.iter().map(|e| &e.q_neighbors).collect();
    let an: Vec<&NeighborSample> = batch.iter().map(|e| &e.a_neighbors).collect();
    let z_q = tower(s, cfg, vocab, Side::Query, &queries, &qn)?;
    let z_a = tower(s, cfg, vocab, Side::Ad, &ads, &an)?;
    match_logits(s, z_q, z_a)
}
