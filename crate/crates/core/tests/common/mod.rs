//! Fixtures and straight-line reference implementations shared by the
//! integration tests and the acceptance run.
#![allow(dead_code)]

use adsgnn::corpus::{build_vocab, LabeledTriple, Vocab};
use adsgnn::graph::BehaviorGraph;
use adsgnn::models::{Model, ModelConfig, PairExample, Variant};
use adsgnn::nn::layers::{EncoderConfig, LAYER_NORM_EPS};
use adsgnn::nn::params::ParamStore;
use adsgnn::nn::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub mod measure;

pub const LEAKY: f64 = 0.2;

pub fn randn(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn rand_rows(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| randn(rng, cols, scale)).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY * x
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Softmax over the unmasked entries; all-masked input gives all zeros.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = logits.iter().zip(mask).filter(|(_, &k)| k).map(|(&l, _)| l).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let e: Vec<f64> = logits.iter().zip(mask).map(|(&l, &k)| if k { (l - m).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn weighted_sum(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (w, r) in weights.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += w * x;
        }
    }
    out
}

/// `ELU(sum_i alpha_i h_i)` with `alpha = softmax(LeakyReLU(<a, [c || h_i]>))`.
pub fn attend_and_aggregate(a: &[f64], center: &[f64], neighbors: &[Vec<f64>], mask: &[bool]) -> Vec<f64> {
    let d = center.len();
    let logits: Vec<f64> = neighbors.iter().map(|h| leaky(dot(&a[..d], center) + dot(&a[d..], h))).collect();
    let alpha = masked_softmax(&logits, mask);
    weighted_sum(&alpha, neighbors).into_iter().map(elu).collect()
}

/// `sum_i softmax(tanh(<w, h_i> + b))_i h_i` over the unmasked edges.
pub fn order_attention(w: &[f64], b: f64, edges: &[Vec<f64>], mask: &[bool]) -> Vec<f64> {
    let scores: Vec<f64> = edges.iter().map(|h| (dot(w, h) + b).tanh()).collect();
    weighted_sum(&masked_softmax(&scores, mask), edges)
}

/// `[s_in || sum_i alpha_i s_i]` over `i in {in, first, second}`.
pub fn edge_type_aggregate(a: &[f64], s_in: &[f64], s_first: &[f64], s_second: &[f64]) -> Vec<f64> {
    let d = s_in.len();
    let parts = [s_in.to_vec(), s_first.to_vec(), s_second.to_vec()];
    let logits: Vec<f64> = parts.iter().map(|v| leaky(dot(&a[..d], s_in) + dot(&a[d..], v))).collect();
    let alpha = masked_softmax(&logits, &[true; 3]);
    let mut out = s_in.to_vec();
    out.extend(weighted_sum(&alpha, &parts));
    out
}

fn vec_mat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols).map(|c| x.iter().zip(w).map(|(xi, row)| xi * row[c]).sum()).collect()
}

/// Single-head attention among the nodes of one group; masked nodes are
/// not attended to and keep their input row.
pub fn graph_transformer(
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    h: &[Vec<f64>],
    mask: &[bool],
    residual: bool,
) -> Vec<Vec<f64>> {
    let d = h[0].len() as f64;
    let q: Vec<Vec<f64>> = h.iter().map(|x| vec_mat(x, wq)).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|x| vec_mat(x, wk)).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|x| vec_mat(x, wv)).collect();
    (0..h.len())
        .map(|i| {
            if !mask[i] {
                return h[i].clone();
            }
            let logits: Vec<f64> = k.iter().map(|kj| dot(&q[i], kj) / d.sqrt()).collect();
            let mut out = weighted_sum(&masked_softmax(&logits, mask), &v);
            if residual {
                for (o, x) in out.iter_mut().zip(&h[i]) {
                    *o += x;
                }
            }
            out
        })
        .collect()
}

fn mat(p: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    to_rows(p.get(name).unwrap())
}

fn vector(p: &ParamStore, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

fn affine(x: &[f64], p: &ParamStore, prefix: &str) -> Vec<f64> {
    let b = vector(p, &format!("{prefix}/b"));
    vec_mat(x, &mat(p, &format!("{prefix}/w"))).iter().zip(&b).map(|(y, b)| y + b).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| g * (v - mu) * inv + b).collect()
}

/// One pre-norm encoder layer on a single sequence, written position by
/// position and head by head.
pub fn transformer_layer(p: &ParamStore, prefix: &str, x: &[Vec<f64>], mask: &[bool], heads: usize) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let dh = d / heads;
    let ln = |x: &[f64], n: &str| layer_norm(x, &vector(p, &format!("{prefix}/{n}_g")), &vector(p, &format!("{prefix}/{n}_b")));
    let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, "ln1")).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|r| affine(r, p, &format!("{prefix}/q"))).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|r| affine(r, p, &format!("{prefix}/k"))).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|r| affine(r, p, &format!("{prefix}/v"))).collect();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut attn = vec![0.0; d];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let logits: Vec<f64> = k.iter().map(|kj| dot(&q[i][cols.clone()], &kj[cols.clone()]) / (dh as f64).sqrt()).collect();
            let w = masked_softmax(&logits, mask);
            for (j, wj) in w.iter().enumerate() {
                for c in cols.clone() {
                    attn[c] += wj * v[j][c];
                }
            }
        }
        let o = affine(&attn, p, &format!("{prefix}/o"));
        let x1: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
        let f = affine(&ln(&x1, "ln2"), p, &format!("{prefix}/ffn1"));
        let f: Vec<f64> = f.into_iter().map(gelu).collect();
        let f = affine(&f, p, &format!("{prefix}/ffn2"));
        out.push(x1.iter().zip(&f).map(|(a, b)| a + b).collect());
    }
    out
}

/// Exact pairwise ROC-AUC with ties counted half.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// A hand-written click graph: two topics, a few multi-neighbor entities,
/// one isolated ad and one single-edge query.
pub struct Fixture {
    pub graph: BehaviorGraph,
    pub vocab: Vocab,
    pub pairs: Vec<LabeledTriple>,
}

pub fn fixture() -> Fixture {
    let edges = [
        ("cheap flights", "discount airline tickets", 9),
        ("cheap flights", "flight deals today", 5),
        ("cheap flights", "hotel and flight bundle", 2),
        ("airline tickets", "discount airline tickets", 7),
        ("airline tickets", "flight deals today", 3),
        ("running shoes", "trail running gear", 6),
        ("running shoes", "sport shoes sale", 4),
        ("marathon gear", "trail running gear", 8),
        ("marathon gear", "sport shoes sale", 1),
        ("marathon gear", "energy gels", 2),
        ("af1", "sport shoes sale", 3),
    ];
    let edges: Vec<(String, String, u64)> = edges.iter().map(|&(q, a, c)| (q.into(), a.into(), c)).collect();
    let graph = BehaviorGraph::from_parts(edges, Vec::<String>::new(), vec!["gift cards".to_string()]).unwrap();
    let texts: Vec<&String> = graph.queries().iter().chain(graph.ads()).collect();
    let vocab = build_vocab(texts, 200).unwrap();
    let pairs = [
        ("cheap flights", "flight deals today", 1),
        ("cheap flights", "sport shoes sale", 0),
        ("airline tickets", "hotel and flight bundle", 1),
        ("running shoes", "trail running gear", 1),
        ("marathon gear", "discount airline tickets", 0),
        ("af1", "sport shoes sale", 1),
        ("af1", "gift cards", 0),
        ("airline tickets", "energy gels", 0),
    ];
    let pairs = pairs.iter().map(|&(q, a, l)| LabeledTriple::new(q, a, l).unwrap()).collect();
    Fixture { graph, vocab, pairs }
}

pub fn tiny_config(variant: Variant, vocab: &Vocab, dim: usize, layers: usize, k: usize, max_len: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, vocab.len());
    cfg.encoder = EncoderConfig { dim, heads: 2, layers, ffn_mult: 2, vocab_size: vocab.len(), max_positions: 2 * max_len };
    cfg.k = k;
    cfg.max_len_single = max_len;
    cfg.max_len_pair = 2 * max_len;
    cfg
}

pub fn examples(model: &Model, fx: &Fixture) -> Vec<PairExample> {
    model.examples(&fx.graph, fx.pairs.iter().map(|t| (t.query.as_str(), t.ad.as_str()))).unwrap()
}

pub fn labels(fx: &Fixture) -> Vec<u8> {
    fx.pairs.iter().map(|t| t.label).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Model(Variant),
    Pretrain,
    Distill,
}

pub const GRAD_TARGETS: [GradTarget; 6] = [
    GradTarget::Model(Variant::Twin),
    GradTarget::Model(Variant::Node),
    GradTarget::Model(Variant::Edge),
    GradTarget::Model(Variant::Token),
    GradTarget::Pretrain,
    GradTarget::Distill,
];

/// Finite-difference check of one randomized tiny instance: width 8, at
/// most 6 tokens per entity and at most 3 neighbor slots.
pub fn gradcheck_case(target: GradTarget, seed: u64) -> adsgnn::nn::gradcheck::GradCheckReport {
    use adsgnn::distill::{kd_loss_var, student_embed, Student};
    use adsgnn::graph::Side;
    use adsgnn::models::loss;
    use adsgnn::nn::gradcheck::check_gradients;
    use adsgnn::nn::params::AdamConfig;
    use adsgnn::pretrain::mask_tokens_with;
    use adsgnn::pretrain::{init_params, pretrain_loss, MaskingRecipe, NpSampler, PretrainConfig, Tasks};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let fx = fixture();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.gen_range(1..=2);
    let k = rng.gen_range(0..=3);
    let max_len = rng.gen_range(4..=6);
    let h = 1e-5;
    let per_param = 3;
    match target {
        GradTarget::Model(v) => {
            let mut cfg = tiny_config(v, &fx.vocab, 8, layers, k, max_len);
            cfg.share_center_neighbor = rng.gen_bool(0.5);
            cfg.graph_residual = rng.gen_bool(0.5);
            let model = Model::init(cfg, &mut rng).unwrap();
            let mut ex = examples(&model, &fx);
            ex.shuffle(&mut rng);
            ex.truncate(3);
            let y: Vec<u8> = (0..ex.len()).map(|_| rng.gen_range(0..2)).collect();
            check_gradients(&model.params, |s| loss(s, &cfg, &fx.vocab, &ex, &y), h, per_param, &mut rng).unwrap()
        }
        GradTarget::Pretrain => {
            let cfg = PretrainConfig {
                tasks: Tasks::BOTH,
                encoder: tiny_config(Variant::Token, &fx.vocab, 8, layers, k, max_len).encoder,
                k,
                max_len_single: max_len,
                max_len_pair: 2 * max_len,
                epochs: 1,
                batch_size: 4,
                adam: AdamConfig::default(),
                seed,
                masking: MaskingRecipe::with_rate(0.5),
            };
            let params = init_params(&cfg, &mut rng);
            let entities: Vec<(&String, Side)> =
                fx.graph.queries().iter().map(|q| (q, Side::Query)).chain(fx.graph.ads().iter().map(|a| (a, Side::Ad))).collect();
            let mut mlm = Vec::new();
            while mlm.len() < 3 {
                let (e, side) = *entities.choose(&mut rng).unwrap();
                let center = adsgnn::corpus::encode_single(e, &fx.vocab, max_len);
                let masked = mask_tokens_with(&center, &cfg.masking, &mut rng, fx.vocab.len());
                if masked.corrupted_positions.is_empty() {
                    continue;
                }
                let neighbors = fx.graph.sample_neighbors(e, side, k).unwrap();
                mlm.push(adsgnn::pretrain::NeMlmExample { center, masked, neighbors });
            }
            let sampler = NpSampler::new(&fx.graph).unwrap();
            let np: Vec<_> = (0..3).map(|_| sampler.example(&mut rng, &fx.vocab, 2 * max_len, None).unwrap()).collect();
            check_gradients(
                &params,
                |s| Ok(pretrain_loss(s, &cfg, &fx.vocab, &mlm, &np)?.expect("both tasks have targets")),
                h,
                per_param,
                &mut rng,
            )
            .unwrap()
        }
        GradTarget::Distill => {
            let enc = tiny_config(Variant::Node, &fx.vocab, 8, layers, k, max_len).encoder;
            let student = Student::init(enc, max_len, 16, &mut rng).unwrap();
            let texts: Vec<&str> = fx.graph.queries().iter().take(3).map(String::as_str).collect();
            let targets = Tensor::matrix(texts.len(), 16, randn(&mut rng, texts.len() * 16, 1.0)).unwrap();
            check_gradients(
                &student.params,
                |s| {
                    let z = student_embed(s, &student, &fx.vocab, &texts)?;
                    kd_loss_var(s, z, &targets)
                },
                h,
                per_param,
                &mut rng,
            )
            .unwrap()
        }
    }
}
