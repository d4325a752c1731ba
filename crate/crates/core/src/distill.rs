//! Neighbor-free student distilled from a node-level teacher, and the
//! neighbor-completion strategies used for entities missing from the graph.

use std::cmp::Ordering;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_single, Vocab};
use crate::error::{shape_err, Error, Result};
use crate::graph::{BehaviorGraph, NeighborSample, Side};
use crate::models::node::{self, center_encoding};
use crate::models::{Model, PairExample, Variant};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{encoder_states, init_encoder, init_linear, linear, EncoderConfig, SeqBatch};
use crate::nn::params::{Adam, AdamConfig, ParamStore, Session};
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;

pub const STUDENT_LAYERS: usize = 5;

/// Text-only encoder whose projected CLS embedding imitates the teacher's
/// query representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub encoder: EncoderConfig,
    pub max_len: usize,
    /// Width of the imitated representation.
    pub out_dim: usize,
    pub params: ParamStore,
}

impl Student {
    pub fn init(encoder: EncoderConfig, max_len: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        encoder.validate()?;
        let mut params = ParamStore::new();
        init_encoder(&mut params, "s/enc", &encoder, rng);
        init_linear(&mut params, "s/proj", encoder.dim, out_dim, rng);
        Ok(Self { encoder, max_len, out_dim, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let e = &self.encoder;
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "student")
            .with_meta("dim", e.dim)
            .with_meta("heads", e.heads)
            .with_meta("layers", e.layers)
            .with_meta("ffn_mult", e.ffn_mult)
            .with_meta("vocab_size", e.vocab_size)
            .with_meta("max_positions", e.max_positions)
            .with_meta("max_len", self.max_len)
            .with_meta("out_dim", self.out_dim)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "student" {
            return Err(Error::Checkpoint("not a student checkpoint".into()));
        }
        let encoder = EncoderConfig {
            dim: ck.meta_parse("dim")?,
            heads: ck.meta_parse("heads")?,
            layers: ck.meta_parse("layers")?,
            ffn_mult: ck.meta_parse("ffn_mult")?,
            vocab_size: ck.meta_parse("vocab_size")?,
            max_positions: ck.meta_parse("max_positions")?,
        };
        encoder.validate()?;
        Ok(Self { encoder, max_len: ck.meta_parse("max_len")?, out_dim: ck.meta_parse("out_dim")?, params: ck.params.clone() })
    }

    /// Frozen student embeddings, one row per text.
    pub fn embed(&self, vocab: &Vocab, texts: &[&str]) -> Result<Tensor> {
        let mut s = Session::new(&self.params, false);
        let z = student_embed(&mut s, self, vocab, texts)?;
        Ok(s.tape.value(z).clone())
    }
}

/// `encode_single -> encoder -> CLS -> linear`, `B x out_dim`.
pub fn student_embed(s: &mut Session, student: &Student, vocab: &Vocab, texts: &[&str]) -> Result<Var> {
    let seqs: Vec<_> = texts.iter().map(|t| encode_single(t, vocab, student.max_len)).collect();
    let batch = SeqBatch::from_owned(&seqs)?;
    let h = encoder_states(s, "s/enc", &batch, student.encoder.layers, student.encoder.heads)?;
    let cls: Vec<usize> = (0..batch.count).map(|i| i * batch.len).collect();
    let h = s.tape.gather_rows(h, &cls)?;
    linear(s, "s/proj", h)
}

fn require_teacher(teacher: &Model) -> Result<()> {
    if teacher.config.variant != Variant::Node {
        return Err(Error::VariantMismatch { expected: Variant::Node.to_string(), found: teacher.config.variant.to_string() });
    }
    Ok(())
}

/// The teacher's query representation `[h_q || aggregate]` for each query
/// with the given neighbor slots.
pub fn teacher_embed_with(teacher: &Model, vocab: &Vocab, queries: &[&str], samples: &[&NeighborSample]) -> Result<Tensor> {
    require_teacher(teacher)?;
    let mut s = Session::new(&teacher.params, false);
    let z = node::tower(&mut s, &teacher.config, vocab, Side::Query, queries, samples)?;
    Ok(s.tape.value(z).clone())
}

/// Teacher representations using each query's sampled graph neighbors.
pub fn teacher_embed(teacher: &Model, graph: &BehaviorGraph, vocab: &Vocab, queries: &[&str], k: usize) -> Result<Tensor> {
    let samples = queries.iter().map(|q| graph.sample_neighbors(q, Side::Query, k)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&NeighborSample> = samples.iter().collect();
    teacher_embed_with(teacher, vocab, queries, &refs)
}

/// Squared Euclidean distance.
pub fn kd_loss(z_hat: &[f64], z: &[f64]) -> Result<f64> {
    if z_hat.len() != z.len() {
        return shape_err(format!("kd_loss over {} and {} values", z_hat.len(), z.len()));
    }
    Ok(z_hat.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Batch mean of row-wise squared distances between `z_hat` and the
/// constant targets.
pub fn kd_loss_var(s: &mut Session, z_hat: Var, targets: &Tensor) -> Result<Var> {
    if s.tape.value(z_hat).shape() != targets.shape() {
        return shape_err("student and teacher representations differ in shape");
    }
    let rows = targets.rows().max(1);
    let t = s.tape.constant(targets.clone());
    let diff = s.tape.sub(z_hat, t)?;
    let sq = s.tape.mul(diff, diff)?;
    let total = s.tape.sum(sq);
    Ok(s.tape.scale(total, 1.0 / rows as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { layers: STUDENT_LAYERS, epochs: 3, batch_size: 64, adam: AdamConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
}

/// Mean `kd_loss` of the student over `queries` against precomputed targets.
pub fn mean_kd_loss(student: &Student, vocab: &Vocab, queries: &[&str], targets: &Tensor) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let z = student.embed(vocab, queries)?;
    let mut total = 0.0;
    for r in 0..queries.len() {
        total += kd_loss(z.row(r), targets.row(r))?;
    }
    Ok(total / queries.len() as f64)
}

/// Fits a fresh student to the frozen teacher's query representations.
pub fn distill_run(
    teacher: &Model,
    graph: &BehaviorGraph,
    vocab: &Vocab,
    queries: &[&str],
    cfg: &DistillConfig,
) -> Result<(Student, DistillReport)> {
    require_teacher(teacher)?;
    let tc = &teacher.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = EncoderConfig { layers: cfg.layers, ..tc.encoder };
    let mut student = Student::init(encoder, tc.max_len_single, 2 * tc.encoder.dim, &mut rng)?;
    let targets = teacher_embed(teacher, graph, vocab, queries, tc.k)?;
    let initial_loss = mean_kd_loss(&student, vocab, queries, &targets)?;
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut report = DistillReport { loss_curve: Vec::new(), initial_loss };
    let d2 = targets.cols();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let texts: Vec<&str> = chunk.iter().map(|&i| queries[i]).collect();
            let rows: Vec<f64> = chunk.iter().flat_map(|&i| targets.row(i).iter().copied()).collect();
            let t = Tensor::matrix(chunk.len(), d2, rows)?;
            let mut s = Session::new(&student.params, true);
            let z = student_embed(&mut s, &student, vocab, &texts)?;
            let l = kd_loss_var(&mut s, z, &t)?;
            total += s.tape.scalar(l);
            n += 1;
            let g = s.backward(l)?;
            drop(s);
            adam.step(&mut student.params, &g)?;
        }
        report.loss_curve.push(if n == 0 { 0.0 } else { total / n as f64 });
    }
    Ok((student, report))
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Exhaustive top-k by cosine similarity, ties broken by text.
pub fn exact_nn_search(query: &[f64], pool: &[(String, Vec<f64>)], k: usize) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let Some((t, _)) = pool.iter().find(|(_, v)| v.len() != query.len()) {
        return shape_err(format!("pool entry {t:?} has a different width"));
    }
    let mut scored: Vec<(f64, &str)> = pool.iter().map(|(t, v)| (cosine(query, v), t.as_str())).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, t)| t.to_string()).collect())
}

/// Candidate neighbors for nearest-neighbor completion, embedded with the
/// teacher's query-side center encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnPool {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl AnnPool {
    pub fn build(teacher: &Model, vocab: &Vocab, texts: &[&str]) -> Result<Self> {
        require_teacher(teacher)?;
        if texts.is_empty() {
            return Err(Error::EmptyPool);
        }
        let h = semantic_embed(teacher, vocab, texts)?;
        Ok(Self { entries: texts.iter().enumerate().map(|(i, t)| (t.to_string(), h.row(i).to_vec())).collect() })
    }
}

fn semantic_embed(teacher: &Model, vocab: &Vocab, texts: &[&str]) -> Result<Tensor> {
    let mut s = Session::new(&teacher.params, false);
    let h = center_encoding(&mut s, &teacher.config, vocab, Side::Query, texts)?;
    Ok(s.tape.value(h).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Padding,
    Ann,
    Kd,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "padding" => Ok(Strategy::Padding),
            "ann" => Ok(Strategy::Ann),
            "kd" => Ok(Strategy::Kd),
            _ => Err(Error::Config(format!("unknown strategy {s:?} (expected padding, ann or kd)"))),
        }
    }
}

/// Whatever a completion strategy needs beyond the query text.
#[derive(Debug, Clone, Copy)]
pub struct CompletionContext<'a> {
    pub teacher: &'a Model,
    pub vocab: &'a Vocab,
    pub student: Option<&'a Student>,
    pub pool: Option<&'a AnnPool>,
}

/// Query representations for matching, produced without the graph.
pub fn complete_neighbors(queries: &[&str], strategy: Strategy, ctx: &CompletionContext) -> Result<Tensor> {
    let k = ctx.teacher.config.k;
    match strategy {
        Strategy::Padding => {
            let pad = NeighborSample::padding(k);
            teacher_embed_with(ctx.teacher, ctx.vocab, queries, &vec![&pad; queries.len()])
        }
        Strategy::Ann => {
            let pool = ctx.pool.ok_or(Error::EmptyPool)?;
            if pool.entries.is_empty() {
                return Err(Error::EmptyPool);
            }
            let h = semantic_embed(ctx.teacher, ctx.vocab, queries)?;
            let samples = (0..queries.len())
                .map(|i| Ok(NeighborSample::from_texts(exact_nn_search(h.row(i), &pool.entries, k)?, k)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&NeighborSample> = samples.iter().collect();
            teacher_embed_with(ctx.teacher, ctx.vocab, queries, &refs)
        }
        Strategy::Kd => {
            let student = ctx.student.ok_or_else(|| Error::Config("the kd strategy needs a student".into()))?;
            student.embed(ctx.vocab, queries)
        }
    }
}

/// Positive-class probabilities of the teacher with query representations
/// supplied by `strategy`; ads keep their graph neighbors.
pub fn score_with_strategy(examples: &[PairExample], strategy: Strategy, ctx: &CompletionContext) -> Result<Vec<f64>> {
    let queries: Vec<&str> = examples.iter().map(|e| e.query.as_str()).collect();
    let z_q = complete_neighbors(&queries, strategy, ctx)?;
    let teacher = ctx.teacher;
    let mut s = Session::new(&teacher.params, false);
    let ads: Vec<&str> = examples.iter().map(|e| e.ad.as_str()).collect();
    let an: Vec<&NeighborSample> = examples.iter().map(|e| &e.a_neighbors).collect();
    let z_a = node::tower(&mut s, &teacher.config, ctx.vocab, Side::Ad, &ads, &an)?;
    let z_q = s.tape.constant(z_q);
    let logits = node::match_logits(&mut s, z_q, z_a)?;
    let p = s.tape.softmax_rows(logits, None, false)?;
    Ok(s.tape.value(p).data().chunks(2).map(|r| r[1]).collect())
}

/// Seeded shuffle helper shared by callers that hold out a query subset.
pub fn split_holdout<'a>(queries: &[&'a str], fraction: f64, seed: u64) -> (Vec<&'a str>, Vec<&'a str>) {
    let mut v = queries.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((v.len() as f64) * fraction).round() as usize;
    let hold = v.split_off(v.len() - n_hold.min(v.len()));
    (v, hold)
}
