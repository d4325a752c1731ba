//! Synthetic data with a planted graph signal, plus the training loop and
//! its ranking metric.
//!
//! # Generative process
//!
//! There are `topics` latent topics. Each topic owns disjoint word lists for
//! queries (`qT_W`) and for ads (`aT_W`), so query and ad text never share
//! surface tokens and the relation between them must be learned. A
//! fraction `ambiguity` of queries draws its words from a shared pool
//! (`zW`) that carries no topic information at all. Each query clicks
//! `1` ad with probability `p_single`, otherwise `2..=max_degree` distinct
//! ads; each click goes to a same-topic ad with probability `1 - noise` and
//! to a random other-topic ad otherwise. Click counts are uniform in
//! `1..=20`. Labeled pairs join a query to an ad drawn independently of
//! the graph, relevant iff the topics agree, with `neg_ratio` negatives per
//! positive on average. Queries (not pairs) are split into train, val and
//! test, which keeps the three pair sets disjoint.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocab, load_labeled_triples, triples_to_tsv, LabeledTriple, Vocab};
use crate::distill::{score_with_strategy, CompletionContext, Strategy};
use crate::error::{Error, Result};
use crate::graph::BehaviorGraph;
use crate::models::{self, Model, ModelConfig, PairExample, Variant};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::params::{Adam, AdamConfig, Session};
use crate::pretrain::apply_pretrained;

/// Area under the ROC curve from average ranks, so tied scores count half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&o| labels[o] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub topics: usize,
    pub queries: usize,
    pub ads: usize,
    /// Fraction of queries whose words carry no topic (`phi`).
    pub ambiguity: f64,
    /// Probability that a click leaves the query's topic (`rho`).
    pub noise: f64,
    pub query_words_per_topic: usize,
    pub ad_words_per_topic: usize,
    pub ambiguous_words: usize,
    pub p_single: f64,
    pub max_degree: usize,
    pub pairs_per_query: usize,
    pub neg_ratio: f64,
    /// Train and validation shares of queries; the rest is test.
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            topics: 8,
            queries: 3000,
            ads: 800,
            ambiguity: 0.5,
            noise: 0.05,
            query_words_per_topic: 10,
            ad_words_per_topic: 10,
            ambiguous_words: 40,
            p_single: 0.3,
            max_degree: 5,
            pairs_per_query: 4,
            neg_ratio: 2.2,
            train_frac: 0.70,
            val_frac: 0.08,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.topics < 2 {
            return bad("at least two topics are required");
        }
        if self.queries == 0 || self.ads < self.topics || self.pairs_per_query == 0 {
            return bad("queries, pairs per query and at least one ad per topic are required");
        }
        if self.query_words_per_topic == 0 || self.ad_words_per_topic == 0 || (self.ambiguity > 0.0 && self.ambiguous_words == 0) {
            return bad("word lists must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.ambiguity) || !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.p_single) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.max_degree < 2 || self.neg_ratio < 0.0 {
            return bad("max degree must be at least 2 and the negative ratio non-negative");
        }
        if self.train_frac <= 0.0 || self.val_frac < 0.0 || self.train_frac + self.val_frac > 1.0 {
            return bad("split fractions must be positive and sum to at most 1");
        }
        Ok(())
    }
}

/// Generated corpus with the latent assignments kept for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub graph: BehaviorGraph,
    pub train: Vec<LabeledTriple>,
    pub val: Vec<LabeledTriple>,
    pub test: Vec<LabeledTriple>,
    pub vocab: Vocab,
    pub query_topic: BTreeMap<String, usize>,
    pub ad_topic: BTreeMap<String, usize>,
    pub ambiguous: BTreeSet<String>,
}

fn distinct_text(rng: &mut impl Rng, words: &[String], min: usize, max: usize, taken: &mut BTreeSet<String>) -> Option<String> {
    for _ in 0..1000 {
        let n = rng.gen_range(min..=max).min(words.len());
        let text = words.choose_multiple(rng, n).cloned().collect::<Vec<_>>().join(" ");
        if taken.insert(text.clone()) {
            return Some(text);
        }
    }
    None
}

pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = |p: &str, n: usize| -> Vec<String> { (0..n).map(|w| format!("{p}{w}")).collect() };
    let qwords: Vec<Vec<String>> = (0..cfg.topics).map(|t| words(&format!("q{t}_"), cfg.query_words_per_topic)).collect();
    let awords: Vec<Vec<String>> = (0..cfg.topics).map(|t| words(&format!("a{t}_"), cfg.ad_words_per_topic)).collect();
    let zwords = words("z", cfg.ambiguous_words);
    let exhausted = || Error::Config("too few words for the requested number of distinct texts".into());

    let mut taken = BTreeSet::new();
    let mut ads_by_topic: Vec<Vec<String>> = vec![Vec::new(); cfg.topics];
    let mut ad_topic = BTreeMap::new();
    for i in 0..cfg.ads {
        let t = i % cfg.topics;
        let text = distinct_text(&mut rng, &awords[t], 2, 4, &mut taken).ok_or_else(exhausted)?;
        ads_by_topic[t].push(text.clone());
        ad_topic.insert(text, t);
    }
    let all_ads: Vec<String> = ad_topic.keys().cloned().collect();

    let mut queries = Vec::with_capacity(cfg.queries);
    let mut query_topic = BTreeMap::new();
    let mut ambiguous = BTreeSet::new();
    for _ in 0..cfg.queries {
        let t = rng.gen_range(0..cfg.topics);
        let amb = rng.gen_bool(cfg.ambiguity);
        let pool = if amb { &zwords } else { &qwords[t] };
        let text = distinct_text(&mut rng, pool, 2, 3, &mut taken).ok_or_else(exhausted)?;
        if amb {
            ambiguous.insert(text.clone());
        }
        query_topic.insert(text.clone(), t);
        queries.push(text);
    }

    let mut edges: Vec<(String, String, u64)> = Vec::new();
    for q in &queries {
        let t = query_topic[q];
        let degree = if rng.gen_bool(cfg.p_single) { 1 } else { rng.gen_range(2..=cfg.max_degree) };
        let mut chosen = BTreeSet::new();
        for _ in 0..degree * 20 {
            if chosen.len() == degree {
                break;
            }
            let ad = if rng.gen_bool(1.0 - cfg.noise) {
                ads_by_topic[t].choose(&mut rng)
            } else {
                let other = (t + rng.gen_range(1..cfg.topics)) % cfg.topics;
                ads_by_topic[other].choose(&mut rng)
            };
            let Some(ad) = ad else { continue };
            if chosen.insert(ad.clone()) {
                edges.push((q.clone(), ad.clone(), rng.gen_range(1..=20)));
            }
        }
    }
    let graph = BehaviorGraph::from_parts(edges, Vec::<String>::new(), all_ads.clone())?;

    let pos_prob = 1.0 / (1.0 + cfg.neg_ratio);
    let mut split_order = queries.clone();
    split_order.shuffle(&mut rng);
    let n_train = (cfg.train_frac * cfg.queries as f64).round() as usize;
    let n_val = (cfg.val_frac * cfg.queries as f64).round() as usize;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, q) in split_order.iter().enumerate() {
        let t = query_topic[q];
        let bucket = if i < n_train {
            &mut train
        } else if i < n_train + n_val {
            &mut val
        } else {
            &mut test
        };
        let mut used = BTreeSet::new();
        for _ in 0..cfg.pairs_per_query {
            for _ in 0..100 {
                let positive = rng.gen_bool(pos_prob);
                let ad = if positive {
                    ads_by_topic[t].choose(&mut rng)
                } else {
                    let other = (t + rng.gen_range(1..cfg.topics)) % cfg.topics;
                    ads_by_topic[other].choose(&mut rng)
                };
                let Some(ad) = ad else { continue };
                if used.insert(ad.clone()) {
                    bucket.push(LabeledTriple::new(q, ad, positive as u8)?);
                    break;
                }
            }
        }
    }

    let corpus = queries.iter().chain(&all_ads);
    let n_words = cfg.topics * (cfg.query_words_per_topic + cfg.ad_words_per_topic) + cfg.ambiguous_words;
    let vocab = build_vocab(corpus, n_words + 64)?;
    Ok(SyntheticData { graph, train, val, test, vocab, query_topic, ad_topic, ambiguous })
}

impl SyntheticData {
    /// Writes `edges.tsv`, `train.tsv`, `val.tsv`, `test.tsv`, `vocab.txt`
    /// and `topics.tsv` (entity, side, topic, ambiguous) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("edges.tsv"), self.graph.to_tsv())?;
        fs::write(dir.join("train.tsv"), triples_to_tsv(&self.train))?;
        fs::write(dir.join("val.tsv"), triples_to_tsv(&self.val))?;
        fs::write(dir.join("test.tsv"), triples_to_tsv(&self.test))?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_file_string())?;
        let mut topics = String::new();
        for (q, t) in &self.query_topic {
            topics.push_str(&format!("{q}\tquery\t{t}\t{}\n", self.ambiguous.contains(q) as u8));
        }
        for (a, t) in &self.ad_topic {
            topics.push_str(&format!("{a}\tad\t{t}\t0\n"));
        }
        fs::write(dir.join("topics.tsv"), topics)?;
        Ok(())
    }
}

/// Training hyperparameters plus the model architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop as soon as an epoch's mean training loss falls below this.
    pub target_loss: Option<f64>,
}

impl RunConfig {
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        Self {
            model: ModelConfig::new(variant, vocab_size),
            batch_size: 64,
            lr: AdamConfig::default().lr,
            epochs: 3,
            seed: 0,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Best validation AUC for training runs, or the evaluation AUC.
    pub roc_auc: Option<f64>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Validation AUC per epoch (empty when there is no validation set).
    pub val_auc: Vec<f64>,
    pub wall_secs: f64,
}

impl Metrics {
    /// Deterministic key-value lines (wall time excluded).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(auc) = self.roc_auc {
            out.push_str(&format!("roc_auc={auc:.6}\n"));
        }
        for (i, l) in self.loss_curve.iter().enumerate() {
            out.push_str(&format!("epoch{}_loss={l:.6}\n", i + 1));
        }
        for (i, a) in self.val_auc.iter().enumerate() {
            out.push_str(&format!("epoch{}_val_auc={a:.6}\n", i + 1));
        }
        out
    }
}

fn triple_pairs(triples: &[LabeledTriple]) -> impl Iterator<Item = (&str, &str)> {
    triples.iter().map(|t| (t.query.as_str(), t.ad.as_str()))
}

/// Positive-class probabilities in batches.
pub fn predict_all(model: &Model, vocab: &Vocab, examples: &[PairExample], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        out.extend(model.predict(vocab, chunk)?);
    }
    Ok(out)
}

fn auc_of(model: &Model, vocab: &Vocab, graph: &BehaviorGraph, triples: &[LabeledTriple], batch: usize) -> Result<f64> {
    let ex = model.examples(graph, triple_pairs(triples))?;
    let scores = predict_all(model, vocab, &ex, batch)?;
    let labels: Vec<u8> = triples.iter().map(|t| t.label).collect();
    roc_auc(&scores, &labels)
}

/// Mini-batch Adam on mean cross-entropy; keeps the checkpoint of the best
/// validation AUC (the last epoch's when `val` is empty).
///
/// `init` is either a pre-training checkpoint, whose encoders are copied
/// into a fresh model, or a model checkpoint of the same variant to
/// continue from.
pub fn train(
    cfg: &RunConfig,
    vocab: &Vocab,
    graph: &BehaviorGraph,
    train_set: &[LabeledTriple],
    val: &[LabeledTriple],
    init: Option<&Checkpoint>,
) -> Result<(Checkpoint, Metrics)> {
    let start = Instant::now();
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg.model, &mut rng)?;
    if let Some(ck) = init {
        if ck.meta.get("kind").map(String::as_str) == Some("pretrain") {
            apply_pretrained(&mut model, ck)?;
        } else {
            let m = Model::from_checkpoint_as(ck, cfg.model.variant)?;
            if m.config != cfg.model {
                return Err(Error::Config("initial checkpoint architecture differs from the run".into()));
            }
            model = m;
        }
    }
    let examples = model.examples(graph, triple_pairs(train_set))?;
    let labels: Vec<u8> = train_set.iter().map(|t| t.label).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut metrics = Metrics { roc_auc: None, loss_curve: Vec::new(), val_auc: Vec::new(), wall_secs: 0.0 };
    let mut best = model.to_checkpoint();
    let mut best_auc = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<PairExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let mut s = Session::new(&model.params, true);
            let l = models::loss(&mut s, &model.config, vocab, &batch, &y)?;
            total += s.tape.scalar(l);
            n += 1;
            let g = s.backward(l)?;
            drop(s);
            adam.step(&mut model.params, &g)?;
        }
        let epoch_loss = total / n as f64;
        metrics.loss_curve.push(epoch_loss);
        if val.is_empty() {
            best = model.to_checkpoint();
        } else {
            let auc = auc_of(&model, vocab, graph, val, cfg.batch_size)?;
            metrics.val_auc.push(auc);
            if auc > best_auc {
                best_auc = auc;
                best = model.to_checkpoint();
            }
            metrics.roc_auc = Some(best_auc);
        }
        if cfg.target_loss.is_some_and(|t| epoch_loss < t) {
            break;
        }
    }
    metrics.wall_secs = start.elapsed().as_secs_f64();
    Ok((best, metrics))
}

/// Scores every triple and computes ROC-AUC. With a strategy, the query
/// side is produced by neighbor completion on a node-level teacher.
pub fn evaluate(
    ckpt: &Checkpoint,
    expected: Variant,
    vocab: &Vocab,
    graph: &BehaviorGraph,
    triples: &[LabeledTriple],
    strategy: Option<(Strategy, &CompletionContext)>,
) -> Result<Metrics> {
    let start = Instant::now();
    let model = Model::from_checkpoint_as(ckpt, expected)?;
    let labels: Vec<u8> = triples.iter().map(|t| t.label).collect();
    let examples = model.examples(graph, triple_pairs(triples))?;
    let scores = match strategy {
        None => predict_all(&model, vocab, &examples, 256)?,
        Some((st, ctx)) => {
            let mut out = Vec::with_capacity(examples.len());
            for chunk in examples.chunks(256) {
                out.extend(score_with_strategy(chunk, st, ctx)?);
            }
            out
        }
    };
    Ok(Metrics {
        roc_auc: Some(roc_auc(&scores, &labels)?),
        loss_curve: Vec::new(),
        val_auc: Vec::new(),
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Loads the files written by [`SyntheticData::write`] (topics excluded).
pub fn load_triples(path: &Path) -> Result<Vec<LabeledTriple>> {
    load_labeled_triples(std::io::BufReader::new(fs::File::open(path)?))
}
