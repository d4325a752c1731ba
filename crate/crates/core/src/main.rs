use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use adsgnn::corpus::{LabeledTriple, Vocab};
use adsgnn::distill::{distill_run, AnnPool, CompletionContext, DistillConfig, Strategy, Student};
use adsgnn::graph::{BehaviorGraph, Side};
use adsgnn::harness::{evaluate, generate_synthetic, load_triples, train, GenConfig, RunConfig};
use adsgnn::models::{Model, Variant};
use adsgnn::nn::checkpoint::Checkpoint;
use adsgnn::nn::layers::EncoderConfig;
use adsgnn::nn::params::AdamConfig;
use adsgnn::pretrain::{pretrain_run, MaskingRecipe, PretrainConfig};

#[derive(Parser)]
#[command(name = "adsgnn", about = "Graph-augmented query-ad relevance models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic click graph, labeled splits and vocabulary.
    GenData(GenArgs),
    /// Pre-train encoders on the click graph.
    Pretrain(PretrainArgs),
    /// Train a relevance model.
    Train(TrainArgs),
    /// Distill a node-level teacher into a text-only student.
    Distill(DistillArgs),
    /// Score labeled pairs with a trained model.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct Shared {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    neighbors: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.00001)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    /// Tokens per entity sequence.
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    /// Tokens per query-ad pair sequence.
    #[arg(long, default_value_t = 32)]
    max_pair_len: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    ads: Option<usize>,
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    ambiguity: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    pairs_per_query: Option<usize>,
    /// Share of queries in the training split.
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// ne-mlm, np, both or none.
    #[arg(long, default_value = "both")]
    tasks: String,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// n, e, t or twin.
    #[arg(long, default_value = "n")]
    model: String,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pre-training or model checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    share_center_neighbor: bool,
    #[arg(long)]
    graph_residual: bool,
    #[arg(long)]
    no_first_order: bool,
    #[arg(long)]
    no_second_order: bool,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Triples whose queries are kept out of the student's training set.
    #[arg(long)]
    exclude: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "n")]
    model: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// padding, ann or kd; requires a node-level checkpoint.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    student: Option<PathBuf>,
    /// Keep only pairs whose query has at most one click edge.
    #[arg(long)]
    long_tail: bool,
}

fn load_graph(path: &Path) -> Result<BehaviorGraph> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BehaviorGraph::load_edges(BufReader::new(f))?)
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Vocab::from_reader(BufReader::new(f))?)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn encoder(shared: &Shared, vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        dim: shared.dim,
        heads: shared.heads,
        layers: shared.layers,
        ffn_mult: 4,
        vocab_size: vocab.len(),
        max_positions: shared.max_len.max(shared.max_pair_len),
    }
}

fn adam(shared: &Shared) -> AdamConfig {
    AdamConfig { lr: shared.lr, ..AdamConfig::default() }
}

fn gen_data(a: GenArgs) -> Result<()> {
    let mut cfg = GenConfig::default();
    cfg.queries = a.queries.unwrap_or(cfg.queries);
    cfg.ads = a.ads.unwrap_or(cfg.ads);
    cfg.topics = a.topics.unwrap_or(cfg.topics);
    cfg.ambiguity = a.ambiguity.unwrap_or(cfg.ambiguity);
    cfg.noise = a.noise.unwrap_or(cfg.noise);
    cfg.pairs_per_query = a.pairs_per_query.unwrap_or(cfg.pairs_per_query);
    cfg.train_frac = a.train_frac.unwrap_or(cfg.train_frac);
    cfg.val_frac = a.val_frac.unwrap_or(cfg.val_frac);
    let data = generate_synthetic(&cfg, a.seed)?;
    data.write(&a.out)?;
    println!("queries={}", data.graph.queries().len());
    println!("ads={}", data.graph.ads().len());
    println!("edges={}", data.graph.edges().len());
    println!("train_pairs={}", data.train.len());
    println!("val_pairs={}", data.val.len());
    println!("test_pairs={}", data.test.len());
    println!("vocab_size={}", data.vocab.len());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let graph = load_graph(&a.edges)?;
    let vocab = load_vocab(&a.vocab)?;
    let s = &a.shared;
    let cfg = PretrainConfig {
        tasks: a.tasks.parse()?,
        encoder: encoder(s, &vocab),
        k: s.neighbors,
        max_len_single: s.max_len,
        max_len_pair: s.max_pair_len,
        epochs: s.epochs,
        batch_size: s.batch_size,
        adam: adam(s),
        seed: s.seed,
        masking: MaskingRecipe::default(),
    };
    let (ck, report) = pretrain_run(&graph, &vocab, &cfg)?;
    ck.save(&a.out)?;
    for (i, l) in report.loss_curve.iter().enumerate() {
        println!("epoch{}_loss={l:.6}", i + 1);
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let graph = load_graph(&a.edges)?;
    let vocab = load_vocab(&a.vocab)?;
    let train_set = load_triples(&a.train)?;
    let val = match &a.val {
        Some(p) => load_triples(p)?,
        None => Vec::new(),
    };
    let s = &a.shared;
    let variant: Variant = a.model.parse()?;
    let mut cfg = RunConfig::new(variant, vocab.len());
    cfg.model.encoder = encoder(s, &vocab);
    cfg.model.k = s.neighbors;
    cfg.model.max_len_single = s.max_len;
    cfg.model.max_len_pair = s.max_pair_len;
    cfg.model.share_center_neighbor = a.share_center_neighbor;
    cfg.model.graph_residual = a.graph_residual;
    cfg.model.use_first = !a.no_first_order;
    cfg.model.use_second = !a.no_second_order;
    cfg.batch_size = s.batch_size;
    cfg.lr = s.lr;
    cfg.epochs = s.epochs;
    cfg.seed = s.seed;
    let init = a.init.as_deref().map(load_ckpt).transpose()?;
    let (ck, metrics) = train(&cfg, &vocab, &graph, &train_set, &val, init.as_ref())?;
    ck.save(&a.out)?;
    print!("{}", metrics.to_text());
    eprintln!("wall_secs={:.1}", metrics.wall_secs);
    Ok(())
}

fn run_distill(a: DistillArgs) -> Result<()> {
    let graph = load_graph(&a.edges)?;
    let vocab = load_vocab(&a.vocab)?;
    let teacher = Model::from_checkpoint_as(&load_ckpt(&a.teacher)?, Variant::Node)?;
    let excluded: std::collections::BTreeSet<String> = match &a.exclude {
        Some(p) => load_triples(p)?.into_iter().map(|t| t.query).collect(),
        None => Default::default(),
    };
    let queries: Vec<&str> = graph.queries().iter().filter(|q| !excluded.contains(*q)).map(String::as_str).collect();
    let s = &a.shared;
    let cfg = DistillConfig { epochs: s.epochs, batch_size: s.batch_size, adam: adam(s), seed: s.seed, ..DistillConfig::default() };
    let (student, report) = distill_run(&teacher, &graph, &vocab, &queries, &cfg)?;
    student.to_checkpoint().save(&a.out)?;
    println!("initial_kd_loss={:.6}", report.initial_loss);
    for (i, l) in report.loss_curve.iter().enumerate() {
        println!("epoch{}_kd_loss={l:.6}", i + 1);
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let graph = load_graph(&a.edges)?;
    let vocab = load_vocab(&a.vocab)?;
    let ck = load_ckpt(&a.ckpt)?;
    let variant: Variant = a.model.parse()?;
    let mut triples: Vec<LabeledTriple> = load_triples(&a.data)?;
    if a.long_tail {
        triples.retain(|t| graph.degree(&t.query, Side::Query) <= 1);
    }
    let metrics = match &a.strategy {
        None => evaluate(&ck, variant, &vocab, &graph, &triples, None)?,
        Some(name) => {
            let strategy: Strategy = name.parse()?;
            let teacher = Model::from_checkpoint_as(&ck, Variant::Node)?;
            let student = match (&a.student, strategy) {
                (Some(p), _) => Some(Student::from_checkpoint(&load_ckpt(p)?)?),
                (None, Strategy::Kd) => bail!("--strategy kd needs --student"),
                (None, _) => None,
            };
            let pool = if strategy == Strategy::Ann {
                let ads: Vec<&str> = graph.ads().iter().map(String::as_str).collect();
                Some(AnnPool::build(&teacher, &vocab, &ads)?)
            } else {
                None
            };
            let ctx = CompletionContext { teacher: &teacher, vocab: &vocab, student: student.as_ref(), pool: pool.as_ref() };
            evaluate(&ck, Variant::Node, &vocab, &graph, &triples, Some((strategy, &ctx)))?
        }
    };
    println!("pairs={}", triples.len());
    print!("{}", metrics.to_text());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => run_train(a),
        Command::Distill(a) => run_distill(a),
        Command::Eval(a) => run_eval(a),
    }
}
