//! Measurements shared by the property tests and the acceptance runner.

use super::*;
use adsgnn::corpus::encode_single;
use adsgnn::graph::NeighborSample;
use adsgnn::models::token::tower_states;
use adsgnn::models::{Model, PairExample, Variant};
use adsgnn::nn::params::Session;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn permuted(nb: &NeighborSample, rng: &mut ChaCha8Rng) -> NeighborSample {
    let mut slots: Vec<(String, u8)> = nb.neighbors.iter().cloned().zip(nb.mask.iter().copied()).collect();
    slots.shuffle(rng);
    NeighborSample { neighbors: slots.iter().map(|s| s.0.clone()).collect(), mask: slots.iter().map(|s| s.1).collect() }
}

/// Largest probability change over random reorderings of every example's
/// neighbor slots.
pub fn permutation_gap(variant: Variant, seed: u64) -> f64 {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(tiny_config(variant, &fx.vocab, 8, 2, 3, 6), &mut rng).unwrap();
    let ex = examples(&model, &fx);
    let base = model.predict(&fx.vocab, &ex).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let shuffled: Vec<PairExample> = ex
            .iter()
            .map(|e| PairExample {
                q_neighbors: permuted(&e.q_neighbors, &mut rng),
                a_neighbors: permuted(&e.a_neighbors, &mut rng),
                ..e.clone()
            })
            .collect();
        let p = model.predict(&fx.vocab, &shuffled).unwrap();
        worst = base.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    worst
}

/// Attention entries per head of one token-model tower layer over a center
/// with `n` real neighbors of `m` tokens each, split into graph and text
/// attention, plus the largest attended segment.
pub fn token_attention_cost(n: usize, m: usize) -> (Vec<usize>, Vec<usize>, usize) {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = tiny_config(Variant::Token, &fx.vocab, 8, 2, n, m);
    let model = Model::init(cfg, &mut rng).unwrap();
    let neighbors = NeighborSample::from_texts(fx.graph.ads().iter().take(n).cloned(), n);
    let center = encode_single("cheap flights", &fx.vocab, m);
    let mut s = Session::new(&model.params, false);
    tower_states(&mut s, "t/q", &cfg.encoder, &fx.vocab, &[center], &[&neighbors], m, false).unwrap();
    let log = s.tape.attention_log();
    let graph: Vec<usize> = log.iter().filter(|r| r.heads == 1).map(|r| r.entries_per_head()).collect();
    let text: Vec<usize> = log.iter().filter(|r| r.heads > 1).map(|r| r.entries_per_head()).collect();
    let widest = log.iter().map(|r| r.seg_len).max().unwrap();
    (graph, text, widest)
}

/// Corruption statistics gathered over many sampled sequences.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskingStats {
    pub eligible: usize,
    pub selected: usize,
    pub masked: usize,
    pub random: usize,
    pub kept: usize,
    /// Special or padded positions whose input id changed.
    pub special_touched: usize,
}

impl MaskingStats {
    pub fn rate(&self) -> f64 {
        self.selected as f64 / self.eligible as f64
    }

    /// Fractions of selected tokens that became `[MASK]`, a random token, or stayed.
    pub fn split(&self) -> (f64, f64, f64) {
        let n = self.selected as f64;
        (self.masked as f64 / n, self.random as f64 / n, self.kept as f64 / n)
    }
}

/// Corrupts single and paired encodings of random word strings until at
/// least `min_tokens` eligible tokens have been seen.
pub fn masking_stats(seed: u64, min_tokens: usize) -> MaskingStats {
    use adsgnn::corpus::{build_vocab, encode_pair, Vocab};
    use adsgnn::pretrain::{mask_tokens_with, Corruption, MaskingRecipe};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
    let vocab = build_vocab(words.iter(), 1000).unwrap();
    let recipe = MaskingRecipe::default();
    let mut st = MaskingStats::default();
    let text = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..12);
        (0..n).map(|_| words[rng.gen_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ")
    };
    while st.eligible < min_tokens {
        let seq = if rng.gen_bool(0.5) {
            encode_single(&text(&mut rng), &vocab, 16)
        } else {
            let (a, b) = (text(&mut rng), text(&mut rng));
            encode_pair(&a, &b, &vocab, 24)
        };
        let ex = mask_tokens_with(&seq, &recipe, &mut rng, vocab.len());
        for (i, &id) in seq.ids.iter().enumerate() {
            let eligible = !Vocab::is_special(id) && seq.attention_mask[i] == 1;
            st.eligible += eligible as usize;
            if !eligible && ex.input_ids[i] != id {
                st.special_touched += 1;
            }
        }
        for (&p, &kind) in ex.corrupted_positions.iter().zip(&ex.corruption) {
            if Vocab::is_special(seq.ids[p]) {
                st.special_touched += 1;
            }
            st.selected += 1;
            match kind {
                Corruption::Mask => st.masked += 1,
                Corruption::Random => st.random += 1,
                Corruption::Keep => st.kept += 1,
            }
        }
    }
    st
}

/// Runs the binary and returns its stdout; panics with stderr on failure.
pub fn run_cli(args: &[&str]) -> String {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_adsgnn")).args(args).output().unwrap();
    assert!(out.status.success(), "adsgnn {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Every subcommand on a tiny corpus in `dir`. Returns the stdout transcript
/// and the bytes of every file written.
pub fn cli_pipeline(dir: &std::path::Path, seed: u64) -> (String, Vec<(String, Vec<u8>)>) {
    let p = |f: &str| dir.join(f).to_string_lossy().into_owned();
    let seed = seed.to_string();
    let small = ["--dim", "8", "--layers", "1", "--heads", "2", "--neighbors", "2", "--max-len", "6", "--max-pair-len", "12"];
    let fit = ["--epochs", "2", "--batch-size", "16", "--lr", "0.001", "--seed", &seed];
    let (edges, vocab) = (p("edges.tsv"), p("vocab.txt"));
    let with = |head: &[&str]| -> Vec<String> { head.iter().chain(&small).chain(&fit).map(|s| s.to_string()).collect() };
    let mut log = String::new();
    let mut step = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        log.push_str(&run_cli(&refs));
    };
    let out = p("");
    step(["gen-data", "--out", &out, "--seed", &seed, "--queries", "80", "--ads", "24", "--topics", "3"].map(String::from).to_vec());
    step(with(&["pretrain", "--edges", &edges, "--vocab", &vocab, "--out", &p("pre.ckpt")]));
    for m in ["twin", "n", "e", "t"] {
        step(with(&[
            "train",
            "--model",
            m,
            "--train",
            &p("train.tsv"),
            "--val",
            &p("val.tsv"),
            "--edges",
            &edges,
            "--vocab",
            &vocab,
            "--out",
            &p(&format!("{m}.ckpt")),
            "--init",
            &p("pre.ckpt"),
        ]));
        step(vec![
            "eval".into(),
            "--ckpt".into(),
            p(&format!("{m}.ckpt")),
            "--model".into(),
            m.into(),
            "--data".into(),
            p("test.tsv"),
            "--edges".into(),
            edges.clone(),
            "--vocab".into(),
            vocab.clone(),
        ]);
    }
    step(with(&[
        "distill",
        "--teacher",
        &p("n.ckpt"),
        "--edges",
        &edges,
        "--vocab",
        &vocab,
        "--out",
        &p("student.ckpt"),
        "--exclude",
        &p("test.tsv"),
    ]));
    for strategy in ["padding", "ann", "kd"] {
        step(vec![
            "eval".into(),
            "--ckpt".into(),
            p("n.ckpt"),
            "--data".into(),
            p("test.tsv"),
            "--edges".into(),
            edges.clone(),
            "--vocab".into(),
            vocab.clone(),
            "--strategy".into(),
            strategy.into(),
            "--student".into(),
            p("student.ckpt"),
            "--long-tail".into(),
        ]);
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    (log, files)
}

pub fn random_mask(rng: &mut impl rand::Rng, n: usize, keep_first: bool) -> Vec<bool> {
    (0..n).map(|i| (keep_first && i == 0) || rng.gen_bool(0.7)).collect()
}

/// Largest deviation from the reference over `cases` random inputs.
pub fn attend_and_aggregate_gap(seed: u64, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = adsgnn::nn::params::ParamStore::new();
    for _ in 0..cases {
        let (b, n, d) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..7));
        let a = randn(&mut rng, 2 * d, 1.0);
        let centers = rand_rows(&mut rng, b, d, 1.0);
        let neighbors = rand_rows(&mut rng, b * n, d, 1.0);
        let mask = random_mask(&mut rng, b * n, false);
        let mut s = Session::new(&store, false);
        let av = s.tape.constant(adsgnn::nn::tensor::Tensor::vector(a.clone()));
        let cv = s.tape.constant(tensor(&centers));
        let nv = s.tape.constant(tensor(&neighbors));
        let out = adsgnn::models::node::attend_and_aggregate(&mut s, av, cv, nv, &mask).unwrap();
        let got = to_rows(s.tape.value(out.output));
        let want: Vec<Vec<f64>> = (0..b)
            .map(|g| super::attend_and_aggregate(&a, &centers[g], &neighbors[g * n..(g + 1) * n], &mask[g * n..(g + 1) * n]))
            .collect();
        worst = worst.max(max_abs_diff(&got, &want));
    }
    worst
}

/// Largest deviation from the reference over `cases` random inputs.
pub fn order_attention_gap(seed: u64, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = adsgnn::nn::params::ParamStore::new();
    for _ in 0..cases {
        let (g, n, d) = (rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..7));
        let w = randn(&mut rng, d, 1.0);
        let b = randn(&mut rng, 1, 1.0)[0];
        let edges = rand_rows(&mut rng, g * n, d, 1.0);
        let mask = random_mask(&mut rng, g * n, false);
        let mut s = Session::new(&store, false);
        let wv = s.tape.constant(adsgnn::nn::tensor::Tensor::vector(w.clone()));
        let bv = s.tape.constant(adsgnn::nn::tensor::Tensor::vector(vec![b]));
        let ev = s.tape.constant(tensor(&edges));
        let out = adsgnn::models::edge::order_attention(&mut s, wv, bv, ev, g, &mask).unwrap();
        let got = to_rows(s.tape.value(out.output));
        let want: Vec<Vec<f64>> =
            (0..g).map(|i| super::order_attention(&w, b, &edges[i * n..(i + 1) * n], &mask[i * n..(i + 1) * n])).collect();
        worst = worst.max(max_abs_diff(&got, &want));
    }
    worst
}

/// Largest deviation from the reference over `cases` random inputs.
pub fn edge_type_aggregate_gap(seed: u64, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = adsgnn::nn::params::ParamStore::new();
    for _ in 0..cases {
        let (b, d) = (rng.gen_range(1..4), rng.gen_range(1..7));
        let a = randn(&mut rng, 2 * d, 1.0);
        let parts: Vec<Vec<Vec<f64>>> = (0..3).map(|_| rand_rows(&mut rng, b, d, 1.0)).collect();
        let mut s = Session::new(&store, false);
        let av = s.tape.constant(adsgnn::nn::tensor::Tensor::vector(a.clone()));
        let vs: Vec<_> = parts.iter().map(|p| s.tape.constant(tensor(p))).collect();
        let out = adsgnn::models::edge::edge_type_aggregate(&mut s, av, vs[0], vs[1], vs[2]).unwrap();
        let got = to_rows(s.tape.value(out.output));
        let want: Vec<Vec<f64>> = (0..b).map(|r| super::edge_type_aggregate(&a, &parts[0][r], &parts[1][r], &parts[2][r])).collect();
        worst = worst.max(max_abs_diff(&got, &want));
    }
    worst
}

/// Largest deviation from the reference over `cases` random inputs.
pub fn graph_transformer_gap(seed: u64, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = adsgnn::nn::params::ParamStore::new();
    for case in 0..cases {
        let (g, n, d) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..7));
        let residual = case % 2 == 1;
        let ws: Vec<Vec<Vec<f64>>> = (0..3).map(|_| rand_rows(&mut rng, d, d, 0.7)).collect();
        let h = rand_rows(&mut rng, g * n, d, 1.0);
        let mask: Vec<bool> = (0..g * n).map(|i| i % n == 0 || rng.gen_bool(0.6)).collect();
        let mut s = Session::new(&store, false);
        let wv: Vec<_> = ws.iter().map(|w| s.tape.constant(tensor(w))).collect();
        let hv = s.tape.constant(tensor(&h));
        let out = adsgnn::models::token::graph_transformer(&mut s, wv[0], wv[1], wv[2], hv, g, &mask, residual).unwrap();
        let got = to_rows(s.tape.value(out));
        let want: Vec<Vec<f64>> = (0..g)
            .flat_map(|i| {
                let r = i * n..(i + 1) * n;
                super::graph_transformer(&ws[0], &ws[1], &ws[2], &h[r.clone()], &mask[r], residual)
            })
            .collect();
        worst = worst.max(max_abs_diff(&got, &want));
    }
    worst
}

/// Largest gap between the rank-based metric and pair counting over random
/// scores with heavy ties.
pub fn auc_gap(seed: u64, instances: usize) -> f64 {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.4) as u8).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let got = adsgnn::harness::roc_auc(&scores, &labels).unwrap();
        worst = worst.max((got - brute_force_auc(&scores, &labels)).abs());
        done += 1;
    }
    worst
}
