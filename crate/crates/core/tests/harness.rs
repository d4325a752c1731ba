mod common;

use std::collections::BTreeSet;

use adsgnn::graph::Side;
use adsgnn::harness::*;
use adsgnn::models::Variant;
use adsgnn::Error;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (prop::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -5.0f64..5.0], n), prop::collection::vec(0u8..2, n))
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored_labels()) {
        let got = roc_auc(&scores, &labels).unwrap();
        prop_assert!((got - brute_force_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in scored_labels()) {
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        prop_assert!((roc_auc(&scores, &labels).unwrap() - roc_auc(&warped, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn negated_scores_flip_auc((scores, labels) in scored_labels()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn auc_known_values_and_errors() {
    assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.5, 0.5, 0.5], &[0, 1, 1]).unwrap(), 0.5);
    assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
    assert!(roc_auc(&[0.1], &[0, 1]).is_err());
}

fn small(ambiguity: f64, noise: f64) -> GenConfig {
    GenConfig { topics: 3, queries: 70, ads: 30, ambiguity, noise, ..GenConfig::default() }
}

#[test]
fn generator_is_seeded() {
    let a = generate_synthetic(&small(0.5, 0.05), 4).unwrap();
    assert_eq!(a, generate_synthetic(&small(0.5, 0.05), 4).unwrap());
    assert_ne!(a, generate_synthetic(&small(0.5, 0.05), 5).unwrap());
}

#[test]
fn splits_are_disjoint_by_query() {
    for seed in 0..5 {
        let d = generate_synthetic(&GenConfig::default(), seed).unwrap();
        let qs = |v: &[adsgnn::corpus::LabeledTriple]| v.iter().map(|t| t.query.clone()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (qs(&d.train), qs(&d.val), qs(&d.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        let n = d.query_topic.len() as f64;
        assert!((tr.len() as f64 / n - 0.70).abs() < 0.01);
        assert!((va.len() as f64 / n - 0.08).abs() < 0.01);
        let pairs: BTreeSet<_> = d.train.iter().chain(&d.val).chain(&d.test).map(|t| (&t.query, &t.ad)).collect();
        assert_eq!(pairs.len(), d.train.len() + d.val.len() + d.test.len());
    }
}

#[test]
fn labels_follow_topics_and_clicks_follow_noise() {
    let d = generate_synthetic(&GenConfig::default(), 1).unwrap();
    for t in d.train.iter().chain(&d.val).chain(&d.test) {
        assert_eq!(t.label == 1, d.query_topic[&t.query] == d.ad_topic[&t.ad]);
    }
    let off = d.graph.edges().keys().filter(|(q, a)| d.query_topic[q] != d.ad_topic[a]).count();
    let rate = off as f64 / d.graph.edges().len() as f64;
    assert!((rate - 0.05).abs() < 0.02, "{rate}");
    let amb = d.ambiguous.len() as f64 / d.query_topic.len() as f64;
    assert!((amb - 0.5).abs() < 0.05);
    for q in &d.ambiguous {
        assert!(q.split(' ').all(|w| w.starts_with('z')));
    }
    let pos = d.train.iter().filter(|t| t.label == 1).count() as f64 / d.train.len() as f64;
    assert!((pos - 1.0 / 3.2).abs() < 0.03, "{pos}");
    for q in d.query_topic.keys() {
        let deg = d.graph.degree(q, Side::Query);
        assert!((1..=5).contains(&deg));
    }
}

#[test]
fn invalid_generator_configs_are_rejected() {
    for cfg in [
        GenConfig { topics: 1, ..GenConfig::default() },
        GenConfig { noise: 1.5, ..GenConfig::default() },
        GenConfig { train_frac: 0.9, val_frac: 0.2, ..GenConfig::default() },
        GenConfig { ads: 2, ..GenConfig::default() },
        GenConfig { query_words_per_topic: 2, ambiguity: 0.0, ..GenConfig::default() },
    ] {
        assert!(generate_synthetic(&cfg, 0).is_err(), "{cfg:?}");
    }
}

/// Topic evidence in the words: topic words pin the topic, shared words say nothing.
fn text_likelihood(text: &str, t: usize) -> f64 {
    let prefix = format!("q{t}_");
    match text.split(' ').next() {
        Some(w) if w.starts_with('z') => 1.0,
        Some(w) => (w.starts_with(&prefix)) as u8 as f64,
        None => 0.0,
    }
}

fn ad_topic_of(text: &str) -> usize {
    text[1..text.find('_').unwrap()].parse().unwrap()
}

/// Exact posterior `P(topic(q) = topic(a))` by enumerating the query topic,
/// optionally conditioning on the query's clicked ads.
fn bayes_score(d: &SyntheticData, cfg: &GenConfig, q: &str, a: &str, use_graph: bool) -> f64 {
    let tt = cfg.topics;
    let mut post: Vec<f64> = (0..tt).map(|t| text_likelihood(q, t) / tt as f64).collect();
    if use_graph {
        for (ad, _) in d.graph.adjacency(q, Side::Query) {
            let at = ad_topic_of(ad);
            for (t, p) in post.iter_mut().enumerate() {
                *p *= if at == t { 1.0 - cfg.noise } else { cfg.noise / (tt - 1) as f64 };
            }
        }
    }
    let z: f64 = post.iter().sum();
    post[ad_topic_of(a)] / z
}

#[test]
fn graph_evidence_resolves_ambiguous_queries() {
    let cfg = GenConfig { pairs_per_query: 8, ..small(0.5, 0.05) };
    let mut text_gain = Vec::new();
    let mut graph_gain = Vec::new();
    for seed in 0..5 {
        let d = generate_synthetic(&cfg, seed).unwrap();
        assert_eq!(d.query_topic.len() + d.ad_topic.len(), 100);
        let pairs: Vec<_> = d.train.iter().chain(&d.val).chain(&d.test).filter(|t| d.ambiguous.contains(&t.query)).collect();
        let labels: Vec<u8> = pairs.iter().map(|t| t.label).collect();
        let text: Vec<f64> = pairs.iter().map(|t| bayes_score(&d, &cfg, &t.query, &t.ad, false)).collect();
        let graph: Vec<f64> = pairs.iter().map(|t| bayes_score(&d, &cfg, &t.query, &t.ad, true)).collect();
        text_gain.push(roc_auc(&text, &labels).unwrap());
        graph_gain.push(roc_auc(&graph, &labels).unwrap());

        let clear: Vec<_> = d.train.iter().filter(|t| !d.ambiguous.contains(&t.query)).collect();
        let cl: Vec<u8> = clear.iter().map(|t| t.label).collect();
        let cs: Vec<f64> = clear.iter().map(|t| bayes_score(&d, &cfg, &t.query, &t.ad, false)).collect();
        assert_eq!(roc_auc(&cs, &cl).unwrap(), 1.0);
    }
    assert!(text_gain.iter().all(|&a| a == 0.5), "{text_gain:?}");
    assert!(graph_gain.iter().all(|&a| a >= 1.0 - cfg.noise), "{graph_gain:?}");
}

#[test]
fn training_fits_a_small_set() {
    let fx = fixture();
    let mut cfg = RunConfig::new(Variant::Node, fx.vocab.len());
    cfg.model = tiny_config(Variant::Node, &fx.vocab, 8, 1, 2, 6);
    cfg.lr = 1e-2;
    cfg.batch_size = 4;
    cfg.epochs = 200;
    cfg.target_loss = Some(0.05);
    let (ck, m) = train(&cfg, &fx.vocab, &fx.graph, &fx.pairs, &[], None).unwrap();
    assert!(*m.loss_curve.last().unwrap() < 0.05);
    assert!(m.loss_curve.len() < 200);
    assert!(m.roc_auc.is_none() && m.val_auc.is_empty());
    let ev = evaluate(&ck, Variant::Node, &fx.vocab, &fx.graph, &fx.pairs, None).unwrap();
    assert!(ev.roc_auc.unwrap() > 0.99);
    assert!(evaluate(&ck, Variant::Edge, &fx.vocab, &fx.graph, &fx.pairs, None).is_err());

    // Continuing from a checkpoint with a different architecture is refused.
    let mut other = cfg;
    other.model.k = 3;
    assert!(train(&other, &fx.vocab, &fx.graph, &fx.pairs, &[], Some(&ck)).is_err());
    assert!(train(&cfg, &fx.vocab, &fx.graph, &[], &[], None).is_err());
}

#[test]
fn validation_keeps_the_best_epoch() {
    let fx = fixture();
    let mut cfg = RunConfig::new(Variant::Twin, fx.vocab.len());
    cfg.model = tiny_config(Variant::Twin, &fx.vocab, 8, 1, 0, 6);
    cfg.lr = 5e-3;
    cfg.batch_size = 3;
    cfg.epochs = 6;
    let (ck, m) = train(&cfg, &fx.vocab, &fx.graph, &fx.pairs, &fx.pairs, None).unwrap();
    assert_eq!(m.val_auc.len(), 6);
    let best = m.val_auc.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(m.roc_auc, Some(best));
    let ev = evaluate(&ck, Variant::Twin, &fx.vocab, &fx.graph, &fx.pairs, None).unwrap();
    assert!((ev.roc_auc.unwrap() - best).abs() < 1e-3);
    let text = m.to_text();
    assert!(text.starts_with(&format!("roc_auc={best:.6}\n")));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn written_data_loads_back() {
    let d = generate_synthetic(&small(0.5, 0.05), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.write(dir.path()).unwrap();
    assert_eq!(load_triples(&dir.path().join("test.tsv")).unwrap(), d.test);
    let edges = std::fs::File::open(dir.path().join("edges.tsv")).unwrap();
    let g = adsgnn::graph::BehaviorGraph::load_edges(std::io::BufReader::new(edges)).unwrap();
    assert_eq!(g.edges(), d.graph.edges());
    let topics = std::fs::read_to_string(dir.path().join("topics.tsv")).unwrap();
    assert_eq!(topics.lines().count(), 100);
}

#[test]
fn predictions_do_not_depend_on_batching() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = adsgnn::models::Model::init(tiny_config(Variant::Edge, &fx.vocab, 8, 1, 2, 6), &mut rng).unwrap();
    let ex = examples(&model, &fx);
    let whole = predict_all(&model, &fx.vocab, &ex, 100).unwrap();
    let b = rng.gen_range(1..4);
    let split = predict_all(&model, &fx.vocab, &ex, b).unwrap();
    for (x, y) in whole.iter().zip(&split) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn auc_agrees_with_pair_counting_on_tied_scores() {
    assert!(common::measure::auc_gap(9, 1000) < 1e-12);
}
