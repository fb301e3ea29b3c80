mod common;

use std::collections::BTreeSet;

use ndarray::Array2;
use neurorag_core::demo;
use neurorag_core::encoder::Encoder;
use neurorag_core::kgpath::{graph_rank_loss, linked_nodes, sample_negatives, LabeledQuery, TemplateEnricher};
use neurorag_core::synthetic::training_fixture;
use neurorag_core::train::{objective, prepare_training_set, train, TrainParams};
use neurorag_core::types::RetrievalConfig;
use neurorag_core::Error;






#[test]
fn analytic_gradient_matches_central_differences() {
    let h = 1e-6;
    for seed in 0..25u64 {
        let (model, set) = common::random_instance(seed);
        let obj = objective(&model, &set, 0.7, 0.4).unwrap();
        assert!((obj.loss - common::hand_loss(&model, &set, 0.7, 0.4)).abs() < 1e-10, "seed {seed}");
        let numeric = |which: usize| {
            let base = if which == 0 { &model.w_q } else { &model.w_d };
            Array2::from_shape_fn(base.dim(), |(i, j)| {
                let at = |delta: f64| {
                    let mut m = model.clone();
                    let w = if which == 0 { &mut m.w_q } else { &mut m.w_d };
                    w[(i, j)] += delta;
                    objective(&m, &set, 0.7, 0.4).unwrap().loss
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
        };
        assert!(common::rel_err(&obj.grad_q, &numeric(0)) < 1e-4, "seed {seed} W_q");
        assert!(common::rel_err(&obj.grad_d, &numeric(1)) < 1e-4, "seed {seed} W_d");
    }
}

fn fixture_params() -> TrainParams {
    TrainParams {
        learning_rate: 0.05,
        epochs: 200,
        alpha_blend: 0.7,
        beta_loss: 0.4,
    }
}

#[test]
fn fixture_training_separates_triples() {
    let (model, set) = training_fixture(7).unwrap();
    let out = train(&model, &set, &fixture_params()).unwrap();
    assert!((out.loss_curve[0] - 49.271_186_581_075_65).abs() < 1e-9);
    assert!((out.final_loss - 17.959_165_804_920_623).abs() < 1e-9);
    assert_eq!(out.initial_accuracy, 0.5);
    assert!(out.triple_accuracy >= 0.95);
    assert!(out.loss_curve[..50].windows(2).all(|w| w[1] <= w[0]));
    assert!(out.final_loss < out.loss_curve[0]);
}

#[test]
fn training_is_seeded() {
    let run = |seed| {
        let (model, set) = training_fixture(seed).unwrap();
        train(&model, &set, &fixture_params()).unwrap()
    };
    let (a, b) = (run(11), run(11));
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.model.unwrap().checksum(), b.model.unwrap().checksum());
    assert_ne!(run(12).loss_curve, a.loss_curve);
}

#[test]
fn loss_anchors() {
    let zero = graph_rank_loss(&[(0.3, 0.3)]).unwrap();
    assert!((zero - std::f64::consts::LN_2).abs() < 1e-12);
    let wide = graph_rank_loss(&[(20.0, 0.0)]).unwrap();
    assert!((wide - 2.061_153_620_314_381e-9).abs() < 1e-15);
    assert!(graph_rank_loss(&[(0.0, 1000.0)]).unwrap().is_finite());
}

fn labeled(query: &str, positive: &str) -> LabeledQuery {
    LabeledQuery {
        query: query.into(),
        positive_id: positive.into(),
        negative_id: None,
    }
}

#[test]
fn sampled_negatives_are_far_from_query_seeds() {
    let d = demo::load().unwrap();
    let cfg = RetrievalConfig::default();
    let queries = [
        labeled("trouble sleeping after childhood trauma", demo::TRAUMA_DOCUMENT),
        labeled("childhood abuse", "childhood_abuse_disclosure#0"),
        labeled("sleep problems and low mood", "sleep_and_mood#0"),
        labeled("constant worry and panic", "panic_and_worry_cycle#0"),
    ];
    for seed in 0..10 {
        let s = sample_negatives(&queries, &d.corpus, d.vocabulary(), &d.kg, &d.encoder, &cfg, seed).unwrap();
        assert_eq!(s.triples.len(), queries.len());
        for (q, t) in queries.iter().zip(&s.triples) {
            let e = d.encoder.encode(&q.query).unwrap();
            let seeds: BTreeSet<String> = d
                .kg
                .nodes()
                .iter()
                .filter(|n| common::cos(e.as_slice(), n.embedding.as_slice()) > cfg.tau)
                .map(|n| n.id.clone())
                .collect();
            assert!(!seeds.is_empty());
            let dist = common::hop_distances(&d.kg, &seeds);
            let neg = d.corpus.get(&t.negative_id).unwrap();
            let links = linked_nodes(&neg.phi_d, d.vocabulary(), &d.kg);
            assert!(!links.is_empty());
            assert!(links.iter().all(|n| dist.get(n).is_none_or(|&h| h >= 3)), "{}", t.negative_id);
            assert_ne!(t.negative_id, t.positive_id);
        }
        assert!(s.fallback.is_empty());
    }
}

#[test]
fn seedless_query_falls_back_and_is_flagged() {
    let d = demo::load().unwrap();
    let cfg = RetrievalConfig::default();
    let queries = [
        labeled("trouble sleeping after childhood trauma", demo::TRAUMA_DOCUMENT),
        labeled("parking permit renewal", "clinic_intake_logistics#0"),
    ];
    let s = sample_negatives(&queries, &d.corpus, d.vocabulary(), &d.kg, &d.encoder, &cfg, 1).unwrap();
    assert_eq!(s.fallback, vec![1]);
    assert_ne!(s.triples[1].negative_id, "clinic_intake_logistics#0");
}

#[test]
fn sampling_rejects_tiny_corpora_and_unknown_ids() {
    let d = demo::load().unwrap();
    let cfg = RetrievalConfig::default();
    let one = neurorag_core::corpus::Corpus::from_documents(
        vec![d.corpus.get(demo::TRAUMA_DOCUMENT).unwrap().clone()],
        d.vocabulary(),
        d.encoder.spec(),
        &d.model,
    )
    .unwrap();
    let q = [labeled("x", demo::TRAUMA_DOCUMENT)];
    assert!(matches!(
        sample_negatives(&q, &one, d.vocabulary(), &d.kg, &d.encoder, &cfg, 0),
        Err(Error::Dataset(_))
    ));
    let q = [labeled("x", "missing#0")];
    assert!(matches!(
        sample_negatives(&q, &d.corpus, d.vocabulary(), &d.kg, &d.encoder, &cfg, 0),
        Err(Error::Dataset(_))
    ));
}

#[test]
fn demo_training_improves_triples() {
    let d = demo::load().unwrap();
    let cfg = RetrievalConfig::default();
    let queries = [
        labeled("trouble sleeping after childhood trauma", demo::TRAUMA_DOCUMENT),
        labeled("sleep problems and low mood", "sleep_and_mood#0"),
        labeled("constant worry and panic", "anxiety_psychoeducation#0"),
    ];
    let sampled = sample_negatives(&queries, &d.corpus, d.vocabulary(), &d.kg, &d.encoder, &cfg, 3).unwrap();
    let enricher = TemplateEnricher { label_budget: 8 };
    let set = prepare_training_set(&sampled.triples, &d.corpus, &d.lexicon, &d.kg, &d.encoder, &d.model, &cfg, &enricher)
        .unwrap();
    let out = train(&d.model, &set, &fixture_params()).unwrap();
    assert!(out.final_loss <= out.loss_curve[0]);
    assert!(out.triple_accuracy >= out.initial_accuracy);
}
