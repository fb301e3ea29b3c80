//! Seeded generators for fixtures, property tests and benchmarks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{ingest_texts, ChunkConfig, Corpus, SourceText};
use crate::encoder::{Encoder, HashEncoder};
use crate::error::Result;
use crate::features::{Lexicon, LexiconEntry};
use crate::kg::{Edge, KgFile, KnowledgeGraph, Node, NodeRecord};
use crate::train::{PreparedDoc, PreparedTriple, TrainingSet};
use crate::types::{Embedding, Feature, FeatureVocabulary, ModulationModel, SCHEMA_VERSION};

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub const FIXTURE_DIM: usize = 16;
pub const FIXTURE_FEATURES: usize = 8;

/// 24 documents in 8 feature groups and 50 triples whose positive shares the
/// query's feature and whose negative does not. Queries carry no base signal
/// towards their positive, so only the learned modulation separates them.
pub fn training_fixture(seed: u64) -> Result<(ModulationModel, TrainingSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m) = (FIXTURE_DIM, FIXTURE_FEATURES);
    let documents: Vec<PreparedDoc> = (0..24)
        .map(|i| {
            let mut features = vec![0.0; m];
            features[i % m] = 1.0;
            PreparedDoc {
                base: unit_vector(&mut rng, d),
                features,
                pagerank: rng.random_range(0.0..0.1),
            }
        })
        .collect();
    let triples = (0..50)
        .map(|_| {
            let positive = rng.random_range(0..documents.len());
            let negative = loop {
                let n = rng.random_range(0..documents.len());
                if n % m != positive % m {
                    break n;
                }
            };
            let mut features = vec![0.0; m];
            features[positive % m] = 1.0;
            let q = unit_vector(&mut rng, d);
            PreparedTriple {
                q_graph: q.clone(),
                q_retrieval: q,
                features,
                alpha: 0.8,
                positive,
                negative,
            }
        })
        .collect();
    let model = ModulationModel::random_init(d, m, 0.05, seed.wrapping_add(1), 0.5, 1.0)?;
    Ok((model, TrainingSet { documents, triples }))
}

/// Random graph over `n` nodes `n000..`; each ordered pair gets an edge with
/// probability `edge_prob`, a third of them undirected, plus occasional
/// self-loops.
pub fn random_graph(n: usize, edge_prob: f64, dim: usize, seed: u64) -> Result<KnowledgeGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..n)
        .map(|i| {
            Ok(Node {
                id: format!("n{i:03}"),
                label: format!("node {i}"),
                description: None,
                embedding: Embedding::new(unit_vector(&mut rng, dim))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let p = if i == j { edge_prob / 4.0 } else { edge_prob };
            if rng.random_bool(p.clamp(0.0, 1.0)) {
                edges.push(Edge {
                    src: format!("n{i:03}"),
                    dst: format!("n{j:03}"),
                    relation: "related_to".into(),
                    weight: rng.random_range(0.0..=1.0),
                    directed: rng.random_bool(2.0 / 3.0),
                });
            }
        }
    }
    KnowledgeGraph::new(nodes, edges)
}

const FEATURE_WORDS: [&str; 6] = ["amber", "birch", "cedar", "delta", "ember", "fjord"];
const FILLER_WORDS: [&str; 14] = [
    "the", "over", "river", "stone", "light", "quiet", "north", "green", "paper", "window", "vector", "signal",
    "harbor", "meadow",
];

/// A small self-consistent retrieval setup built from random text.
pub struct World {
    pub lexicon: Lexicon,
    pub kg: KnowledgeGraph,
    pub encoder: HashEncoder,
    pub model: ModulationModel,
    pub corpus: Corpus,
}

impl World {
    pub fn vocabulary(&self) -> &FeatureVocabulary {
        self.lexicon.vocabulary()
    }
}

pub fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| {
            if rng.random_bool(0.2) {
                *FEATURE_WORDS.choose(rng).expect("non-empty")
            } else {
                *FILLER_WORDS.choose(rng).expect("non-empty")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n_docs` single-chunk documents over a 6-feature vocabulary linked to an
/// 8-node graph.
pub fn random_world(n_docs: usize, dim: usize, seed: u64) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = HashEncoder::new(dim, seed)?;
    let features: Vec<Feature> = FEATURE_WORDS
        .iter()
        .enumerate()
        .map(|(i, w)| Feature {
            id: format!("f{i}"),
            label: (*w).to_string(),
            risk_weight: rng.random_range(0.0..1.0),
            kg_node: Some(format!("k{i}")),
        })
        .collect();
    let vocab = FeatureVocabulary::new(features)?;
    let entries = FEATURE_WORDS
        .iter()
        .enumerate()
        .map(|(i, w)| LexiconEntry {
            pattern: (*w).to_string(),
            feature_id: format!("f{i}"),
            is_regex: false,
        })
        .collect();
    let lexicon = Lexicon::new(entries, vocab)?;

    let node_words: Vec<String> = FEATURE_WORDS
        .iter()
        .map(|w| w.to_string())
        .chain(["harbor meadow".to_string(), "signal window".to_string()])
        .collect();
    let mut edges = Vec::new();
    for i in 0..node_words.len() {
        for j in 0..node_words.len() {
            if i != j && rng.random_bool(0.25) {
                edges.push(Edge {
                    src: format!("k{i}"),
                    dst: format!("k{j}"),
                    relation: "related_to".into(),
                    weight: rng.random_range(0.0..=1.0),
                    directed: true,
                });
            }
        }
    }
    let file = KgFile {
        schema_version: SCHEMA_VERSION,
        nodes: node_words
            .iter()
            .enumerate()
            .map(|(i, w)| NodeRecord {
                id: format!("k{i}"),
                label: w.clone(),
                description: None,
                embedding: None,
            })
            .collect(),
        edges,
    };
    let kg = KnowledgeGraph::from_file(file, Some(&encoder as &dyn Encoder))?;
    let model = ModulationModel::random_init(dim, FEATURE_WORDS.len(), 0.3, seed ^ 0x5eed, 0.5, 1.0)?;
    let sources: Vec<SourceText> = (0..n_docs)
        .map(|i| {
            let words = rng.random_range(4..16);
            SourceText {
                name: format!("doc{i:04}"),
                file: format!("doc{i:04}.txt"),
                text: random_text(&mut rng, words),
            }
        })
        .collect();
    let corpus = ingest_texts(&sources, &lexicon, &encoder, &model, ChunkConfig::default())?;
    Ok(World {
        lexicon,
        kg,
        encoder,
        model,
        corpus,
    })
}
