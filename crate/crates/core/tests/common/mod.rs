//! Reference implementations written directly from the definitions, used to
//! cross-check the library. They favour obviousness over speed.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use neurorag_core::corpus::Corpus;
use neurorag_core::encoder::Encoder;
use neurorag_core::features::{extract_features, Lexicon, SessionState};
use neurorag_core::kg::KnowledgeGraph;
use neurorag_core::proknow::{Instrument, RankedPassage};
use neurorag_core::synthetic::{random_text, random_world, World};
use neurorag_core::train::{PreparedDoc, PreparedTriple, TrainingSet};
use neurorag_core::types::{Embedding, FeatureSet, FeatureVocabulary, ModulationModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ids(kg: &KnowledgeGraph) -> Vec<String> {
    let mut v: Vec<String> = kg.nodes().iter().map(|n| n.id.clone()).collect();
    v.sort();
    v
}

/// Power iteration on an explicit column-stochastic matrix.
pub fn dense_pagerank(kg: &KnowledgeGraph, gamma: f64) -> BTreeMap<String, f64> {
    let names = ids(kg);
    let n = names.len();
    let pos = |id: &str| names.iter().position(|x| x == id).unwrap();
    let mut out: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for e in kg.edges() {
        let (s, d) = (pos(&e.src), pos(&e.dst));
        out[s].insert(d);
        if !e.directed {
            out[d].insert(s);
        }
    }
    let mut m = vec![vec![0.0; n]; n];
    for j in 0..n {
        if out[j].is_empty() {
            for row in m.iter_mut() {
                row[j] = 1.0 / n as f64;
            }
        } else {
            for &i in &out[j] {
                m[i][j] = 1.0 / out[j].len() as f64;
            }
        }
    }
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let next: Vec<f64> = (0..n)
            .map(|i| (1.0 - gamma) / n as f64 + gamma * (0..n).map(|j| m[i][j] * p[j]).sum::<f64>())
            .collect();
        let delta: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if delta < 1e-15 {
            break;
        }
    }
    names.into_iter().zip(p).collect()
}

fn undirected_neighbours(kg: &KnowledgeGraph) -> BTreeMap<String, BTreeSet<String>> {
    let mut adj: BTreeMap<String, BTreeSet<String>> = ids(kg).into_iter().map(|i| (i, BTreeSet::new())).collect();
    for e in kg.edges() {
        if e.src != e.dst {
            adj.get_mut(&e.src).unwrap().insert(e.dst.clone());
            adj.get_mut(&e.dst).unwrap().insert(e.src.clone());
        }
    }
    adj
}

/// Hop distance from the nearest seed, ignoring edge direction, via
/// repeated relaxation.
pub fn hop_distances(kg: &KnowledgeGraph, seeds: &BTreeSet<String>) -> BTreeMap<String, usize> {
    let adj = undirected_neighbours(kg);
    let mut dist: BTreeMap<String, usize> = seeds.iter().map(|s| (s.clone(), 0)).collect();
    loop {
        let mut changed = false;
        for (a, ns) in &adj {
            for b in ns {
                if let Some(&da) = dist.get(a) {
                    if dist.get(b).is_none_or(|&db| db > da + 1) {
                        dist.insert(b.clone(), da + 1);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return dist;
        }
    }
}

/// Frontier layers up to `hops`.
pub fn bfs_layers(kg: &KnowledgeGraph, seeds: &BTreeSet<String>, hops: usize) -> Vec<BTreeSet<String>> {
    let dist = hop_distances(kg, seeds);
    let max = dist.values().copied().filter(|&d| d <= hops).max().unwrap_or(0);
    (0..=max)
        .map(|h| dist.iter().filter(|(_, &d)| d == h).map(|(k, _)| k.clone()).collect())
        .collect()
}

/// Lexicographically smallest among all shortest seed-to-`target` paths, by
/// exhaustive enumeration of simple paths.
pub fn smallest_shortest_path(kg: &KnowledgeGraph, seeds: &BTreeSet<String>, target: &str) -> Option<Vec<String>> {
    let dist = hop_distances(kg, seeds);
    let want = *dist.get(target)?;
    let adj = undirected_neighbours(kg);
    let mut best: Option<Vec<String>> = None;
    fn walk(
        adj: &BTreeMap<String, BTreeSet<String>>,
        path: &mut Vec<String>,
        target: &str,
        left: usize,
        best: &mut Option<Vec<String>>,
    ) {
        let last = path.last().unwrap().clone();
        if left == 0 {
            if last == target && best.as_ref().is_none_or(|b| &**path < b) {
                *best = Some(path.clone());
            }
            return;
        }
        for n in &adj[&last] {
            if !path.contains(n) {
                path.push(n.clone());
                walk(adj, path, target, left - 1, best);
                path.pop();
            }
        }
    }
    for s in seeds {
        walk(&adj, &mut vec![s.clone()], target, want, &mut best);
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn hot(phi: &FeatureSet, vocab: &FeatureVocabulary) -> Vec<f64> {
    vocab
        .features()
        .iter()
        .map(|f| if phi.contains(&f.id) { 1.0 } else { 0.0 })
        .collect()
}

/// `base + scale * W x`, with `W` indexed `[row][col]`.
pub fn shift(base: &[f64], scale: f64, w: &ndarray::Array2<f64>, x: &[f64]) -> Vec<f64> {
    (0..base.len())
        .map(|i| base[i] + scale * (0..x.len()).map(|j| w[(i, j)] * x[j]).sum::<f64>())
        .collect()
}

/// Count, pairwise KG weights and risk, summed by hand.
pub fn hand_complexity(phi: &FeatureSet, vocab: &FeatureVocabulary, kg: &KnowledgeGraph) -> f64 {
    let feats: Vec<_> = phi.ids().map(|id| vocab.get(id).unwrap()).collect();
    let mut total = feats.len() as f64;
    for i in 0..feats.len() {
        total += feats[i].risk_weight;
        for j in (i + 1)..feats.len() {
            if let (Some(a), Some(b)) = (&feats[i].kg_node, &feats[j].kg_node) {
                total += kg
                    .edges()
                    .iter()
                    .filter(|e| (&e.src == a && &e.dst == b) || (&e.src == b && &e.dst == a))
                    .map(|e| e.weight)
                    .fold(0.0, f64::max);
            }
        }
    }
    total
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every document scored, sorted by (score desc, id asc).
pub fn full_sort(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Modulated-cosine scores of every document for `text` under `phi`.
pub fn mar_scores(
    text: &str,
    phi: &FeatureSet,
    corpus: &Corpus,
    lexicon: &Lexicon,
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    model: &ModulationModel,
) -> Vec<(String, f64)> {
    let vocab = lexicon.vocabulary();
    let alpha = sigmoid(model.sensitivity * hand_complexity(phi, vocab, kg));
    let q = shift(encoder.encode(text).unwrap().as_slice(), alpha, &model.w_q, &hot(phi, vocab));
    corpus
        .documents()
        .iter()
        .map(|d| {
            let v = shift(d.base_embedding.as_slice(), model.beta_doc, &model.w_d, &hot(&d.phi_d, vocab));
            (d.id.clone(), cos(&q, &v))
        })
        .collect()
}

/// Mean oracle PageRank of the nodes linked from `phi_d`.
pub fn doc_pagerank(phi_d: &FeatureSet, vocab: &FeatureVocabulary, pr: &BTreeMap<String, f64>) -> f64 {
    let nodes: BTreeSet<&String> = phi_d
        .ids()
        .filter_map(|id| vocab.get(id).unwrap().kg_node.as_ref())
        .filter(|n| pr.contains_key(*n))
        .collect();
    if nodes.is_empty() {
        0.0
    } else {
        nodes.iter().map(|n| pr[*n]).sum::<f64>() / nodes.len() as f64
    }
}

/// Concept labels the template enricher should append, in order.
pub fn expected_labels(
    text: &str,
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    tau: f64,
    hops: usize,
    budget: usize,
    gamma: f64,
) -> Vec<String> {
    let e = encoder.encode(text).unwrap();
    let seeds: BTreeSet<String> = kg
        .nodes()
        .iter()
        .filter(|n| cos(e.as_slice(), n.embedding.as_slice()) > tau)
        .map(|n| n.id.clone())
        .collect();
    if seeds.is_empty() {
        return Vec::new();
    }
    let pr = dense_pagerank(kg, gamma);
    let mut reached: Vec<(usize, String)> = bfs_layers(kg, &seeds, hops)
        .into_iter()
        .enumerate()
        .flat_map(|(h, l)| l.into_iter().map(move |id| (h, id)))
        .collect();
    reached.sort_by(|a, b| a.0.cmp(&b.0).then(pr[&b.1].partial_cmp(&pr[&a.1]).unwrap()).then(a.1.cmp(&b.1)));
    let mut labels: Vec<String> = Vec::new();
    for (_, id) in reached {
        let l = kg.node(&id).unwrap().label.clone();
        if labels.len() < budget && !labels.contains(&l) {
            labels.push(l);
        }
    }
    labels
}

/// Blended KG-path scores of every document.
#[allow(clippy::too_many_arguments)]
pub fn kgpath_scores(
    text: &str,
    phi: Option<&FeatureSet>,
    corpus: &Corpus,
    lexicon: &Lexicon,
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    model: &ModulationModel,
    cfg: &neurorag_core::types::RetrievalConfig,
) -> Vec<(String, f64)> {
    let vocab = lexicon.vocabulary();
    let own;
    let phi = match phi {
        Some(p) => p,
        None => {
            own = extract_features(text, lexicon);
            &own
        }
    };
    let labels = expected_labels(text, kg, encoder, cfg.tau, cfg.hops, cfg.label_budget, cfg.gamma);
    let enriched = if labels.is_empty() {
        text.to_string()
    } else {
        format!("{text} [related: {}]", labels.join(", "))
    };
    let alpha = sigmoid(model.sensitivity * hand_complexity(phi, vocab, kg));
    let q = shift(encoder.encode(&enriched).unwrap().as_slice(), alpha, &model.w_q, &hot(phi, vocab));
    let pr = dense_pagerank(kg, cfg.gamma);
    corpus
        .documents()
        .iter()
        .map(|d| {
            let v = shift(d.base_embedding.as_slice(), model.beta_doc, &model.w_d, &hot(&d.phi_d, vocab));
            let s = cfg.alpha_blend * cos(&q, &v) + (1.0 - cfg.alpha_blend) * doc_pagerank(&d.phi_d, vocab, &pr);
            (d.id.clone(), s)
        })
        .collect()
}

/// A scripted HTTP/1.1 server answering one canned response per connection
/// and recording each raw request.
pub struct MockServer {
    pub url: String,
    pub requests: std::sync::Arc<std::sync::Mutex<Vec<String>>>,
}

impl MockServer {
    pub fn start(responses: Vec<(u16, String)>) -> MockServer {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let requests = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let log = requests.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream);
                let mut head = String::new();
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap_or(0);
                    }
                    let end = line == "\r\n";
                    head.push_str(&line);
                    if end {
                        break;
                    }
                }
                let mut payload = vec![0u8; length];
                let _ = reader.read_exact(&mut payload);
                head.push_str(&String::from_utf8_lossy(&payload));
                log.lock().unwrap().push(head);
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        MockServer { url, requests }
    }

    pub fn hits(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

/// JSON body of a recorded raw request.
pub fn request_json(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw.split_once("\r\n\r\n").unwrap().1).unwrap()
}

pub fn session_for(world: &World, texts: &[String]) -> SessionState {
    let mut s = SessionState::new("s");
    for t in texts {
        s.add_turn("patient", t, &world.lexicon, &world.kg, world.model.sensitivity).unwrap();
    }
    s
}

pub fn worlds() -> Vec<(World, Vec<String>)> {
    (0..20u64)
        .map(|i| {
            let n = [1, 7, 50, 200, 1000][i as usize % 5];
            let w = random_world(n, 32, 100 + i).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let turns = (0..1 + i % 3).map(|_| random_text(&mut rng, 8)).collect();
            (w, turns)
        })
        .collect()
}

pub fn zeroed(world: &World) -> (ModulationModel, Corpus) {
    let z = ModulationModel::zeros(world.model.dim(), world.model.vocab_size(), world.model.sensitivity, 1.0).unwrap();
    (z.clone(), world.corpus.remodulate(world.vocabulary(), &z).unwrap())
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Joint loss recomputed from the definitions.
pub fn hand_loss(model: &ModulationModel, set: &TrainingSet, alpha_blend: f64, beta_loss: f64) -> f64 {
    let docs: Vec<Vec<f64>> = set
        .documents
        .iter()
        .map(|d| shift(&d.base, model.beta_doc, &model.w_d, &d.features))
        .collect();
    let mut total = 0.0;
    for t in &set.triples {
        let ur = shift(&t.q_retrieval, t.alpha, &model.w_q, &t.features);
        let ug = shift(&t.q_graph, t.alpha, &model.w_q, &t.features);
        let (p, n) = (&docs[t.positive], &docs[t.negative]);
        total += softplus(cos(&ur, n) - cos(&ur, p));
        let sp = alpha_blend * cos(&ug, p) + (1.0 - alpha_blend) * set.documents[t.positive].pagerank;
        let sn = alpha_blend * cos(&ug, n) + (1.0 - alpha_blend) * set.documents[t.negative].pagerank;
        total += beta_loss * softplus(sn - sp);
    }
    total
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_instance(seed: u64) -> (ModulationModel, TrainingSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let m = rng.random_range(1..=6);
    let n_docs = rng.random_range(2..6);
    let hot = |rng: &mut ChaCha8Rng| (0..m).map(|_| rng.random_bool(0.5) as u8 as f64).collect::<Vec<_>>();
    let documents = (0..n_docs)
        .map(|_| PreparedDoc {
            base: gaussian(&mut rng, d),
            features: hot(&mut rng),
            pagerank: rng.random_range(0.0..0.3),
        })
        .collect();
    let triples = (0..rng.random_range(1..5))
        .map(|_| {
            let positive = rng.random_range(0..n_docs);
            let negative = (positive + rng.random_range(1..n_docs)) % n_docs;
            PreparedTriple {
                q_retrieval: gaussian(&mut rng, d),
                q_graph: gaussian(&mut rng, d),
                features: hot(&mut rng),
                alpha: rng.random_range(0.5..1.0),
                positive,
                negative,
            }
        })
        .collect();
    let w_q = Array2::from_shape_fn((d, m), |_| rng.random_range(-0.5..0.5));
    let w_d = Array2::from_shape_fn((d, m), |_| rng.random_range(-0.5..0.5));
    let model = ModulationModel::new(w_q, w_d, 0.5, rng.random_range(0.2..=1.0)).unwrap();
    (model, TrainingSet { documents, triples })
}

pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Expected evidence order from an exhaustive alignment matrix.
pub fn oracle_order(passages: &[RankedPassage], inst: &Instrument) -> (Vec<Vec<f64>>, Vec<(String, usize)>) {
    let matrix: Vec<Vec<f64>> = passages
        .iter()
        .map(|p| {
            inst.items
                .iter()
                .map(|it| cos(p.embedding.as_slice(), it.embedding.as_slice()))
                .collect()
        })
        .collect();
    let mut rows: Vec<(usize, f64, &str, usize)> = passages
        .iter()
        .zip(&matrix)
        .map(|(p, row)| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (inst.items[best].index, p.score, p.document_id.as_str(), p.rank)
        })
        .collect();
    rows.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.1.partial_cmp(&a.1).unwrap())
            .then(a.2.cmp(b.2))
            .then(a.3.cmp(&b.3))
    });
    (matrix, rows.into_iter().map(|r| (r.2.to_string(), r.0)).collect())
}

pub fn random_passages(rng: &mut ChaCha8Rng, dim: usize) -> Vec<RankedPassage> {
    let n = rng.random_range(1..12);
    (0..n)
        .map(|i| RankedPassage {
            document_id: format!("p{:02}", rng.random_range(0..20)),
            rank: i + 1,
            score: (rng.random_range(0..5) as f64) / 4.0,
            embedding: Embedding::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        })
        .collect()
}
