//! Graph-path retrieval: the query is mapped onto the knowledge graph,
//! expanded by breadth-first traversal, rewritten by an [`Enricher`], and
//! documents are ranked by a blend of cosine similarity and the PageRank of
//! the graph nodes they are annotated with.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{scan_top_k, Corpus};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::features::{complexity, extract_features, modulation_strength, Lexicon};
use crate::kg::{k_hop, map_query_to_nodes, pagerank, KnowledgeGraph, PageRank, TraversalResult};
use crate::mar::modulate_query;
use crate::types::{cosine, Document, Embedding, FeatureSet, FeatureVocabulary, ModulationModel, RetrievalConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTerm {
    pub node_id: String,
    pub label: String,
    pub hop: usize,
}

/// Output of an [`Enricher`]: the text used for retrieval plus every
/// intermediate rewrite kept for display.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrichment {
    pub retrieval_text: String,
    pub variants: Vec<String>,
}

/// Rewrites a query given the graph concepts gathered for it. Concepts arrive
/// ordered by (hop, PageRank descending, id).
pub trait Enricher: Send + Sync {
    fn enrich(&self, original: &str, concepts: &[ConceptTerm]) -> Result<Enrichment>;
}

/// Appends concept labels: `"<original> [related: l1, l2, ...]"`.
///
/// Variants are the cumulative rewrites after each hop level.
#[derive(Debug, Clone)]
pub struct TemplateEnricher {
    pub label_budget: usize,
}

impl TemplateEnricher {
    fn render(original: &str, labels: &[&str]) -> String {
        format!("{original} [related: {}]", labels.join(", "))
    }
}

impl Enricher for TemplateEnricher {
    fn enrich(&self, original: &str, concepts: &[ConceptTerm]) -> Result<Enrichment> {
        let mut labels: Vec<&str> = Vec::new();
        let mut label_hops = Vec::new();
        for c in concepts {
            if labels.len() >= self.label_budget {
                break;
            }
            if !labels.contains(&c.label.as_str()) {
                labels.push(&c.label);
                label_hops.push(c.hop);
            }
        }
        if labels.is_empty() {
            return Ok(Enrichment {
                retrieval_text: original.to_string(),
                variants: Vec::new(),
            });
        }
        let mut variants = Vec::new();
        let max_hop = *label_hops.iter().max().expect("non-empty");
        for h in 0..=max_hop {
            let upto = label_hops.iter().take_while(|&&lh| lh <= h).count();
            if upto == 0 {
                continue;
            }
            let v = Self::render(original, &labels[..upto]);
            if variants.last() != Some(&v) {
                variants.push(v);
            }
        }
        Ok(Enrichment {
            retrieval_text: Self::render(original, &labels),
            variants,
        })
    }
}

#[derive(Serialize)]
struct EnrichRequest<'a> {
    query: &'a str,
    concepts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EnrichResponse {
    texts: Vec<String>,
}

/// Client for an external text-generation service:
/// `POST {"query", "concepts": [labels]}` -> `{"texts": [...]}`. The first
/// returned text is used for retrieval.
pub struct RemoteEnricher {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteEnricher {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteEnricher {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl Enricher for RemoteEnricher {
    fn enrich(&self, original: &str, concepts: &[ConceptTerm]) -> Result<Enrichment> {
        let body = EnrichRequest {
            query: original,
            concepts: concepts.iter().map(|c| c.label.as_str()).collect(),
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| Error::Transport {
                message: e.to_string(),
                retries_exhausted: false,
            })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(Error::Transport {
                message: format!("enrichment service answered {status}"),
                retries_exhausted: false,
            });
        }
        let parsed: EnrichResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Contract(format!("malformed enrichment response: {e}")))?;
        let first = parsed
            .texts
            .first()
            .filter(|t| !t.trim().is_empty())
            .cloned()
            .ok_or_else(|| Error::Contract("enrichment service returned no text".into()))?;
        Ok(Enrichment {
            retrieval_text: first,
            variants: parsed.texts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedQuery {
    pub original_text: String,
    pub concept_terms: Vec<ConceptTerm>,
    /// The original first, then each enricher rewrite.
    pub enriched_texts: Vec<String>,
    /// The rewrite that was encoded for retrieval.
    pub retrieval_text: String,
    /// Set when no graph node passed the threshold.
    pub unenriched: bool,
    pub traversal: TraversalResult,
    #[serde(skip_serializing, default)]
    pub embedding: Embedding,
}

/// Concepts reached by traversal, ordered by (hop, PageRank descending, id).
pub fn ordered_concepts(traversal: &TraversalResult, kg: &KnowledgeGraph, pr: &PageRank) -> Vec<ConceptTerm> {
    let mut terms: Vec<ConceptTerm> = traversal
        .frontier_by_hop
        .iter()
        .enumerate()
        .flat_map(|(hop, layer)| layer.iter().map(move |id| (hop, id)))
        .map(|(hop, id)| ConceptTerm {
            node_id: id.clone(),
            label: kg.node(id).map(|n| n.label.clone()).unwrap_or_else(|| id.clone()),
            hop,
        })
        .collect();
    terms.sort_by(|a, b| {
        a.hop
            .cmp(&b.hop)
            .then_with(|| pr.score(&b.node_id).total_cmp(&pr.score(&a.node_id)))
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    terms
}

pub fn enrich_query(
    text: &str,
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    cfg: &RetrievalConfig,
    enricher: &dyn Enricher,
    pr: &PageRank,
) -> Result<EnrichedQuery> {
    if !(-1.0..=1.0).contains(&cfg.tau) || cfg.hops == 0 {
        return Err(Error::usage("tau must be in [-1,1] and hops at least 1"));
    }
    let e = encoder.encode(text)?;
    let seeds = map_query_to_nodes(&e, kg, cfg.tau)?;
    if seeds.is_empty() {
        return Ok(EnrichedQuery {
            original_text: text.to_string(),
            concept_terms: Vec::new(),
            enriched_texts: vec![text.to_string()],
            retrieval_text: text.to_string(),
            unenriched: true,
            traversal: TraversalResult {
                seed_nodes: BTreeSet::new(),
                frontier_by_hop: vec![BTreeSet::new()],
                paths: BTreeMap::new(),
            },
            embedding: e,
        });
    }
    let traversal = k_hop(&seeds, kg, cfg.hops)?;
    let concept_terms = ordered_concepts(&traversal, kg, pr);
    let enrichment = enricher.enrich(text, &concept_terms)?;
    let mut enriched_texts = vec![text.to_string()];
    for v in enrichment.variants {
        if !enriched_texts.contains(&v) {
            enriched_texts.push(v);
        }
    }
    if !enriched_texts.contains(&enrichment.retrieval_text) {
        enriched_texts.push(enrichment.retrieval_text.clone());
    }
    let embedding = encoder.encode(&enrichment.retrieval_text)?;
    Ok(EnrichedQuery {
        original_text: text.to_string(),
        concept_terms,
        enriched_texts,
        retrieval_text: enrichment.retrieval_text,
        unenriched: false,
        traversal,
        embedding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedNode {
    pub node_id: String,
    pub pagerank: f64,
    /// Witness path from a query seed, when traversal reached the node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<String>>,
}

/// Distinct KG nodes referenced by the document's features, in id order.
pub fn linked_nodes(phi_d: &FeatureSet, vocab: &FeatureVocabulary, kg: &KnowledgeGraph) -> Vec<String> {
    let nodes: BTreeSet<String> = phi_d
        .ids()
        .filter_map(|id| vocab.get(id).and_then(|f| f.kg_node.clone()))
        .filter(|n| kg.contains(n))
        .collect();
    nodes.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgScore {
    pub score: f64,
    pub cosine: f64,
    /// Mean PageRank of the document's linked nodes.
    pub doc_pagerank: f64,
    pub linked: Vec<(String, f64)>,
    /// Set when the document links to no graph node and `doc_pagerank` is 0.
    pub unlinked: bool,
}

pub fn document_pagerank(nodes: &[String], pr: &PageRank) -> f64 {
    if nodes.is_empty() {
        0.0
    } else {
        nodes.iter().map(|n| pr.score(n)).sum::<f64>() / nodes.len() as f64
    }
}

/// `alpha_blend * cosine(q, d') + (1 - alpha_blend) * PR(d)`.
pub fn score_kgpath(
    query_embedding: &Embedding,
    d: &Document,
    pr: &PageRank,
    vocab: &FeatureVocabulary,
    kg: &KnowledgeGraph,
    cfg: &RetrievalConfig,
) -> Result<KgScore> {
    let cos = cosine(query_embedding, &d.modulated_embedding)?.value;
    let nodes = linked_nodes(&d.phi_d, vocab, kg);
    let doc_pr = document_pagerank(&nodes, pr);
    let a = cfg.alpha_blend;
    Ok(KgScore {
        score: a * cos + (1.0 - a) * doc_pr,
        cosine: cos,
        doc_pagerank: doc_pr,
        linked: nodes.iter().map(|n| (n.clone(), pr.score(n))).collect(),
        unlinked: nodes.is_empty(),
    })
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    modulation_strength(x, 1.0)
}

/// `-sum ln(e^{s+} / (e^{s+} + e^{s-}))` over `(s+, s-)` pairs.
pub fn graph_rank_loss(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::usage("graph_rank_loss needs at least one triple"));
    }
    let mut total = 0.0;
    for (i, (pos, neg)) in pairs.iter().enumerate() {
        if !pos.is_finite() || !neg.is_finite() {
            return Err(Error::Training {
                epoch: 0,
                message: format!("triple {i} has non-finite scores ({pos}, {neg})"),
            });
        }
        total += softplus(neg - pos);
    }
    Ok(total)
}

/// A labeled query as read from a triples file; a missing negative is
/// filled in by [`sample_negatives`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query: String,
    pub positive_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub query: String,
    pub positive_id: String,
    pub negative_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledTriples {
    pub triples: Vec<TrainingTriple>,
    /// Indices of queries whose negative came from the uniform fallback.
    pub fallback: Vec<usize>,
}

pub fn parse_labeled_queries(jsonl: &str) -> Result<Vec<LabeledQuery>> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::data(format!("triples line {}: {e}", n + 1)))
        })
        .collect()
}

/// Fills missing negatives with documents whose linked nodes all lie at
/// least `cfg.negative_min_hops` hops from the query's seed nodes, falling
/// back to any non-positive document when none qualify.
pub fn sample_negatives(
    labeled: &[LabeledQuery],
    corpus: &Corpus,
    vocab: &FeatureVocabulary,
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    cfg: &RetrievalConfig,
    seed: u64,
) -> Result<SampledTriples> {
    if corpus.len() < 2 {
        return Err(Error::Dataset("negative sampling needs at least two documents".into()));
    }
    let links: Vec<Vec<String>> = corpus
        .documents()
        .iter()
        .map(|d| linked_nodes(&d.phi_d, vocab, kg))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::with_capacity(labeled.len());
    let mut fallback = Vec::new();
    for (qi, lq) in labeled.iter().enumerate() {
        let pos = corpus
            .position(&lq.positive_id)
            .ok_or_else(|| Error::Dataset(format!("unknown positive document {}", lq.positive_id)))?;
        if let Some(neg) = &lq.negative_id {
            if corpus.position(neg).is_none() {
                return Err(Error::Dataset(format!("unknown negative document {neg}")));
            }
            if *neg == lq.positive_id {
                return Err(Error::Dataset(format!("query {qi} uses {neg} as both positive and negative")));
            }
            triples.push(TrainingTriple {
                query: lq.query.clone(),
                positive_id: lq.positive_id.clone(),
                negative_id: neg.clone(),
            });
            continue;
        }
        let seeds = map_query_to_nodes(&encoder.encode(&lq.query)?, kg, cfg.tau)?;
        let far: Vec<usize> = if seeds.is_empty() {
            Vec::new()
        } else {
            let dist = kg.distances_from(seeds.iter().map(String::as_str));
            (0..corpus.len())
                .filter(|&i| i != pos && !links[i].is_empty())
                .filter(|&i| {
                    links[i]
                        .iter()
                        .all(|n| dist.get(n).is_none_or(|&d| d >= cfg.negative_min_hops))
                })
                .collect()
        };
        let pool: Vec<usize> = if far.is_empty() {
            fallback.push(qi);
            (0..corpus.len()).filter(|&i| i != pos).collect()
        } else {
            far
        };
        let pick = pool[rng.random_range(0..pool.len())];
        triples.push(TrainingTriple {
            query: lq.query.clone(),
            positive_id: lq.positive_id.clone(),
            negative_id: corpus.documents()[pick].id.clone(),
        });
    }
    Ok(SampledTriples { triples, fallback })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgScoreBreakdown {
    pub cosine: f64,
    pub doc_pagerank: f64,
    pub alpha_blend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathProvenance {
    pub seed_nodes: Vec<String>,
    /// Witness path for every gathered concept.
    pub concept_paths: BTreeMap<String, Vec<String>>,
    pub linked_nodes: Vec<LinkedNode>,
    pub alpha_blend: f64,
    pub pagerank_weight: f64,
    /// Set when the document links to no graph node.
    pub unlinked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgPathResult {
    pub rank: usize,
    pub document_id: String,
    pub score: f64,
    pub score_breakdown: KgScoreBreakdown,
    pub provenance: PathProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRankSummary {
    pub gamma: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgPathRetrieval {
    pub query: EnrichedQuery,
    /// Modulation strength applied to the query side.
    pub alpha: f64,
    pub query_features: Vec<String>,
    pub pagerank: PageRankSummary,
    pub results: Vec<KgPathResult>,
    pub truncated: bool,
}

/// Enrich, rank every document by the blended score, keep the top `cfg.top_k`.
///
/// The enriched query embedding is modulated with `phi` (the session's
/// accumulated features, or the features of `text` when `phi` is `None`).
#[allow(clippy::too_many_arguments)]
pub fn retrieve_kgpath(
    text: &str,
    phi: Option<&FeatureSet>,
    corpus: &Corpus,
    lexicon: &Lexicon,
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    model: &ModulationModel,
    cfg: &RetrievalConfig,
    enricher: &dyn Enricher,
) -> Result<KgPathRetrieval> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::usage("cannot retrieve from an empty corpus"));
    }
    let vocab = lexicon.vocabulary();
    let pr = pagerank(kg, cfg.gamma, cfg.pagerank_tolerance, cfg.pagerank_max_iter)?;
    let query = enrich_query(text, kg, encoder, cfg, enricher, &pr)?;
    let own_phi;
    let phi = match phi {
        Some(p) => p,
        None => {
            own_phi = extract_features(text, lexicon);
            &own_phi
        }
    };
    let c = complexity(phi, vocab, kg)?;
    let alpha = modulation_strength(c.total, model.sensitivity);
    let q_emb = modulate_query(&query.embedding, phi, vocab, model, alpha)?;

    let top = scan_top_k(corpus.documents(), cfg.top_k, |d| {
        Ok(score_kgpath(&q_emb, d, &pr, vocab, kg, cfg)?.score)
    })?;
    let mut results = Vec::with_capacity(top.hits.len());
    for (rank, hit) in top.hits.iter().enumerate() {
        let d = &corpus.documents()[hit.index];
        let s = score_kgpath(&q_emb, d, &pr, vocab, kg, cfg)?;
        results.push(KgPathResult {
            rank: rank + 1,
            document_id: d.id.clone(),
            score: hit.score,
            score_breakdown: KgScoreBreakdown {
                cosine: s.cosine,
                doc_pagerank: s.doc_pagerank,
                alpha_blend: cfg.alpha_blend,
            },
            provenance: PathProvenance {
                seed_nodes: query.traversal.seed_nodes.iter().cloned().collect(),
                concept_paths: query.traversal.paths.clone(),
                linked_nodes: s
                    .linked
                    .iter()
                    .map(|(n, p)| LinkedNode {
                        node_id: n.clone(),
                        pagerank: *p,
                        path: query.traversal.paths.get(n).cloned(),
                    })
                    .collect(),
                alpha_blend: cfg.alpha_blend,
                pagerank_weight: 1.0 - cfg.alpha_blend,
                unlinked: s.unlinked,
            },
        });
    }
    Ok(KgPathRetrieval {
        query,
        alpha,
        query_features: phi.ids().map(str::to_string).collect(),
        pagerank: PageRankSummary {
            gamma: cfg.gamma,
            iterations: pr.iterations,
            converged: pr.converged,
        },
        results,
        truncated: top.truncated,
    })
}
