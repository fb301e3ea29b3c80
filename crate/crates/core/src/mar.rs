//! Modulation-aligned retrieval: accumulated session features shift the
//! query embedding, document annotations shift document embeddings, and
//! documents are ranked by cosine between the shifted vectors.

use serde::{Deserialize, Serialize};

use crate::corpus::{scan_top_k, Corpus};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::features::{complexity, modulation_strength, Complexity, Lexicon, SessionState};
use crate::kg::KnowledgeGraph;
use crate::types::{
    cosine, mat_vec, multi_hot, Embedding, FeatureSet, FeatureVocabulary, ModulationModel,
    RetrievalConfig,
};

/// `e_q + alpha * W_q * multi_hot(phi)`.
pub fn modulate_query(
    e_q: &Embedding,
    phi: &FeatureSet,
    vocab: &FeatureVocabulary,
    model: &ModulationModel,
    alpha: f64,
) -> Result<Embedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage(format!("alpha must be in [0,1], got {alpha}")));
    }
    model.check_shape(e_q.dim(), vocab.len())?;
    let x = multi_hot(phi, vocab)?;
    e_q.shifted(alpha, &mat_vec(&model.w_q, &x))
}

/// `e_d + beta_doc * W_d * multi_hot(phi_d)`.
pub fn modulate_document(
    e_d: &Embedding,
    phi_d: &FeatureSet,
    vocab: &FeatureVocabulary,
    model: &ModulationModel,
) -> Result<Embedding> {
    model.check_shape(e_d.dim(), vocab.len())?;
    let x = multi_hot(phi_d, vocab)?;
    e_d.shifted(model.beta_doc, &mat_vec(&model.w_d, &x))
}

/// Model whose column for each feature is the encoder's embedding of the
/// feature label, for both the query and the document side.
pub fn concept_aligned_model(
    vocab: &FeatureVocabulary,
    encoder: &dyn Encoder,
    sensitivity: f64,
    beta_doc: f64,
) -> Result<ModulationModel> {
    let d = encoder.dimension();
    let mut w = ndarray::Array2::zeros((d, vocab.len()));
    for (j, f) in vocab.features().iter().enumerate() {
        let col = encoder.encode(&f.label)?;
        for (i, v) in col.as_slice().iter().enumerate() {
            w[(i, j)] = *v;
        }
    }
    ModulationModel::new(w.clone(), w, sensitivity, beta_doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub base_cosine: f64,
    pub modulated_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFeature {
    pub id: String,
    pub first_seen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarProvenance {
    pub query_features: Vec<QueryFeature>,
    pub doc_features: Vec<String>,
    pub shared_features: Vec<String>,
    pub alpha_used: f64,
    /// Set when either modulated vector was zero and the cosine fell back to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResult {
    pub rank: usize,
    pub document_id: String,
    pub score: f64,
    pub score_breakdown: ScoreBreakdown,
    pub provenance: MarProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarRetrieval {
    pub query_text: String,
    pub alpha: f64,
    pub complexity: Complexity,
    pub results: Vec<ScoredResult>,
    /// Set when `top_k` exceeded the corpus size and every document was returned.
    pub truncated: bool,
}

/// Ranks the corpus for the session's latest utterance.
pub fn retrieve_mar(
    session: &SessionState,
    corpus: &Corpus,
    lexicon: &Lexicon,
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    model: &ModulationModel,
    cfg: &RetrievalConfig,
) -> Result<MarRetrieval> {
    cfg.validate()?;
    let text = session
        .latest_text()
        .ok_or_else(|| Error::usage("session has no turns to retrieve for"))?;
    if corpus.is_empty() {
        return Err(Error::usage("cannot retrieve from an empty corpus"));
    }
    let vocab = lexicon.vocabulary();
    let c = complexity(&session.phi, vocab, kg)?;
    let alpha = modulation_strength(c.total, model.sensitivity);
    let e_q = encoder.encode(text)?;
    let e_q_mod = modulate_query(&e_q, &session.phi, vocab, model, alpha)?;

    let top = scan_top_k(corpus.documents(), cfg.top_k, |d| {
        Ok(cosine(&e_q_mod, &d.modulated_embedding)?.value)
    })?;
    let query_features: Vec<QueryFeature> = session
        .phi
        .iter()
        .map(|(id, t)| QueryFeature {
            id: id.to_string(),
            first_seen: t,
        })
        .collect();
    let mut results = Vec::with_capacity(top.hits.len());
    for (rank, hit) in top.hits.iter().enumerate() {
        let doc = &corpus.documents()[hit.index];
        let modulated = cosine(&e_q_mod, &doc.modulated_embedding)?;
        results.push(ScoredResult {
            rank: rank + 1,
            document_id: doc.id.clone(),
            score: hit.score,
            score_breakdown: ScoreBreakdown {
                base_cosine: cosine(&e_q, &doc.base_embedding)?.value,
                modulated_cosine: modulated.value,
            },
            provenance: MarProvenance {
                query_features: query_features.clone(),
                doc_features: doc.phi_d.ids().map(str::to_string).collect(),
                shared_features: session.phi.intersection(&doc.phi_d),
                alpha_used: alpha,
                degenerate: modulated.degenerate,
            },
        });
    }
    Ok(MarRetrieval {
        query_text: text.to_string(),
        alpha,
        complexity: c,
        results,
        truncated: top.truncated,
    })
}
