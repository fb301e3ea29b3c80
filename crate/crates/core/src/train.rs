//! Contrastive training of the modulation matrices.
//!
//! The objective is `L_retrieval + beta_loss * L_graph`, where both terms are
//! pairwise softplus losses over (query, positive, negative) triples. The
//! retrieval term scores with the modulated cosine alone; the graph term uses
//! the blended KG-path score. PageRank is a constant with respect to the
//! weights, so only the cosine parts carry gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::features::{complexity, extract_features, modulation_strength, Lexicon};
use crate::kg::{pagerank, KnowledgeGraph};
use crate::kgpath::{document_pagerank, enrich_query, linked_nodes, sigmoid, softplus, Enricher, TrainingTriple};
use crate::types::{mat_vec, multi_hot, ModulationModel, RetrievalConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDoc {
    pub base: Vec<f64>,
    pub features: Vec<f64>,
    pub pagerank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTriple {
    /// Encoded query text, scored by the retrieval term.
    pub q_retrieval: Vec<f64>,
    /// Encoded enriched query text, scored by the graph term.
    pub q_graph: Vec<f64>,
    pub features: Vec<f64>,
    pub alpha: f64,
    pub positive: usize,
    pub negative: usize,
}

/// Everything the objective needs, with text already encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub documents: Vec<PreparedDoc>,
    pub triples: Vec<PreparedTriple>,
}

impl TrainingSet {
    pub fn validate(&self, model: &ModulationModel) -> Result<()> {
        if self.triples.is_empty() {
            return Err(Error::Dataset("training set has no triples".into()));
        }
        let (d, m) = (model.dim(), model.vocab_size());
        for (i, doc) in self.documents.iter().enumerate() {
            if doc.base.len() != d || doc.features.len() != m {
                return Err(Error::usage(format!("training document {i} does not match model shape {d}x{m}")));
            }
        }
        for (i, t) in self.triples.iter().enumerate() {
            if t.q_retrieval.len() != d || t.q_graph.len() != d || t.features.len() != m {
                return Err(Error::usage(format!("training triple {i} does not match model shape {d}x{m}")));
            }
            if t.positive >= self.documents.len() || t.negative >= self.documents.len() {
                return Err(Error::usage(format!("training triple {i} points past the document list")));
            }
        }
        Ok(())
    }
}

/// Encodes triples against a corpus: raw and enriched query embeddings,
/// query multi-hot and modulation strength, document multi-hot and PageRank.
#[allow(clippy::too_many_arguments)]
pub fn prepare_training_set(
    triples: &[TrainingTriple],
    corpus: &Corpus,
    lexicon: &Lexicon,
    kg: &KnowledgeGraph,
    encoder: &dyn Encoder,
    model: &ModulationModel,
    cfg: &RetrievalConfig,
    enricher: &dyn Enricher,
) -> Result<TrainingSet> {
    let vocab = lexicon.vocabulary();
    let pr = pagerank(kg, cfg.gamma, cfg.pagerank_tolerance, cfg.pagerank_max_iter)?;
    let documents = corpus
        .documents()
        .iter()
        .map(|d| {
            Ok(PreparedDoc {
                base: d.base_embedding.as_slice().to_vec(),
                features: multi_hot(&d.phi_d, vocab)?,
                pagerank: document_pagerank(&linked_nodes(&d.phi_d, vocab, kg), &pr),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut prepared = Vec::with_capacity(triples.len());
    for t in triples {
        let lookup = |id: &str| {
            corpus
                .position(id)
                .ok_or_else(|| Error::Dataset(format!("unknown document {id} in training triple")))
        };
        let phi = extract_features(&t.query, lexicon);
        let c = complexity(&phi, vocab, kg)?;
        prepared.push(PreparedTriple {
            q_retrieval: encoder.encode(&t.query)?.into_vec(),
            q_graph: enrich_query(&t.query, kg, encoder, cfg, enricher, &pr)?.embedding.into_vec(),
            features: multi_hot(&phi, vocab)?,
            alpha: modulation_strength(c.total, model.sensitivity),
            positive: lookup(&t.positive_id)?,
            negative: lookup(&t.negative_id)?,
        });
    }
    Ok(TrainingSet {
        documents,
        triples: prepared,
    })
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub retrieval_loss: f64,
    pub graph_loss: f64,
    pub grad_q: Array2<f64>,
    pub grad_d: Array2<f64>,
    /// Fraction of triples whose positive outscores the negative on the
    /// retrieval score.
    pub accuracy: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn shifted(base: &[f64], scale: f64, w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    let s = mat_vec(w, x);
    base.iter().zip(s).map(|(b, v)| b + scale * v).collect()
}

/// Cosine of `u, v` with its gradients; zero vectors yield 0 and no gradient.
fn cosine_with_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return (0.0, vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let c = dot(u, v) / (nu * nv);
    let du = u.iter().zip(v).map(|(ui, vi)| vi / (nu * nv) - c * ui / (nu * nu)).collect();
    let dv = u.iter().zip(v).map(|(ui, vi)| ui / (nu * nv) - c * vi / (nv * nv)).collect();
    (c, du, dv)
}

fn add_outer(target: &mut Array2<f64>, scale: f64, g: &[f64], x: &[f64]) {
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for (i, &gi) in g.iter().enumerate() {
            target[(i, j)] += scale * gi * xj;
        }
    }
}

fn add_into(acc: &mut [f64], scale: f64, g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += scale * v;
    }
}

/// Joint loss and its analytic gradient with respect to `W_q` and `W_d`.
pub fn objective(model: &ModulationModel, set: &TrainingSet, alpha_blend: f64, beta_loss: f64) -> Result<Objective> {
    set.validate(model)?;
    let (d, m) = (model.dim(), model.vocab_size());
    let docs: Vec<Vec<f64>> = set
        .documents
        .iter()
        .map(|doc| shifted(&doc.base, model.beta_doc, &model.w_d, &doc.features))
        .collect();
    let mut doc_grads = vec![vec![0.0; d]; docs.len()];
    let mut grad_q = Array2::zeros((d, m));
    let mut retrieval_loss = 0.0;
    let mut graph_loss = 0.0;
    let mut correct = 0usize;

    for t in &set.triples {
        let u_r = shifted(&t.q_retrieval, t.alpha, &model.w_q, &t.features);
        let u_g = shifted(&t.q_graph, t.alpha, &model.w_q, &t.features);
        let (vp, vn) = (&docs[t.positive], &docs[t.negative]);
        let mut gu = vec![0.0; d];

        let (cp, dup, dvp) = cosine_with_grad(&u_r, vp);
        let (cn, dun, dvn) = cosine_with_grad(&u_r, vn);
        if cp > cn {
            correct += 1;
        }
        let margin = cn - cp;
        retrieval_loss += softplus(margin);
        let g = sigmoid(margin);
        add_into(&mut gu, -g, &dup);
        add_into(&mut gu, g, &dun);
        add_into(&mut doc_grads[t.positive], -g, &dvp);
        add_into(&mut doc_grads[t.negative], g, &dvn);

        let (gp, gup, gvp) = cosine_with_grad(&u_g, vp);
        let (gn, gun, gvn) = cosine_with_grad(&u_g, vn);
        let pr_p = set.documents[t.positive].pagerank;
        let pr_n = set.documents[t.negative].pagerank;
        let sp = alpha_blend * gp + (1.0 - alpha_blend) * pr_p;
        let sn = alpha_blend * gn + (1.0 - alpha_blend) * pr_n;
        graph_loss += softplus(sn - sp);
        let h = beta_loss * sigmoid(sn - sp) * alpha_blend;
        add_into(&mut gu, -h, &gup);
        add_into(&mut gu, h, &gun);
        add_into(&mut doc_grads[t.positive], -h, &gvp);
        add_into(&mut doc_grads[t.negative], h, &gvn);

        add_outer(&mut grad_q, t.alpha, &gu, &t.features);
    }
    let mut grad_d = Array2::zeros((d, m));
    for (g, doc) in doc_grads.iter().zip(&set.documents) {
        add_outer(&mut grad_d, model.beta_doc, g, &doc.features);
    }
    Ok(Objective {
        loss: retrieval_loss + beta_loss * graph_loss,
        retrieval_loss,
        graph_loss,
        grad_q,
        grad_d,
        accuracy: correct as f64 / set.triples.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub alpha_blend: f64,
    pub beta_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    #[serde(skip)]
    pub model: Option<ModulationModel>,
    /// Loss before each epoch's update.
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    pub initial_accuracy: f64,
    pub triple_accuracy: f64,
}

/// Full-batch gradient descent for `params.epochs` steps.
pub fn train(model: &ModulationModel, set: &TrainingSet, params: &TrainParams) -> Result<TrainOutcome> {
    if !(params.learning_rate.is_finite() && params.learning_rate >= 0.0) {
        return Err(Error::usage("learning rate must be finite and non-negative"));
    }
    let mut current = model.clone();
    let mut loss_curve = Vec::with_capacity(params.epochs);
    let mut initial_accuracy = None;
    for epoch in 0..params.epochs {
        let obj = objective(&current, set, params.alpha_blend, params.beta_loss)?;
        if !obj.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("loss became {}", obj.loss),
            });
        }
        initial_accuracy.get_or_insert(obj.accuracy);
        loss_curve.push(obj.loss);
        current.w_q.scaled_add(-params.learning_rate, &obj.grad_q);
        current.w_d.scaled_add(-params.learning_rate, &obj.grad_d);
    }
    let last = objective(&current, set, params.alpha_blend, params.beta_loss)?;
    if !last.loss.is_finite() || current.w_q.iter().chain(current.w_d.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Training {
            epoch: params.epochs,
            message: format!("loss became {}", last.loss),
        });
    }
    Ok(TrainOutcome {
        model: Some(current),
        loss_curve,
        final_loss: last.loss,
        initial_accuracy: initial_accuracy.unwrap_or(last.accuracy),
        triple_accuracy: last.accuracy,
    })
}
