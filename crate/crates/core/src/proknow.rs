//! Procedural instruments: selecting which questionnaires apply to a
//! session, reordering evidence to follow instrument item order, and
//! sequencing follow-up questions.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::features::SessionState;
use crate::kg::KnowledgeGraph;
use crate::types::{cosine, Embedding, FeatureSet, FeatureVocabulary, SCHEMA_VERSION};

/// Assessment workflow stage; instruments are expected to be administered in
/// this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowStage {
    Screening,
    Consultation,
    RiskAssessment,
    DiagnosticInterview,
    Intervention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub text: String,
    #[serde(default)]
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentFile {
    pub schema_version: u32,
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<WorkflowStage>,
    pub trigger_concepts: Vec<String>,
    pub items: Vec<ItemRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstrumentItem {
    pub index: usize,
    pub text: String,
    pub concepts: BTreeSet<String>,
    #[serde(skip)]
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instrument {
    pub id: String,
    pub name: String,
    pub category: Option<WorkflowStage>,
    pub trigger_concepts: BTreeSet<String>,
    pub items: Vec<InstrumentItem>,
}

impl Instrument {
    /// Validates the file and embeds every item text.
    pub fn from_file(file: InstrumentFile, encoder: &dyn Encoder, kg: &KnowledgeGraph) -> Result<Self> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::data(format!(
                "instrument {} has schema version {}, expected {SCHEMA_VERSION}",
                file.id, file.schema_version
            )));
        }
        if file.items.is_empty() {
            return Err(Error::data(format!("instrument {} has no items", file.id)));
        }
        if file.trigger_concepts.is_empty() {
            return Err(Error::data(format!("instrument {} has no trigger concepts", file.id)));
        }
        let mut items = file.items;
        items.sort_by_key(|i| i.index);
        for (pos, item) in items.iter().enumerate() {
            if item.index != pos + 1 {
                return Err(Error::data(format!(
                    "instrument {} item indices must be 1..{} without gaps",
                    file.id,
                    items.len()
                )));
            }
        }
        let missing: Vec<&String> = file
            .trigger_concepts
            .iter()
            .chain(items.iter().flat_map(|i| i.concepts.iter()))
            .filter(|c| !kg.contains(c))
            .collect();
        if !missing.is_empty() {
            return Err(Error::data(format!(
                "instrument {} references unknown graph nodes {:?}",
                file.id, missing
            )));
        }
        let embeddings = encoder.encode_batch(&items.iter().map(|i| i.text.as_str()).collect::<Vec<_>>())?;
        Ok(Instrument {
            id: file.id,
            name: file.name,
            category: file.category,
            trigger_concepts: file.trigger_concepts.into_iter().collect(),
            items: items
                .into_iter()
                .zip(embeddings)
                .map(|(r, embedding)| InstrumentItem {
                    index: r.index,
                    text: r.text,
                    concepts: r.concepts.into_iter().collect(),
                    embedding,
                })
                .collect(),
        })
    }

    pub fn from_json(json: &str, encoder: &dyn Encoder, kg: &KnowledgeGraph) -> Result<Self> {
        Self::from_file(serde_json::from_str(json)?, encoder, kg)
    }

    pub fn item(&self, index: usize) -> Option<&InstrumentItem> {
        index.checked_sub(1).and_then(|i| self.items.get(i))
    }
}

/// Immutable set of instruments, ordered by id.
#[derive(Debug, Clone, Default)]
pub struct InstrumentRegistry {
    instruments: Vec<Instrument>,
}

impl InstrumentRegistry {
    pub fn new(mut instruments: Vec<Instrument>) -> Result<Self> {
        instruments.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = instruments.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::data(format!("duplicate instrument id {}", w[0].id)));
        }
        Ok(InstrumentRegistry { instruments })
    }

    /// Loads every `*.json` file in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>, encoder: &dyn Encoder, kg: &KnowledgeGraph) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let instruments = paths
            .iter()
            .map(|p| {
                let raw = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Instrument::from_json(&raw, encoder, kg)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(instruments)
    }

    pub fn instruments(&self) -> &[Instrument] {
        &self.instruments
    }

    pub fn get(&self, id: &str) -> Option<&Instrument> {
        self.instruments.iter().find(|i| i.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.instruments.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentMatch {
    pub instrument_id: String,
    pub score: f64,
    /// Features whose graph node is a trigger or adjacent to one.
    pub matched_features: Vec<String>,
}

/// Features of `phi` whose node is a trigger concept or one hop from one,
/// counted against the number of triggers.
pub fn match_score(
    phi: &FeatureSet,
    vocab: &FeatureVocabulary,
    kg: &KnowledgeGraph,
    instrument: &Instrument,
) -> InstrumentMatch {
    let matched: Vec<String> = phi
        .ids()
        .filter(|id| {
            vocab
                .get(id)
                .and_then(|f| f.kg_node.as_deref())
                .is_some_and(|node| {
                    instrument
                        .trigger_concepts
                        .iter()
                        .any(|t| t == node || kg.has_edge_between(t, node))
                })
        })
        .map(str::to_string)
        .collect();
    InstrumentMatch {
        instrument_id: instrument.id.clone(),
        score: matched.len() as f64 / instrument.trigger_concepts.len() as f64,
        matched_features: matched,
    }
}

/// Instruments with a positive match score, best first, ties by id.
pub fn select_instruments(
    phi: &FeatureSet,
    vocab: &FeatureVocabulary,
    kg: &KnowledgeGraph,
    registry: &InstrumentRegistry,
) -> Result<Vec<InstrumentMatch>> {
    if registry.is_empty() {
        return Err(Error::usage("instrument registry is empty"));
    }
    let mut out: Vec<InstrumentMatch> = registry
        .instruments()
        .iter()
        .map(|i| match_score(phi, vocab, kg, i))
        .filter(|m| m.score > 0.0)
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.instrument_id.cmp(&b.instrument_id))
    });
    Ok(out)
}

/// A retrieved passage handed to [`reorder_by_instrument`].
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPassage {
    pub document_id: String,
    pub rank: usize,
    pub score: f64,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEntry {
    pub document_id: String,
    pub aligned_item: usize,
    pub alignment_score: f64,
    pub original_rank: usize,
    pub retrieval_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderedEvidence {
    pub instrument_id: String,
    pub entries: Vec<EvidenceEntry>,
    /// Passage x item cosines, rows in input order, columns by item index.
    pub alignment_matrix: Vec<Vec<f64>>,
}

/// Aligns each passage to its most similar item (lower index on ties) and
/// sorts by (item, retrieval score descending, document id).
pub fn reorder_by_instrument(passages: &[RankedPassage], instrument: &Instrument) -> Result<OrderedEvidence> {
    if passages.is_empty() {
        return Err(Error::usage("no passages to reorder"));
    }
    let mut matrix = Vec::with_capacity(passages.len());
    let mut entries = Vec::with_capacity(passages.len());
    for p in passages {
        let row = instrument
            .items
            .iter()
            .map(|it| Ok(cosine(&p.embedding, &it.embedding)?.value))
            .collect::<Result<Vec<f64>>>()?;
        let (mut best, mut best_score) = (0, f64::NEG_INFINITY);
        for (i, &s) in row.iter().enumerate() {
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        entries.push(EvidenceEntry {
            document_id: p.document_id.clone(),
            aligned_item: instrument.items[best].index,
            alignment_score: best_score,
            original_rank: p.rank,
            retrieval_score: p.score,
        });
        matrix.push(row);
    }
    entries.sort_by(|a, b| {
        a.aligned_item
            .cmp(&b.aligned_item)
            .then_with(|| b.retrieval_score.total_cmp(&a.retrieval_score))
            .then_with(|| a.document_id.cmp(&b.document_id))
            .then_with(|| a.original_rank.cmp(&b.original_rank))
    });
    Ok(OrderedEvidence {
        instrument_id: instrument.id.clone(),
        entries,
        alignment_matrix: matrix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextQuestion {
    Question {
        instrument_id: String,
        item_index: usize,
        text: String,
        /// Feature the question follows up on, when templated.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_id: Option<String>,
    },
    Exhausted {
        instrument_id: String,
    },
}

/// The question [`next_question`] would ask, without recording it.
pub fn peek_next_question(session: &SessionState, instrument: &Instrument, vocab: &FeatureVocabulary) -> NextQuestion {
    let asked = session.asked_items.get(&instrument.id);
    let unasked = || {
        instrument
            .items
            .iter()
            .filter(move |it| asked.is_none_or(|a| !a.contains(&it.index)))
    };
    for item in unasked() {
        let hit = session.phi.ids().find_map(|id| {
            let f = vocab.get(id)?;
            f.kg_node
                .as_ref()
                .filter(|n| item.concepts.contains(*n))
                .map(|_| f)
        });
        if let Some(f) = hit {
            return NextQuestion::Question {
                instrument_id: instrument.id.clone(),
                item_index: item.index,
                text: format!("You previously reported {}. Are you still experiencing it?", f.label),
                feature_id: Some(f.id.clone()),
            };
        }
    }
    match unasked().next() {
        Some(item) => NextQuestion::Question {
            instrument_id: instrument.id.clone(),
            item_index: item.index,
            text: item.text.clone(),
            feature_id: None,
        },
        None => NextQuestion::Exhausted {
            instrument_id: instrument.id.clone(),
        },
    }
}

/// Picks the next item to ask and marks it asked on the session.
pub fn next_question(session: &mut SessionState, instrument: &Instrument, vocab: &FeatureVocabulary) -> NextQuestion {
    let q = peek_next_question(session, instrument, vocab);
    if let NextQuestion::Question { item_index, .. } = &q {
        session
            .asked_items
            .entry(instrument.id.clone())
            .or_default()
            .insert(*item_index);
    }
    q
}

/// First position where a stage precedes the stage before it.
pub fn workflow_violation(stages: &[WorkflowStage]) -> Option<usize> {
    stages
        .windows(2)
        .position(|w| w[1].cmp(&w[0]) == Ordering::Less)
        .map(|i| i + 1)
}
