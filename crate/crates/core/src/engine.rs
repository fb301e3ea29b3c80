//! One engine instance backs both the command line and the HTTP service, so
//! identical requests produce identical rankings through either frontend.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::context::assemble_context;
use crate::corpus::{ingest, ingest_texts, ChunkConfig, Corpus};
use crate::demo;
use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::features::{Lexicon, SessionState, TurnUpdate};
use crate::kg::KnowledgeGraph;
use crate::kgpath::{
    parse_labeled_queries, retrieve_kgpath, sample_negatives, Enricher, KgPathRetrieval, LabeledQuery,
    RemoteEnricher, TemplateEnricher,
};
use crate::mar::{concept_aligned_model, retrieve_mar, MarRetrieval};
use crate::proknow::{
    next_question, peek_next_question, reorder_by_instrument, select_instruments, InstrumentMatch,
    InstrumentRegistry, NextQuestion, OrderedEvidence, RankedPassage,
};
use crate::train::{prepare_training_set, train, TrainParams};
use crate::types::{ConfigOverrides, FeatureVocabulary, ModelCheckpoint, ModulationModel, RetrievalConfig, VocabularyFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnricherSpec {
    Template,
    Remote {
        endpoint: String,
        #[serde(default = "default_enricher_timeout")]
        timeout_ms: u64,
    },
}

fn default_enricher_timeout() -> u64 {
    10_000
}

impl Default for EnricherSpec {
    fn default() -> Self {
        EnricherSpec::Template
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mar,
    Kgpath,
    Proknow,
}

/// A model together with the corpus embeddings modulated by it.
#[derive(Debug)]
pub struct Snapshot {
    pub model: ModulationModel,
    pub corpus: Corpus,
}

/// Clears the engine's training flag when dropped.
pub struct TrainingLease {
    flag: Arc<AtomicBool>,
}

impl Drop for TrainingLease {
    fn drop(&mut self) {
        self.flag.store(false, Ordering::Release);
    }
}

pub struct Engine {
    lexicon: Lexicon,
    kg: KnowledgeGraph,
    encoder: Arc<dyn Encoder>,
    instruments: InstrumentRegistry,
    enricher: Box<dyn Enricher>,
    enricher_spec: EnricherSpec,
    defaults: RetrievalConfig,
    snapshot: RwLock<Arc<Snapshot>>,
    training: Arc<AtomicBool>,
}

pub struct EngineParts {
    pub lexicon: Lexicon,
    pub kg: KnowledgeGraph,
    pub encoder: Arc<dyn Encoder>,
    pub instruments: InstrumentRegistry,
    pub model: ModulationModel,
    pub corpus: Corpus,
    pub defaults: RetrievalConfig,
    pub enricher: EnricherSpec,
}

#[derive(Debug, Clone, Default)]
pub struct RetrieveRequest {
    pub mode: Option<Mode>,
    pub text: Option<String>,
    pub instrument_id: Option<String>,
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDocument {
    pub rank: usize,
    pub document_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProknowResult {
    pub instruments: Vec<InstrumentMatch>,
    pub instrument_id: Option<String>,
    pub evidence: Option<OrderedEvidence>,
    pub next_question: Option<NextQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub mode: Mode,
    pub query_text: String,
    pub model_checksum: String,
    pub config: RetrievalConfig,
    pub ranking: Vec<RankedDocument>,
    /// Query and ranked passages in the downstream context template.
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mar: Option<MarRetrieval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kgpath: Option<KgPathRetrieval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proknow: Option<ProknowResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.05,
            epochs: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub triples: usize,
    /// Query indices whose negative came from the uniform fallback.
    pub sampling_fallbacks: Vec<usize>,
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    pub initial_accuracy: f64,
    pub triple_accuracy: f64,
    pub model_checksum: String,
}

impl Engine {
    pub fn new(parts: EngineParts) -> Result<Self> {
        parts.defaults.validate()?;
        let vocab = parts.lexicon.vocabulary();
        parts.model.check_shape(parts.encoder.dimension(), vocab.len())?;
        if parts.corpus.manifest().vocabulary != vocab.ids() {
            return Err(Error::data("corpus vocabulary differs from the configured vocabulary"));
        }
        if parts.corpus.manifest().dimension != parts.encoder.dimension() {
            return Err(Error::data("corpus dimension differs from the encoder dimension"));
        }
        let corpus = if parts.corpus.manifest().model_checksum == parts.model.checksum() {
            parts.corpus
        } else {
            parts.corpus.remodulate(vocab, &parts.model)?
        };
        let enricher: Box<dyn Enricher> = match &parts.enricher {
            EnricherSpec::Template => Box::new(TemplateEnricher {
                label_budget: parts.defaults.label_budget,
            }),
            EnricherSpec::Remote { endpoint, timeout_ms } => {
                Box::new(RemoteEnricher::new(endpoint.clone(), Duration::from_millis(*timeout_ms)))
            }
        };
        Ok(Engine {
            lexicon: parts.lexicon,
            kg: parts.kg,
            encoder: parts.encoder,
            instruments: parts.instruments,
            enricher,
            enricher_spec: parts.enricher,
            defaults: parts.defaults,
            snapshot: RwLock::new(Arc::new(Snapshot {
                model: parts.model,
                corpus,
            })),
            training: Arc::new(AtomicBool::new(false)),
        })
    }

    /// The bundled demo data with the given defaults.
    pub fn demo(defaults: RetrievalConfig) -> Result<Self> {
        let d = demo::load()?;
        Self::new(EngineParts {
            lexicon: d.lexicon,
            kg: d.kg,
            encoder: Arc::new(d.encoder),
            instruments: d.instruments,
            model: d.model,
            corpus: d.corpus,
            defaults,
            enricher: EnricherSpec::Template,
        })
    }

    /// Opens a data directory; see [`DataDir`] for the layout. Missing files
    /// fall back to the bundled demo data.
    pub fn open(dir: Option<&Path>, defaults: RetrievalConfig, enricher: EnricherSpec) -> Result<Self> {
        let dd = DataDir::new(dir);
        let lexicon = dd.lexicon()?;
        let encoder = dd.encoder()?;
        let kg = match dd.existing("kg.json") {
            Some(p) => KnowledgeGraph::from_json(&read(&p)?, Some(encoder.as_ref()))?,
            None => demo::knowledge_graph(encoder.as_ref())?,
        };
        let instruments = match dd.existing("instruments") {
            Some(p) => InstrumentRegistry::load_dir(p, encoder.as_ref(), &kg)?,
            None => demo::instruments(encoder.as_ref(), &kg)?,
        };
        let model = dd.model(lexicon.vocabulary(), encoder.as_ref())?;
        let corpus = dd.corpus(&lexicon, encoder.as_ref(), &model)?;
        Self::new(EngineParts {
            lexicon,
            kg,
            encoder,
            instruments,
            model,
            corpus,
            defaults,
            enricher,
        })
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn vocabulary(&self) -> &FeatureVocabulary {
        self.lexicon.vocabulary()
    }

    pub fn kg(&self) -> &KnowledgeGraph {
        &self.kg
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn instruments(&self) -> &InstrumentRegistry {
        &self.instruments
    }

    pub fn defaults(&self) -> &RetrievalConfig {
        &self.defaults
    }

    pub fn enricher_spec(&self) -> &EnricherSpec {
        &self.enricher_spec
    }

    /// Current model and corpus; held snapshots survive later swaps.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    /// Installs `model` and the corpus re-modulated under it.
    pub fn replace_model(&self, model: ModulationModel) -> Result<()> {
        model.check_shape(self.encoder.dimension(), self.vocabulary().len())?;
        let corpus = self.snapshot().corpus.remodulate(self.vocabulary(), &model)?;
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(Snapshot { model, corpus });
        Ok(())
    }

    pub fn add_turn(&self, session: &mut SessionState, speaker: &str, text: &str) -> Result<TurnUpdate> {
        let sensitivity = self.snapshot().model.sensitivity;
        session.add_turn(speaker, text, &self.lexicon, &self.kg, sensitivity)
    }

    pub fn next_question(&self, session: &mut SessionState, instrument_id: &str) -> Result<NextQuestion> {
        let inst = self
            .instruments
            .get(instrument_id)
            .ok_or_else(|| Error::NotFound(format!("instrument {instrument_id}")))?;
        Ok(next_question(session, inst, self.vocabulary()))
    }

    /// Session the retrieval runs against: the given session, plus `text` as
    /// an extra turn when both are present.
    fn effective_session(&self, text: Option<&str>, session: Option<&SessionState>) -> Result<SessionState> {
        match (text, session) {
            (None, None) => Err(Error::usage("retrieval needs a session or a query text")),
            (None, Some(s)) => {
                if s.transcript.is_empty() {
                    Err(Error::usage("session has no turns to retrieve for"))
                } else {
                    Ok(s.clone())
                }
            }
            (Some(t), s) => {
                let mut eff = s.cloned().unwrap_or_else(|| SessionState::new("query"));
                self.add_turn(&mut eff, "query", t)?;
                Ok(eff)
            }
        }
    }

    pub fn retrieve(&self, req: &RetrieveRequest, session: Option<&SessionState>) -> Result<RetrieveResponse> {
        let cfg = self.defaults.with_overrides(&req.overrides)?;
        let mode = req.mode.unwrap_or(Mode::Mar);
        let snap = self.snapshot();
        let eff = self.effective_session(req.text.as_deref(), session)?;
        let query_text = eff.latest_text().unwrap_or_default().to_string();
        let vocab = self.vocabulary();
        let mut resp = RetrieveResponse {
            mode,
            query_text: query_text.clone(),
            model_checksum: snap.model.checksum(),
            config: cfg.clone(),
            ranking: Vec::new(),
            context: String::new(),
            mar: None,
            kgpath: None,
            proknow: None,
        };
        match mode {
            Mode::Mar => {
                let r = retrieve_mar(&eff, &snap.corpus, &self.lexicon, &self.kg, self.encoder(), &snap.model, &cfg)?;
                resp.ranking = r
                    .results
                    .iter()
                    .map(|x| RankedDocument {
                        rank: x.rank,
                        document_id: x.document_id.clone(),
                        score: x.score,
                    })
                    .collect();
                resp.mar = Some(r);
            }
            Mode::Kgpath => {
                let enricher: Box<dyn Enricher> = match &self.enricher_spec {
                    EnricherSpec::Template => Box::new(TemplateEnricher {
                        label_budget: cfg.label_budget,
                    }),
                    EnricherSpec::Remote { .. } => Box::new(RefEnricher(self.enricher.as_ref())),
                };
                let r = retrieve_kgpath(
                    &query_text,
                    Some(&eff.phi),
                    &snap.corpus,
                    &self.lexicon,
                    &self.kg,
                    self.encoder(),
                    &snap.model,
                    &cfg,
                    enricher.as_ref(),
                )?;
                resp.ranking = r
                    .results
                    .iter()
                    .map(|x| RankedDocument {
                        rank: x.rank,
                        document_id: x.document_id.clone(),
                        score: x.score,
                    })
                    .collect();
                resp.kgpath = Some(r);
            }
            Mode::Proknow => {
                let base = retrieve_mar(&eff, &snap.corpus, &self.lexicon, &self.kg, self.encoder(), &snap.model, &cfg)?;
                let matches = select_instruments(&eff.phi, vocab, &self.kg, &self.instruments)?;
                let chosen = match &req.instrument_id {
                    Some(id) => Some(
                        self.instruments
                            .get(id)
                            .ok_or_else(|| Error::NotFound(format!("instrument {id}")))?,
                    ),
                    None => matches.first().and_then(|m| self.instruments.get(&m.instrument_id)),
                };
                let mut out = ProknowResult {
                    instruments: matches,
                    instrument_id: chosen.map(|i| i.id.clone()),
                    evidence: None,
                    next_question: None,
                };
                resp.ranking = base
                    .results
                    .iter()
                    .map(|x| RankedDocument {
                        rank: x.rank,
                        document_id: x.document_id.clone(),
                        score: x.score,
                    })
                    .collect();
                if let Some(inst) = chosen {
                    let passages: Vec<RankedPassage> = base
                        .results
                        .iter()
                        .map(|x| RankedPassage {
                            document_id: x.document_id.clone(),
                            rank: x.rank,
                            score: x.score,
                            embedding: snap
                                .corpus
                                .get(&x.document_id)
                                .expect("result comes from the corpus")
                                .base_embedding
                                .clone(),
                        })
                        .collect();
                    let ev = reorder_by_instrument(&passages, inst)?;
                    resp.ranking = ev
                        .entries
                        .iter()
                        .enumerate()
                        .map(|(i, e)| RankedDocument {
                            rank: i + 1,
                            document_id: e.document_id.clone(),
                            score: e.retrieval_score,
                        })
                        .collect();
                    out.next_question = Some(peek_next_question(&eff, inst, vocab));
                    out.evidence = Some(ev);
                }
                resp.mar = Some(base);
                resp.proknow = Some(out);
            }
        }
        resp.context = assemble_context(
            &query_text,
            resp.ranking.iter().map(|r| {
                snap.corpus
                    .get(&r.document_id)
                    .map(|d| d.text.as_str())
                    .unwrap_or_default()
            }),
        );
        Ok(resp)
    }

    /// Reserves the exclusive training slot.
    pub fn begin_training(&self) -> Result<TrainingLease> {
        if self
            .training
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(Error::Conflict("a training job is already running".into()));
        }
        Ok(TrainingLease {
            flag: self.training.clone(),
        })
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::Acquire)
    }

    /// Samples missing negatives, trains on the current snapshot and swaps in
    /// the result. Retrieval keeps serving the old snapshot until the swap.
    pub fn train(
        &self,
        _lease: &TrainingLease,
        labeled: &[LabeledQuery],
        hyper: &TrainHyper,
        overrides: &ConfigOverrides,
    ) -> Result<TrainReport> {
        if !(hyper.learning_rate > 0.0) || hyper.epochs == 0 {
            return Err(Error::usage("training needs a positive learning rate and at least one epoch"));
        }
        let cfg = self.defaults.with_overrides(overrides)?;
        let snap = self.snapshot();
        let vocab = self.vocabulary();
        let sampled = sample_negatives(labeled, &snap.corpus, vocab, &self.kg, self.encoder(), &cfg, hyper.seed)?;
        let enricher = TemplateEnricher {
            label_budget: cfg.label_budget,
        };
        let set = prepare_training_set(
            &sampled.triples,
            &snap.corpus,
            &self.lexicon,
            &self.kg,
            self.encoder(),
            &snap.model,
            &cfg,
            &enricher,
        )?;
        let outcome = train(
            &snap.model,
            &set,
            &TrainParams {
                learning_rate: hyper.learning_rate,
                epochs: hyper.epochs,
                alpha_blend: cfg.alpha_blend,
                beta_loss: cfg.beta_loss,
            },
        )?;
        let model = outcome.model.expect("train returns a model");
        let checksum = model.checksum();
        self.replace_model(model)?;
        Ok(TrainReport {
            triples: sampled.triples.len(),
            sampling_fallbacks: sampled.fallback,
            loss_curve: outcome.loss_curve,
            final_loss: outcome.final_loss,
            initial_accuracy: outcome.initial_accuracy,
            triple_accuracy: outcome.triple_accuracy,
            model_checksum: checksum,
        })
    }
}

struct RefEnricher<'a>(&'a dyn Enricher);

impl Enricher for RefEnricher<'_> {
    fn enrich(&self, original: &str, concepts: &[crate::kgpath::ConceptTerm]) -> Result<crate::kgpath::Enrichment> {
        self.0.enrich(original, concepts)
    }
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

pub fn read_labeled_queries(path: &Path) -> Result<Vec<LabeledQuery>> {
    parse_labeled_queries(&read(path)?)
}

/// Layout of a data directory:
///
/// ```text
/// vocabulary.json   {schema_version, features}
/// lexicon.json      [{pattern, feature_id, is_regex}]
/// kg.json           {schema_version, nodes, edges}
/// encoder.json      encoder spec, used when no corpus store exists
/// model.json        model checkpoint
/// instruments/      one instrument file per questionnaire
/// corpus/           *.txt sources, ingested in memory when store/ is absent
/// store/            persisted corpus (manifest.json + chunks.jsonl)
/// ```
#[derive(Debug, Clone)]
pub struct DataDir {
    root: Option<PathBuf>,
}

impl DataDir {
    pub fn new(root: Option<&Path>) -> Self {
        DataDir {
            root: root.map(Path::to_path_buf),
        }
    }

    pub fn path(&self, rel: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(rel))
    }

    fn existing(&self, rel: &str) -> Option<PathBuf> {
        self.path(rel).filter(|p| p.exists())
    }

    pub fn vocabulary(&self) -> Result<FeatureVocabulary> {
        match self.existing("vocabulary.json") {
            Some(p) => {
                let f: VocabularyFile = serde_json::from_str(&read(&p)?)?;
                Ok(f.features)
            }
            None => demo::vocabulary(),
        }
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        let vocab = self.vocabulary()?;
        match self.existing("lexicon.json") {
            Some(p) => Lexicon::from_json(&read(&p)?, vocab),
            None => Lexicon::from_json(demo::LEXICON_JSON, vocab),
        }
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        if let Some(p) = self.existing("store/manifest.json") {
            let m: crate::corpus::CorpusManifest = serde_json::from_str(&read(&p)?)?;
            return Ok(m.encoder);
        }
        match self.existing("encoder.json") {
            Some(p) => Ok(serde_json::from_str(&read(&p)?)?),
            None => Ok(demo::encoder().spec()),
        }
    }

    pub fn encoder(&self) -> Result<Arc<dyn Encoder>> {
        self.encoder_spec()?.build()
    }

    pub fn model(&self, vocab: &FeatureVocabulary, encoder: &dyn Encoder) -> Result<ModulationModel> {
        match self.existing("model.json") {
            Some(p) => {
                let ck: ModelCheckpoint = serde_json::from_str(&read(&p)?)?;
                ModulationModel::try_from(ck)
            }
            None => concept_aligned_model(vocab, encoder, demo::SENSITIVITY, demo::BETA_DOC),
        }
    }

    pub fn corpus(&self, lexicon: &Lexicon, encoder: &dyn Encoder, model: &ModulationModel) -> Result<Corpus> {
        if let Some(p) = self.existing("store/manifest.json") {
            let dir = p.parent().expect("manifest has a parent");
            return Ok(Corpus::load(dir, lexicon.vocabulary(), model)?.corpus);
        }
        if let Some(p) = self.existing("corpus") {
            let files = text_files(&p)?;
            return Ok(ingest(&files, lexicon, encoder, model, ChunkConfig::default())?.corpus);
        }
        ingest_texts(&demo::sources(), lexicon, encoder, model, ChunkConfig::default())
    }
}

/// `*.txt` files directly under `dir`, sorted.
pub fn text_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    Ok(files)
}
