//! Bundled demonstration data: a small mental-health vocabulary, lexicon,
//! knowledge graph, two screening instruments and a 20-document corpus.

use std::fs;
use std::path::Path;

use crate::corpus::{ingest_texts, ChunkConfig, Corpus, SourceText};
use crate::encoder::{Encoder, HashEncoder};
use crate::error::{Error, Result};
use crate::features::Lexicon;
use crate::kg::KnowledgeGraph;
use crate::mar::concept_aligned_model;
use crate::proknow::{Instrument, InstrumentRegistry};
use crate::types::{FeatureVocabulary, ModulationModel, VocabularyFile};

pub const DIMENSION: usize = 256;
pub const SEED: u64 = 42;
pub const SENSITIVITY: f64 = 0.5;
pub const BETA_DOC: f64 = 1.0;

pub const VOCABULARY_JSON: &str = include_str!("../data/demo/vocabulary.json");
pub const LEXICON_JSON: &str = include_str!("../data/demo/lexicon.json");
pub const KG_JSON: &str = include_str!("../data/demo/kg.json");
pub const INSTRUMENTS: [(&str, &str); 2] = [
    ("anxiety.json", include_str!("../data/demo/instruments/anxiety.json")),
    ("depression.json", include_str!("../data/demo/instruments/depression.json")),
];

macro_rules! corpus_files {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../data/demo/corpus/", $name, ".txt")))),*]
    };
}

/// `(name, text)` for every demo document, sorted by name.
pub const CORPUS: &[(&str, &str)] = corpus_files!(
    "ace_questionnaire",
    "anhedonia_measurement",
    "anxiety_psychoeducation",
    "behavioural_activation",
    "childhood_abuse_disclosure",
    "clinic_intake_logistics",
    "fatigue_assessment",
    "generalized_anxiety_overview",
    "hyperarousal_regulation",
    "insomnia_cbt",
    "mdd_criteria_overview",
    "medication_review",
    "panic_and_worry_cycle",
    "panic_disorder_treatment",
    "rumination_focused_therapy",
    "sleep_and_mood",
    "sleep_diary_guide",
    "trauma_focused_therapy",
    "trauma_integrated_assessment",
    "worry_postponement",
);

/// The three patient turns of the reference conversation.
pub const VIGNETTE: [&str; 3] = [
    "I've been feeling really down lately",
    "Nothing seems fun anymore",
    "I can't sleep. I lie awake thinking about my dad's temper when I was a kid",
];

pub const TRAUMA_DOCUMENT: &str = "trauma_integrated_assessment#0";

pub fn encoder() -> HashEncoder {
    HashEncoder::new(DIMENSION, SEED).expect("positive dimension")
}

pub fn vocabulary() -> Result<FeatureVocabulary> {
    let file: VocabularyFile = serde_json::from_str(VOCABULARY_JSON)?;
    Ok(file.features)
}

pub fn lexicon() -> Result<Lexicon> {
    Lexicon::from_json(LEXICON_JSON, vocabulary()?)
}

pub fn knowledge_graph(encoder: &dyn Encoder) -> Result<KnowledgeGraph> {
    KnowledgeGraph::from_json(KG_JSON, Some(encoder))
}

pub fn instruments(encoder: &dyn Encoder, kg: &KnowledgeGraph) -> Result<InstrumentRegistry> {
    let list = INSTRUMENTS
        .iter()
        .map(|(_, raw)| Instrument::from_json(raw, encoder, kg))
        .collect::<Result<Vec<_>>>()?;
    InstrumentRegistry::new(list)
}

pub fn model(vocab: &FeatureVocabulary, encoder: &dyn Encoder) -> Result<ModulationModel> {
    concept_aligned_model(vocab, encoder, SENSITIVITY, BETA_DOC)
}

pub fn sources() -> Vec<SourceText> {
    CORPUS
        .iter()
        .map(|(name, text)| SourceText {
            name: name.to_string(),
            file: format!("{name}.txt"),
            text: text.to_string(),
        })
        .collect()
}

pub struct Demo {
    pub encoder: HashEncoder,
    pub lexicon: Lexicon,
    pub kg: KnowledgeGraph,
    pub instruments: InstrumentRegistry,
    pub model: ModulationModel,
    pub corpus: Corpus,
}

impl Demo {
    pub fn vocabulary(&self) -> &FeatureVocabulary {
        self.lexicon.vocabulary()
    }
}

pub fn load() -> Result<Demo> {
    let encoder = encoder();
    let lexicon = lexicon()?;
    let kg = knowledge_graph(&encoder)?;
    let instruments = instruments(&encoder, &kg)?;
    let model = model(lexicon.vocabulary(), &encoder)?;
    let corpus = ingest_texts(&sources(), &lexicon, &encoder, &model, ChunkConfig::default())?;
    Ok(Demo {
        encoder,
        lexicon,
        kg,
        instruments,
        model,
        corpus,
    })
}

/// Writes the bundled files under `dir` as `vocabulary.json`, `lexicon.json`,
/// `kg.json`, `instruments/*.json` and `corpus/*.txt`.
pub fn write_files(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let put = |rel: &str, body: &str| -> Result<()> {
        let p = dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    put("vocabulary.json", VOCABULARY_JSON)?;
    put("lexicon.json", LEXICON_JSON)?;
    put("kg.json", KG_JSON)?;
    for (name, raw) in INSTRUMENTS {
        put(&format!("instruments/{name}"), raw)?;
    }
    for (name, text) in CORPUS {
        put(&format!("corpus/{name}.txt"), text)?;
    }
    Ok(())
}
