//! Document ingestion, persistence and exact top-k scanning.
//!
//! A persisted corpus is a directory holding `manifest.json` and
//! `chunks.jsonl` (one [`Document`] per line).

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::features::{extract_features, Lexicon};
use crate::mar::modulate_document;
use crate::types::{Document, FeatureVocabulary, ModulationModel, SourceRef, SCHEMA_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHUNKS_FILE: &str = "chunks.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    /// Words per chunk.
    pub window: usize,
    /// Words shared by consecutive chunks.
    pub overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            window: 200,
            overlap: 40,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.overlap >= self.window {
            return Err(Error::usage(format!(
                "chunk window {} must be positive and larger than overlap {}",
                self.window, self.overlap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub ordinal: usize,
    /// Byte offset of the first word in the source.
    pub offset: usize,
    pub text: String,
}

/// Splits `text` into overlapping word windows. Chunk text is the verbatim
/// source slice from the first to the last word of the window.
pub fn chunk_text(text: &str, cfg: ChunkConfig) -> Result<Vec<Chunk>> {
    cfg.validate()?;
    let words: Vec<(usize, usize)> = word_spans(text);
    let mut chunks = Vec::new();
    if words.is_empty() {
        return Ok(chunks);
    }
    let stride = cfg.window - cfg.overlap;
    let mut start = 0;
    loop {
        let end = (start + cfg.window).min(words.len());
        let (from, _) = words[start];
        let (_, to) = words[end - 1];
        chunks.push(Chunk {
            ordinal: chunks.len(),
            offset: from,
            text: text[from..to].to_string(),
        });
        if end == words.len() {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub dimension: usize,
    /// Feature ids in multi-hot order.
    pub vocabulary: Vec<String>,
    pub encoder: EncoderSpec,
    pub model_checksum: String,
    pub chunking: ChunkConfig,
    pub document_count: usize,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    manifest: CorpusManifest,
    documents: Vec<Document>,
}

/// A named source text handed to ingestion.
#[derive(Debug, Clone)]
pub struct SourceText {
    /// Stable name; document ids are `<name>#<ordinal>`.
    pub name: String,
    pub file: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileError {
    pub path: String,
    pub message: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub corpus: Corpus,
    pub errors: Vec<FileError>,
}

/// Reads, chunks, annotates, embeds and modulates `paths`. Unreadable files
/// are reported and skipped.
pub fn ingest(
    paths: &[PathBuf],
    lexicon: &Lexicon,
    encoder: &dyn Encoder,
    model: &ModulationModel,
    chunking: ChunkConfig,
) -> Result<IngestReport> {
    let mut sources = Vec::new();
    let mut errors = Vec::new();
    for p in paths {
        match fs::read_to_string(p) {
            Ok(text) => sources.push(SourceText {
                name: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string()),
                file: p
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string()),
                text,
            }),
            Err(e) => errors.push(FileError {
                path: p.display().to_string(),
                message: e.to_string(),
            }),
        }
    }
    let corpus = ingest_texts(&sources, lexicon, encoder, model, chunking)?;
    Ok(IngestReport { corpus, errors })
}

pub fn ingest_texts(
    sources: &[SourceText],
    lexicon: &Lexicon,
    encoder: &dyn Encoder,
    model: &ModulationModel,
    chunking: ChunkConfig,
) -> Result<Corpus> {
    let vocab = lexicon.vocabulary();
    model.check_shape(encoder.dimension(), vocab.len())?;
    let mut seen = HashSet::new();
    let mut documents = Vec::new();
    for src in sources {
        for chunk in chunk_text(&src.text, chunking)? {
            let id = format!("{}#{}", src.name, chunk.ordinal);
            if !seen.insert(id.clone()) {
                return Err(Error::data(format!("duplicate document id {id}")));
            }
            let phi_d = extract_features(&chunk.text, lexicon);
            let base = encoder.encode(&chunk.text)?;
            let modulated = modulate_document(&base, &phi_d, vocab, model)?;
            documents.push(Document {
                id,
                source_ref: SourceRef {
                    file: src.file.clone(),
                    offset: chunk.offset,
                },
                text: chunk.text,
                phi_d,
                base_embedding: base,
                modulated_embedding: modulated,
            });
        }
    }
    let manifest = CorpusManifest {
        schema_version: SCHEMA_VERSION,
        dimension: encoder.dimension(),
        vocabulary: vocab.ids(),
        encoder: encoder.spec(),
        model_checksum: model.checksum(),
        chunking,
        document_count: documents.len(),
        sources: sources.iter().map(|s| s.file.clone()).collect(),
    };
    Ok(Corpus {
        manifest,
        documents,
    })
}

#[derive(Debug)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    /// Set when the stored model checksum differed and embeddings were recomputed.
    pub remodulated: bool,
}

impl Corpus {
    /// Builds a corpus from already-embedded documents.
    pub fn from_documents(
        documents: Vec<Document>,
        vocab: &FeatureVocabulary,
        encoder: EncoderSpec,
        model: &ModulationModel,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::data(format!("duplicate document id {}", d.id)));
            }
            if d.base_embedding.dim() != encoder.dimension() || d.modulated_embedding.dim() != encoder.dimension() {
                return Err(Error::data(format!("document {} has the wrong dimension", d.id)));
            }
        }
        Ok(Corpus {
            manifest: CorpusManifest {
                schema_version: SCHEMA_VERSION,
                dimension: encoder.dimension(),
                vocabulary: vocab.ids(),
                encoder,
                model_checksum: model.checksum(),
                chunking: ChunkConfig::default(),
                document_count: documents.len(),
                sources: Vec::new(),
            },
            documents,
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.id == id)
    }

    /// Recomputes every modulated embedding under `model`.
    pub fn remodulate(&self, vocab: &FeatureVocabulary, model: &ModulationModel) -> Result<Corpus> {
        let mut documents = self.documents.clone();
        for d in &mut documents {
            d.modulated_embedding = modulate_document(&d.base_embedding, &d.phi_d, vocab, model)?;
        }
        let mut manifest = self.manifest.clone();
        manifest.model_checksum = model.checksum();
        Ok(Corpus {
            manifest,
            documents,
        })
    }

    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest = serde_json::to_string_pretty(&self.manifest)?;
        manifest.push('\n');
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
        let mut lines = String::new();
        for d in &self.documents {
            lines.push_str(&serde_json::to_string(d)?);
            lines.push('\n');
        }
        let chunks_path = dir.join(CHUNKS_FILE);
        fs::write(&chunks_path, lines).map_err(|e| Error::io(&chunks_path, e))
    }

    /// Loads a persisted corpus, re-modulating when `model` differs from the
    /// one recorded in the manifest.
    pub fn load(dir: impl AsRef<Path>, vocab: &FeatureVocabulary, model: &ModulationModel) -> Result<LoadedCorpus> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&raw)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::data(format!(
                "unsupported corpus schema version {}",
                manifest.schema_version
            )));
        }
        if manifest.vocabulary != vocab.ids() {
            return Err(Error::data(
                "corpus was built with a different feature vocabulary; re-ingest".to_string(),
            ));
        }
        model.check_shape(manifest.dimension, vocab.len())?;
        let chunks_path = dir.join(CHUNKS_FILE);
        let raw = fs::read_to_string(&chunks_path).map_err(|e| Error::io(&chunks_path, e))?;
        let mut documents = Vec::new();
        for (n, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let doc: Document = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", chunks_path.display(), n + 1)))?;
            if doc.base_embedding.dim() != manifest.dimension {
                return Err(Error::data(format!("document {} has the wrong dimension", doc.id)));
            }
            documents.push(doc);
        }
        if documents.len() != manifest.document_count {
            return Err(Error::data(format!(
                "manifest lists {} documents, found {}",
                manifest.document_count,
                documents.len()
            )));
        }
        let corpus = Corpus {
            manifest,
            documents,
        };
        if corpus.manifest.model_checksum == model.checksum() {
            Ok(LoadedCorpus {
                corpus,
                remodulated: false,
            })
        } else {
            Ok(LoadedCorpus {
                corpus: corpus.remodulate(vocab, model)?,
                remodulated: true,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopK {
    pub hits: Vec<Hit>,
    /// Set when `k` exceeded the number of documents.
    pub truncated: bool,
}

struct Candidate<'a> {
    score: f64,
    index: usize,
    id: &'a str,
}

impl Candidate<'_> {
    /// `Greater` means ranked earlier: higher score, then smaller id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Exact scan keeping the `k` best documents by descending score, ties
/// broken by ascending id.
pub fn scan_top_k<F>(documents: &[Document], k: usize, mut score: F) -> Result<TopK>
where
    F: FnMut(&Document) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    let mut heap: BinaryHeap<Reverse<Candidate<'_>>> = BinaryHeap::with_capacity(k + 1);
    for (index, d) in documents.iter().enumerate() {
        let s = score(d)?;
        if !s.is_finite() {
            return Err(Error::data(format!("document {} scored {s}", d.id)));
        }
        heap.push(Reverse(Candidate {
            score: s,
            index,
            id: &d.id,
        }));
        if heap.len() > k {
            heap.pop();
        }
    }
    // ascending Reverse order == descending rank
    let hits = heap
        .into_sorted_vec()
        .into_iter()
        .map(|Reverse(c)| Hit {
            index: c.index,
            id: c.id.to_string(),
            score: c.score,
        })
        .collect();
    Ok(TopK {
        hits,
        truncated: k > documents.len(),
    })
}
