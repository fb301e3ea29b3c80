//! Shared domain types: embeddings, symbolic features, the modulation model
//! and retrieval configuration.

use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Dense real vector of the corpus-wide dimension.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::usage(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// `self + scale * shift`, entrywise.
    pub(crate) fn shifted(&self, scale: f64, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.0.len() {
            return Err(Error::usage(format!(
                "shift has dimension {}, embedding has {}",
                shift.len(),
                self.0.len()
            )));
        }
        Embedding::new(
            self.0
                .iter()
                .zip(shift)
                .map(|(e, s)| e + scale * s)
                .collect(),
        )
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Result of a cosine similarity evaluation.
///
/// `degenerate` is set when either argument is the zero vector, in which
/// case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<Cosine> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::usage(format!(
            "cosine of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

/// A named symbolic concept with its clinical risk weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub risk_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_node: Option<String>,
}

/// Ordered feature list; position defines the multi-hot index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Feature>", into = "Vec<Feature>")]
pub struct FeatureVocabulary {
    features: Vec<Feature>,
    index: HashMap<String, usize>,
}

impl FeatureVocabulary {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let mut index = HashMap::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            if !(f.risk_weight >= 0.0 && f.risk_weight.is_finite()) {
                return Err(Error::data(format!(
                    "feature {} has invalid risk weight {}",
                    f.id, f.risk_weight
                )));
            }
            if index.insert(f.id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate feature id {}", f.id)));
            }
        }
        Ok(FeatureVocabulary { features, index })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Feature> {
        self.index_of(id).map(|i| &self.features[i])
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn ids(&self) -> Vec<String> {
        self.features.iter().map(|f| f.id.clone()).collect()
    }
}

impl TryFrom<Vec<Feature>> for FeatureVocabulary {
    type Error = Error;

    fn try_from(features: Vec<Feature>) -> Result<Self> {
        FeatureVocabulary::new(features)
    }
}

impl From<FeatureVocabulary> for Vec<Feature> {
    fn from(v: FeatureVocabulary) -> Self {
        v.features
    }
}

/// On-disk vocabulary file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub schema_version: u32,
    pub features: FeatureVocabulary,
}

/// Accumulated set of feature ids with the turn in which each first appeared.
///
/// Iteration order is insertion order; equality ignores order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatureSet", into = "RawFeatureSet")]
pub struct FeatureSet {
    first_seen: IndexMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawFeatureSet {
    features: Vec<String>,
    first_seen: std::collections::BTreeMap<String, usize>,
}

impl TryFrom<RawFeatureSet> for FeatureSet {
    type Error = Error;

    fn try_from(raw: RawFeatureSet) -> Result<Self> {
        let mut first_seen = IndexMap::with_capacity(raw.features.len());
        for id in raw.features {
            let turn = *raw
                .first_seen
                .get(&id)
                .ok_or_else(|| Error::data(format!("feature {id} has no first_seen entry")))?;
            if first_seen.insert(id.clone(), turn).is_some() {
                return Err(Error::data(format!("duplicate feature {id} in set")));
            }
        }
        if first_seen.len() != raw.first_seen.len() {
            return Err(Error::data(
                "first_seen has keys outside the feature list".to_string(),
            ));
        }
        Ok(FeatureSet { first_seen })
    }
}

impl From<FeatureSet> for RawFeatureSet {
    fn from(set: FeatureSet) -> Self {
        RawFeatureSet {
            features: set.first_seen.keys().cloned().collect(),
            first_seen: set.first_seen.into_iter().collect(),
        }
    }
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set where every feature was first seen at `turn`.
    pub fn from_ids<I, S>(ids: I, turn: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = FeatureSet::new();
        for id in ids {
            set.insert(id.into(), turn);
        }
        set
    }

    /// Inserts `id` unless already present; returns whether it was new.
    pub fn insert(&mut self, id: String, turn: usize) -> bool {
        if self.first_seen.contains_key(&id) {
            return false;
        }
        self.first_seen.insert(id, turn);
        true
    }

    pub fn contains(&self, id: &str) -> bool {
        self.first_seen.contains_key(id)
    }

    pub fn first_seen(&self, id: &str) -> Option<usize> {
        self.first_seen.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.first_seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_seen.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.first_seen.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.first_seen.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn is_superset(&self, other: &FeatureSet) -> bool {
        other.ids().all(|id| self.contains(id))
    }

    /// Ids present in both sets, in `self`'s order.
    pub fn intersection(&self, other: &FeatureSet) -> Vec<String> {
        self.ids()
            .filter(|id| other.contains(id))
            .map(str::to_string)
            .collect()
    }

    pub fn max_turn(&self) -> Option<usize> {
        self.first_seen.values().copied().max()
    }
}

/// Encodes `phi` as a 0/1 vector over `vocab`.
pub fn multi_hot(phi: &FeatureSet, vocab: &FeatureVocabulary) -> Result<Vec<f64>> {
    let mut out = vec![0.0; vocab.len()];
    let mut unknown = Vec::new();
    for id in phi.ids() {
        match vocab.index_of(id) {
            Some(i) => out[i] = 1.0,
            None => unknown.push(id.to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::usage(format!(
            "features not in vocabulary: {}",
            unknown.join(", ")
        )));
    }
    Ok(out)
}

/// Trainable projection matrices plus the modulation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelCheckpoint", into = "ModelCheckpoint")]
pub struct ModulationModel {
    pub w_q: Array2<f64>,
    pub w_d: Array2<f64>,
    pub sensitivity: f64,
    pub beta_doc: f64,
}

/// JSON checkpoint layout for [`ModulationModel`]; matrices are row-major
/// nested arrays of shape D×M.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub schema_version: u32,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "W_q")]
    pub w_q: Vec<Vec<f64>>,
    #[serde(rename = "W_d")]
    pub w_d: Vec<Vec<f64>>,
    pub sensitivity: f64,
    pub beta_doc: f64,
}

fn matrix_from_rows(rows: &[Vec<f64>], d: usize, m: usize, name: &str) -> Result<Array2<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != m) {
        return Err(Error::data(format!("{name} is not {d}x{m}")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((d, m), flat).map_err(|e| Error::data(format!("{name}: {e}")))
}

fn matrix_rows(w: &Array2<f64>) -> Vec<Vec<f64>> {
    w.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl TryFrom<ModelCheckpoint> for ModulationModel {
    type Error = Error;

    fn try_from(c: ModelCheckpoint) -> Result<Self> {
        let w_q = matrix_from_rows(&c.w_q, c.d, c.m, "W_q")?;
        let w_d = matrix_from_rows(&c.w_d, c.d, c.m, "W_d")?;
        ModulationModel::new(w_q, w_d, c.sensitivity, c.beta_doc)
    }
}

impl From<ModulationModel> for ModelCheckpoint {
    fn from(m: ModulationModel) -> Self {
        m.checkpoint()
    }
}

impl ModulationModel {
    pub fn new(w_q: Array2<f64>, w_d: Array2<f64>, sensitivity: f64, beta_doc: f64) -> Result<Self> {
        if w_q.dim() != w_d.dim() {
            return Err(Error::usage(format!(
                "W_q is {:?} but W_d is {:?}",
                w_q.dim(),
                w_d.dim()
            )));
        }
        if w_q.iter().chain(w_d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::usage("modulation matrices contain non-finite entries"));
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(Error::usage(format!("sensitivity must be positive, got {sensitivity}")));
        }
        if !(0.0..=1.0).contains(&beta_doc) {
            return Err(Error::usage(format!("beta_doc must be in [0,1], got {beta_doc}")));
        }
        Ok(ModulationModel {
            w_q,
            w_d,
            sensitivity,
            beta_doc,
        })
    }

    pub fn zeros(d: usize, m: usize, sensitivity: f64, beta_doc: f64) -> Result<Self> {
        Self::new(Array2::zeros((d, m)), Array2::zeros((d, m)), sensitivity, beta_doc)
    }

    /// Gaussian initialization with standard deviation `scale`.
    pub fn random_init(
        d: usize,
        m: usize,
        scale: f64,
        seed: u64,
        sensitivity: f64,
        beta_doc: f64,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, scale)
            .map_err(|e| Error::usage(format!("invalid init scale {scale}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_q = Array2::from_shape_fn((d, m), |_| normal.sample(&mut rng));
        let w_d = Array2::from_shape_fn((d, m), |_| normal.sample(&mut rng));
        Self::new(w_q, w_d, sensitivity, beta_doc)
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            schema_version: SCHEMA_VERSION,
            d: self.dim(),
            m: self.vocab_size(),
            w_q: matrix_rows(&self.w_q),
            w_d: matrix_rows(&self.w_d),
            sensitivity: self.sensitivity,
            beta_doc: self.beta_doc,
        }
    }

    /// Hex SHA-256 of the canonical checkpoint JSON.
    pub fn checksum(&self) -> String {
        let bytes = serde_json::to_vec(&self.checkpoint()).expect("checkpoint serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub(crate) fn check_shape(&self, dim: usize, vocab: usize) -> Result<()> {
        if self.dim() != dim || self.vocab_size() != vocab {
            return Err(Error::usage(format!(
                "model is {}x{}, expected {dim}x{vocab}",
                self.dim(),
                self.vocab_size()
            )));
        }
        Ok(())
    }
}

pub(crate) fn mat_vec(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    w.dot(&Array1::from(x.to_vec())).to_vec()
}

/// Retrieval and training knobs shared by all retrieval modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub top_k: usize,
    /// Cosine threshold for mapping a query onto KG nodes.
    pub tau: f64,
    /// Traversal depth for neighborhood gathering.
    pub hops: usize,
    /// Weight of the cosine term in the blended graph score.
    pub alpha_blend: f64,
    /// PageRank propagation weight; the teleport mass is `1 - gamma`.
    pub gamma: f64,
    /// Weight of the graph-rank loss in the joint objective.
    pub beta_loss: f64,
    /// Maximum number of concept labels appended by the template enricher.
    pub label_budget: usize,
    /// Minimum hop distance for graph-guided negatives.
    pub negative_min_hops: usize,
    pub pagerank_tolerance: f64,
    pub pagerank_max_iter: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            top_k: 5,
            tau: 0.35,
            hops: 2,
            alpha_blend: 0.7,
            gamma: 0.15,
            beta_loss: 0.40,
            label_budget: 8,
            negative_min_hops: 3,
            pagerank_tolerance: 1e-12,
            pagerank_max_iter: 1000,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::usage(m));
        if self.top_k == 0 {
            return fail("top_k must be positive".into());
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must be in [-1,1], got {}", self.tau));
        }
        if self.hops == 0 {
            return fail("hops must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha_blend) {
            return fail(format!("alpha_blend must be in [0,1], got {}", self.alpha_blend));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma must be in (0,1), got {}", self.gamma));
        }
        if !(self.beta_loss >= 0.0 && self.beta_loss.is_finite()) {
            return fail(format!("beta_loss must be non-negative, got {}", self.beta_loss));
        }
        if !(self.pagerank_tolerance > 0.0) || self.pagerank_max_iter == 0 {
            return fail("pagerank tolerance and max_iter must be positive".into());
        }
        Ok(())
    }

    pub fn with_overrides(&self, o: &ConfigOverrides) -> Result<RetrievalConfig> {
        let mut cfg = self.clone();
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { cfg.$f = v; } )* };
        }
        take!(
            top_k,
            tau,
            hops,
            alpha_blend,
            gamma,
            beta_loss,
            label_budget,
            negative_min_hops,
            pagerank_tolerance,
            pagerank_max_iter
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Partial configuration; `None` fields fall through to the base layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub top_k: Option<usize>,
    pub tau: Option<f64>,
    pub hops: Option<usize>,
    pub alpha_blend: Option<f64>,
    pub gamma: Option<f64>,
    pub beta_loss: Option<f64>,
    pub label_budget: Option<usize>,
    pub negative_min_hops: Option<usize>,
    pub pagerank_tolerance: Option<f64>,
    pub pagerank_max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub file: String,
    /// Byte offset of the chunk within the source file.
    pub offset: usize,
}

/// An ingested text chunk with its symbolic annotation and embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source_ref: SourceRef,
    pub text: String,
    pub phi_d: FeatureSet,
    pub base_embedding: Embedding,
    pub modulated_embedding: Embedding,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn vocab(ids: &[&str]) -> FeatureVocabulary {
        FeatureVocabulary::new(
            ids.iter()
                .map(|id| Feature {
                    id: id.to_string(),
                    label: id.replace('_', " "),
                    risk_weight: 0.0,
                    kg_node: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_identity_and_orthogonality() {
        let v = emb(&[0.3, -1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap().value, 0.0);
    }

    #[test]
    fn cosine_matches_scalar_loop() {
        // independent evaluation: 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine(&emb(&[1.0, 2.0, 3.0]), &emb(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got.value - expected).abs() < 1e-15);
        assert!((expected - 0.974_631_846_197_076_2).abs() < 1e-15);
        assert!(!got.degenerate);
    }

    #[test]
    fn cosine_zero_vector_is_flagged() {
        let c = cosine(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        assert!(matches!(
            cosine(&emb(&[1.0]), &emb(&[1.0, 2.0])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn non_finite_embedding_rejected() {
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(serde_json::from_str::<Embedding>("[1.0, 2.0]").is_ok());
    }

    #[test]
    fn multi_hot_cases() {
        let v = vocab(&["f0", "f1", "f2"]);
        assert_eq!(multi_hot(&FeatureSet::new(), &v).unwrap(), vec![0.0; 3]);
        assert_eq!(
            multi_hot(&FeatureSet::from_ids(["f0"], 1), &v).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        let err = multi_hot(&FeatureSet::from_ids(["f0", "zz"], 1), &v).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn multi_hot_vignette_six_features() {
        let ids = [
            "depressed_mood",
            "anhedonia",
            "chronic_insomnia",
            "rumination",
            "ACE_disclosure",
            "childhood_abuse",
        ];
        let v = vocab(&ids);
        let phi = FeatureSet::from_ids(ids, 1);
        assert_eq!(multi_hot(&phi, &v).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn feature_set_rejects_inconsistent_json() {
        let bad = r#"{"features":["a"],"first_seen":{"a":1,"b":2}}"#;
        assert!(serde_json::from_str::<FeatureSet>(bad).is_err());
        let missing = r#"{"features":["a","b"],"first_seen":{"a":1}}"#;
        assert!(serde_json::from_str::<FeatureSet>(missing).is_err());
    }

    #[test]
    fn checkpoint_field_names() {
        let m = ModulationModel::zeros(2, 3, 0.5, 1.0).unwrap();
        let json = serde_json::to_value(&m).unwrap();
        for key in ["schema_version", "D", "M", "W_q", "W_d", "sensitivity", "beta_doc"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["W_q"].as_array().unwrap().len(), 2);
        let back: ModulationModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let json = r#"{"schema_version":1,"D":2,"M":1,"W_q":[[1.0]],"W_d":[[1.0],[2.0]],"sensitivity":1.0,"beta_doc":0.5}"#;
        assert!(serde_json::from_str::<ModulationModel>(json).is_err());
    }

    #[test]
    fn config_overrides_layer_and_validate() {
        let base = RetrievalConfig::default();
        assert_eq!(base.gamma, 0.15);
        assert_eq!(base.beta_loss, 0.40);
        let o = ConfigOverrides {
            top_k: Some(3),
            ..Default::default()
        };
        assert_eq!(base.with_overrides(&o).unwrap().top_k, 3);
        let bad = ConfigOverrides {
            gamma: Some(1.0),
            ..Default::default()
        };
        assert!(base.with_overrides(&bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn nonzero_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0f64..10.0, n)
                .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
        }

        proptest! {
            #[test]
            fn cosine_is_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), c in 1e-3f64..1e3) {
                let ea = emb(&a);
                let eb = emb(&b);
                let scaled = emb(&a.iter().map(|x| x * c).collect::<Vec<_>>());
                let base = cosine(&ea, &eb).unwrap().value;
                prop_assert!((cosine(&scaled, &eb).unwrap().value - base).abs() < 1e-12);
                prop_assert!((cosine(&eb, &ea).unwrap().value - base).abs() < 1e-15);
            }

            #[test]
            fn multi_hot_is_injective(x in prop::collection::btree_set(0usize..5, 0..5),
                                      y in prop::collection::btree_set(0usize..5, 0..5)) {
                let v = vocab(&["a", "b", "c", "d", "e"]);
                let ids = v.ids();
                let sx = FeatureSet::from_ids(x.iter().map(|i| ids[*i].clone()), 1);
                let sy = FeatureSet::from_ids(y.iter().map(|i| ids[*i].clone()), 1);
                let hx = multi_hot(&sx, &v).unwrap();
                let hy = multi_hot(&sy, &v).unwrap();
                prop_assert_eq!(hx == hy, x == y);
            }

            #[test]
            fn feature_set_json_round_trip(ids in prop::collection::vec("[a-z]{1,6}", 0..8),
                                           turns in prop::collection::vec(0usize..10, 8)) {
                let mut set = FeatureSet::new();
                for (id, t) in ids.into_iter().zip(turns) {
                    set.insert(id, t);
                }
                let back: FeatureSet = serde_json::from_str(&serde_json::to_string(&set).unwrap()).unwrap();
                prop_assert_eq!(back, set);
            }

            #[test]
            fn model_json_round_trip(d in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
                let model = ModulationModel::random_init(d, m, 0.3, seed, 0.5, 0.8).unwrap();
                let back: ModulationModel = serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
                prop_assert_eq!(back, model);
            }
        }
    }
}
