//! Lexicon-driven symbolic feature extraction and per-session accumulation.
//!
//! Matching is purely lexical; negated mentions ("I don't feel down") still
//! match.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::types::{FeatureSet, FeatureVocabulary};

/// One row of a lexicon file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub pattern: String,
    pub feature_id: String,
    #[serde(default)]
    pub is_regex: bool,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    compiled: Vec<Regex>,
    vocabulary: FeatureVocabulary,
}

impl Lexicon {
    /// Compiles `entries`; plain patterns match case-insensitively on word
    /// boundaries, regex patterns are compiled case-insensitively as given.
    pub fn new(entries: Vec<LexiconEntry>, vocabulary: FeatureVocabulary) -> Result<Self> {
        let mut compiled = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if vocabulary.index_of(&e.feature_id).is_none() {
                return Err(Error::data(format!(
                    "lexicon entry {i} maps to unknown feature {}",
                    e.feature_id
                )));
            }
            let source = if e.is_regex {
                format!("(?i){}", e.pattern)
            } else {
                let words: Vec<String> = e.pattern.split_whitespace().map(regex::escape).collect();
                if words.is_empty() {
                    return Err(Error::data(format!("lexicon entry {i} has an empty pattern")));
                }
                format!(r"(?i)\b{}\b", words.join(r"\s+"))
            };
            let re = Regex::new(&source)
                .map_err(|err| Error::data(format!("lexicon entry {i} ({}): {err}", e.pattern)))?;
            compiled.push(re);
        }
        Ok(Lexicon {
            entries,
            compiled,
            vocabulary,
        })
    }

    pub fn from_json(json: &str, vocabulary: FeatureVocabulary) -> Result<Self> {
        let entries: Vec<LexiconEntry> = serde_json::from_str(json)?;
        Self::new(entries, vocabulary)
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn vocabulary(&self) -> &FeatureVocabulary {
        &self.vocabulary
    }
}

/// Features whose patterns occur in `text`, in vocabulary order, all marked
/// as first seen at turn 0.
pub fn extract_features(text: &str, lexicon: &Lexicon) -> FeatureSet {
    let hits: BTreeSet<usize> = lexicon
        .entries
        .iter()
        .zip(&lexicon.compiled)
        .filter(|(_, re)| re.is_match(text))
        .filter_map(|(e, _)| lexicon.vocabulary.index_of(&e.feature_id))
        .collect();
    let features = lexicon.vocabulary.features();
    FeatureSet::from_ids(hits.into_iter().map(|i| features[i].id.clone()), 0)
}

/// `prev ∪ new`; features new to `prev` are stamped with `turn`.
pub fn accumulate(prev: &FeatureSet, new: &FeatureSet, turn: usize) -> FeatureSet {
    let mut out = prev.clone();
    for id in new.ids() {
        out.insert(id.to_string(), turn);
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    /// Number of distinct features.
    pub count: f64,
    /// Sum of KG edge weights over unordered feature pairs.
    pub connectivity: f64,
    /// Sum of feature risk weights.
    pub risk: f64,
    pub total: f64,
}

/// `|phi| + sum_{i<j} w_ij + sum_i r_i`.
///
/// `w_ij` is the largest edge weight between the two features' KG nodes in
/// either direction; features without a KG node contribute no pair weight.
/// Two distinct features anchored on the same node use that node's self-loop
/// weight, if any.
pub fn complexity(phi: &FeatureSet, vocab: &FeatureVocabulary, kg: &KnowledgeGraph) -> Result<Complexity> {
    let mut nodes = Vec::with_capacity(phi.len());
    let mut risk = 0.0;
    for id in phi.ids() {
        let f = vocab
            .get(id)
            .ok_or_else(|| Error::usage(format!("feature {id} is not in the vocabulary")))?;
        if let Some(node) = &f.kg_node {
            if !kg.contains(node) {
                return Err(Error::usage(format!(
                    "feature {id} references missing KG node {node}"
                )));
            }
        }
        nodes.push(f.kg_node.as_deref());
        risk += f.risk_weight;
    }
    let mut connectivity = 0.0;
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            if let (Some(a), Some(b)) = (nodes[i], nodes[j]) {
                connectivity += kg.pair_weight(a, b);
            }
        }
    }
    let count = phi.len() as f64;
    Ok(Complexity {
        count,
        connectivity,
        risk,
        total: count + connectivity + risk,
    })
}

/// `sigmoid(sensitivity * c)`.
pub fn modulation_strength(c: f64, sensitivity: f64) -> f64 {
    let z = sensitivity * c;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub turn: usize,
    pub speaker: String,
    pub text: String,
}

/// What one turn added to a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnUpdate {
    pub turn: usize,
    pub new_features: Vec<String>,
    pub phi: FeatureSet,
    pub complexity: Complexity,
    pub alpha: f64,
}

/// Conversation state: transcript, accumulated features and the modulation
/// strength after every turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub turn_index: usize,
    pub phi: FeatureSet,
    pub transcript: Vec<Turn>,
    pub alpha_history: Vec<f64>,
    /// Instrument id -> item indices already asked.
    #[serde(default)]
    pub asked_items: BTreeMap<String, BTreeSet<usize>>,
}

impl SessionState {
    pub fn new(id: impl Into<String>) -> Self {
        SessionState {
            id: id.into(),
            turn_index: 0,
            phi: FeatureSet::new(),
            transcript: Vec::new(),
            alpha_history: Vec::new(),
            asked_items: BTreeMap::new(),
        }
    }

    pub fn latest_text(&self) -> Option<&str> {
        self.transcript.last().map(|t| t.text.as_str())
    }

    /// Appends a turn, extracting and accumulating its features.
    pub fn add_turn(
        &mut self,
        speaker: &str,
        text: &str,
        lexicon: &Lexicon,
        kg: &KnowledgeGraph,
        sensitivity: f64,
    ) -> Result<TurnUpdate> {
        let turn = self.turn_index + 1;
        let extracted = extract_features(text, lexicon);
        let new_features: Vec<String> = extracted
            .ids()
            .filter(|id| !self.phi.contains(id))
            .map(str::to_string)
            .collect();
        let phi = accumulate(&self.phi, &extracted, turn);
        let c = complexity(&phi, lexicon.vocabulary(), kg)?;
        let alpha = modulation_strength(c.total, sensitivity);
        self.phi = phi;
        self.turn_index = turn;
        self.transcript.push(Turn {
            turn,
            speaker: speaker.to_string(),
            text: text.to_string(),
        });
        self.alpha_history.push(alpha);
        Ok(TurnUpdate {
            turn,
            new_features,
            phi: self.phi.clone(),
            complexity: c,
            alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Edge, Node};
    use crate::types::{Embedding, Feature};

    fn vocab() -> FeatureVocabulary {
        let f = |id: &str, r: f64, node: Option<&str>| Feature {
            id: id.into(),
            label: id.into(),
            risk_weight: r,
            kg_node: node.map(String::from),
        };
        FeatureVocabulary::new(vec![
            f("low_mood", 0.5, Some("dep")),
            f("no_sleep", 0.25, Some("sleep")),
            f("loner", 0.0, None),
            f("shared", 1.0, Some("dep")),
        ])
        .unwrap()
    }

    fn kg() -> KnowledgeGraph {
        let n = |id: &str| Node {
            id: id.into(),
            label: id.into(),
            description: None,
            embedding: Embedding::new(vec![1.0]).unwrap(),
        };
        KnowledgeGraph::new(
            vec![n("dep"), n("sleep")],
            vec![Edge {
                src: "sleep".into(),
                dst: "dep".into(),
                relation: "maintains".into(),
                weight: 0.75,
                directed: true,
            }],
        )
        .unwrap()
    }

    fn lexicon() -> Lexicon {
        let e = |p: &str, f: &str, re: bool| LexiconEntry {
            pattern: p.into(),
            feature_id: f.into(),
            is_regex: re,
        };
        Lexicon::new(
            vec![
                e("feeling down", "low_mood", false),
                e(r"can'?t\s+sleep", "no_sleep", true),
                e("alone", "loner", false),
            ],
            vocab(),
        )
        .unwrap()
    }

    #[test]
    fn extraction_is_case_insensitive_and_word_bounded() {
        let lex = lexicon();
        let got = extract_features("Feeling   DOWN and I CANT sleep", &lex);
        assert_eq!(got.ids().collect::<Vec<_>>(), vec!["low_mood", "no_sleep"]);
        assert!(extract_features("standalone", &lex).is_empty());
        assert!(extract_features("", &lex).is_empty());
    }

    #[test]
    fn lexicon_rejects_unknown_feature_and_bad_regex() {
        let bad = vec![LexiconEntry { pattern: "x".into(), feature_id: "nope".into(), is_regex: false }];
        assert!(Lexicon::new(bad, vocab()).is_err());
        let bad_re = vec![LexiconEntry { pattern: "(".into(), feature_id: "loner".into(), is_regex: true }];
        assert!(Lexicon::new(bad_re, vocab()).is_err());
    }

    #[test]
    fn accumulate_preserves_first_seen() {
        let s1 = FeatureSet::from_ids(["low_mood"], 1);
        let s2 = accumulate(&s1, &FeatureSet::from_ids(["low_mood", "no_sleep"], 0), 2);
        assert_eq!(s2.first_seen("low_mood"), Some(1));
        assert_eq!(s2.first_seen("no_sleep"), Some(2));
        assert_eq!(accumulate(&s2, &FeatureSet::new(), 3), s2);
        assert_eq!(accumulate(&s2, &s2, 3), s2);
    }

    #[test]
    fn complexity_terms() {
        let (v, g) = (vocab(), kg());
        assert_eq!(complexity(&FeatureSet::new(), &v, &g).unwrap().total, 0.0);
        let two = FeatureSet::from_ids(["loner", "low_mood"], 1);
        let c = complexity(&two, &v, &g).unwrap();
        assert_eq!((c.count, c.connectivity, c.risk), (2.0, 0.0, 0.5));
        let linked = FeatureSet::from_ids(["low_mood", "no_sleep"], 1);
        let c = complexity(&linked, &v, &g).unwrap();
        assert_eq!(c.total, 2.0 + 0.75 + 0.75);
        // same node, no self-loop: pair contributes nothing
        let same = FeatureSet::from_ids(["low_mood", "shared"], 1);
        assert_eq!(complexity(&same, &v, &g).unwrap().connectivity, 0.0);
    }

    #[test]
    fn complexity_count_only_with_zero_risk() {
        let v = FeatureVocabulary::new(vec![
            Feature { id: "a".into(), label: "a".into(), risk_weight: 0.0, kg_node: None },
            Feature { id: "b".into(), label: "b".into(), risk_weight: 0.0, kg_node: None },
        ])
        .unwrap();
        let c = complexity(&FeatureSet::from_ids(["a", "b"], 1), &v, &kg()).unwrap();
        assert_eq!(c.total, 2.0);
    }

    #[test]
    fn complexity_rejects_dangling_node() {
        let v = FeatureVocabulary::new(vec![Feature {
            id: "x".into(),
            label: "x".into(),
            risk_weight: 0.0,
            kg_node: Some("ghost".into()),
        }])
        .unwrap();
        assert!(matches!(
            complexity(&FeatureSet::from_ids(["x"], 1), &v, &kg()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(modulation_strength(0.0, 3.0), 0.5);
        assert!(modulation_strength(20.0, 0.5) > 0.999);
        // direct evaluation of 1 / (1 + e^-1.5)
        let expected = 1.0 / (1.0 + (-1.5f64).exp());
        assert!((modulation_strength(3.0, 0.5) - expected).abs() < 1e-15);
        assert!((expected - 0.817_574_476_193_643_7).abs() < 1e-15);
    }

    #[test]
    fn session_tracks_turns() {
        let (lex, g) = (lexicon(), kg());
        let mut s = SessionState::new("s1");
        let u1 = s.add_turn("patient", "feeling down", &lex, &g, 0.5).unwrap();
        assert_eq!(u1.new_features, vec!["low_mood"]);
        let u2 = s.add_turn("patient", "still feeling down, can't sleep", &lex, &g, 0.5).unwrap();
        assert_eq!(u2.new_features, vec!["no_sleep"]);
        assert!(u2.alpha > u1.alpha);
        assert_eq!(s.alpha_history.len(), s.turn_index);
        assert_eq!(s.latest_text(), Some("still feeling down, can't sleep"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn accumulation_and_alpha_are_monotone(turns in prop::collection::vec(prop::collection::vec(0usize..4, 0..4), 1..8)) {
                let (v, g) = (vocab(), kg());
                let ids = v.ids();
                let mut phi = FeatureSet::new();
                let mut last_c = 0.0;
                let mut last_alpha = modulation_strength(0.0, 0.7);
                for (t, picks) in turns.iter().enumerate() {
                    let new = FeatureSet::from_ids(picks.iter().map(|i| ids[*i].clone()), 0);
                    let next = accumulate(&phi, &new, t + 1);
                    prop_assert!(next.is_superset(&phi));
                    let c = complexity(&next, &v, &g).unwrap().total;
                    prop_assert!(c >= last_c);
                    let a = modulation_strength(c, 0.7);
                    prop_assert!(a > 0.0 && a < 1.0);
                    prop_assert!(a >= last_alpha);
                    phi = next;
                    last_c = c;
                    last_alpha = a;
                }
            }

            #[test]
            fn extraction_is_pure(text in "[a-z' ]{0,40}") {
                let lex = lexicon();
                let a = extract_features(&text, &lex);
                let doubled = format!("{text}. {text}");
                prop_assert_eq!(&a, &extract_features(&text, &lex));
                prop_assert_eq!(a, extract_features(&doubled, &lex));
            }
        }
    }
}
