//! Binary classification metrics per task, macro-averaged across tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_features, Lexicon};
use crate::kg::KnowledgeGraph;
use crate::proknow::{match_score, InstrumentRegistry};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`, equal to the harmonic mean of precision and
    /// recall; 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn scores(&self) -> Scores {
        Scores {
            accuracy: self.accuracy(),
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub confusion: Confusion,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskReport>,
    pub macro_average: Scores,
}

/// One line of a labeled evaluation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub task: String,
    pub text: String,
    pub label: bool,
    /// Prediction made elsewhere, used by [`ProvidedScorer`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<bool>,
}

pub fn parse_examples(jsonl: &str) -> Result<Vec<LabeledExample>> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("eval line {}: {e}", n + 1))))
        .collect()
}

pub trait Scorer {
    fn predict(&self, example: &LabeledExample) -> Result<bool>;
}

/// Reads the `prediction` field of each example.
pub struct ProvidedScorer;

impl Scorer for ProvidedScorer {
    fn predict(&self, example: &LabeledExample) -> Result<bool> {
        example
            .prediction
            .ok_or_else(|| Error::data(format!("example {:?} has no prediction", example.text)))
    }
}

/// Always right; useful as a harness sanity check.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn predict(&self, example: &LabeledExample) -> Result<bool> {
        Ok(example.label)
    }
}

/// Predicts positive when the features of the text match the instrument
/// mapped to the example's task.
pub struct InstrumentScorer<'a> {
    pub lexicon: &'a Lexicon,
    pub kg: &'a KnowledgeGraph,
    pub registry: &'a InstrumentRegistry,
    pub task_instruments: BTreeMap<String, String>,
}

impl Scorer for InstrumentScorer<'_> {
    fn predict(&self, example: &LabeledExample) -> Result<bool> {
        let id = self
            .task_instruments
            .get(&example.task)
            .ok_or_else(|| Error::usage(format!("no instrument mapped to task {}", example.task)))?;
        let inst = self
            .registry
            .get(id)
            .ok_or_else(|| Error::usage(format!("unknown instrument {id}")))?;
        let phi = extract_features(&example.text, self.lexicon);
        Ok(match_score(&phi, self.lexicon.vocabulary(), self.kg, inst).score > 0.0)
    }
}

/// Per-task confusion counts and scores, tasks in name order.
pub fn evaluate(examples: &[LabeledExample], scorer: &dyn Scorer) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::usage("no examples to evaluate"));
    }
    let mut per_task: BTreeMap<&str, Confusion> = BTreeMap::new();
    for ex in examples {
        let p = scorer.predict(ex)?;
        per_task.entry(&ex.task).or_default().record(p, ex.label);
    }
    let tasks: Vec<TaskReport> = per_task
        .into_iter()
        .map(|(task, confusion)| TaskReport {
            task: task.to_string(),
            confusion,
            scores: confusion.scores(),
        })
        .collect();
    let n = tasks.len() as f64;
    let mean = |f: fn(&Scores) -> f64| tasks.iter().map(|t| f(&t.scores)).sum::<f64>() / n;
    let macro_average = Scores {
        accuracy: mean(|s| s.accuracy),
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
    };
    Ok(EvalReport { tasks, macro_average })
}
