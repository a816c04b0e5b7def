//! Micro/macro precision, recall and F1 over document-level label sets, and
//! the cumulative level-wise breakdown computed from search traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSets;
use crate::ontology::{Level, Ontology, OntologyError};
use crate::search::SearchTrace;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("macro average over an empty class set")]
    EmptyClassSet,
    #[error("documents with gold labels but no trace: {}", .0.join(", "))]
    MissingTraces(Vec<String>),
    #[error("traces for documents without gold labels: {}", .0.join(", "))]
    UnexpectedTraces(Vec<String>),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Prf {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

/// Which classes the macro average runs over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSetPolicy {
    /// Classes that occur in the gold labels.
    #[default]
    Gold,
    /// Classes that occur in the gold labels or the predictions.
    GoldUnionPredicted,
}

impl fmt::Display for ClassSetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassSetPolicy::Gold => "gold",
            ClassSetPolicy::GoldUnionPredicted => "gold_union_predicted",
        })
    }
}

impl FromStr for ClassSetPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold" => Ok(ClassSetPolicy::Gold),
            "gold_union_predicted" | "gold-union-predicted" => Ok(ClassSetPolicy::GoldUnionPredicted),
            other => Err(format!("unknown class set policy {other:?}")),
        }
    }
}

static EMPTY: BTreeSet<String> = BTreeSet::new();

/// Union of document ids; a document missing on one side has an empty set.
fn documents<'a>(gold: &'a LabelSets, pred: &'a LabelSets) -> BTreeSet<&'a str> {
    gold.keys().chain(pred.keys()).map(String::as_str).collect()
}

fn pooled_counts(gold: &LabelSets, pred: &LabelSets) -> Counts {
    let mut c = Counts::default();
    for doc in documents(gold, pred) {
        let g = gold.get(doc).unwrap_or(&EMPTY);
        let p = pred.get(doc).unwrap_or(&EMPTY);
        let tp = g.intersection(p).count();
        c.tp += tp;
        c.fp += p.len() - tp;
        c.fn_ += g.len() - tp;
    }
    c
}

/// Pools true/false positives and false negatives over all (document, code)
/// pairs.
pub fn micro_metrics(gold: &LabelSets, pred: &LabelSets) -> Prf {
    pooled_counts(gold, pred).prf()
}

/// Per-class counts over the chosen class set.
pub fn class_counts(gold: &LabelSets, pred: &LabelSets, policy: ClassSetPolicy) -> BTreeMap<String, Counts> {
    let mut classes: BTreeMap<String, Counts> = gold
        .values()
        .flatten()
        .map(|c| (c.clone(), Counts::default()))
        .collect();
    if policy == ClassSetPolicy::GoldUnionPredicted {
        for code in pred.values().flatten() {
            classes.entry(code.clone()).or_default();
        }
    }
    for doc in documents(gold, pred) {
        let g = gold.get(doc).unwrap_or(&EMPTY);
        let p = pred.get(doc).unwrap_or(&EMPTY);
        for code in g.union(p) {
            let Some(counts) = classes.get_mut(code) else { continue };
            match (g.contains(code), p.contains(code)) {
                (true, true) => counts.tp += 1,
                (false, true) => counts.fp += 1,
                (true, false) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    classes
}

/// Unweighted mean of per-class precision, recall and F1.
pub fn macro_metrics(gold: &LabelSets, pred: &LabelSets, policy: ClassSetPolicy) -> Result<Prf, EvalError> {
    let classes = class_counts(gold, pred, policy);
    if classes.is_empty() {
        return Err(EvalError::EmptyClassSet);
    }
    let n = classes.len() as f64;
    let mut sum = Prf::default();
    for counts in classes.values() {
        let prf = counts.prf();
        sum.precision += prf.precision;
        sum.recall += prf.recall;
        sum.f1 += prf.f1;
    }
    Ok(Prf {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    pub n_docs: usize,
    pub n_gold_pairs: usize,
    pub n_pred_pairs: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub support: Support,
    pub class_set_policy: ClassSetPolicy,
}

pub fn evaluate(gold: &LabelSets, pred: &LabelSets, policy: ClassSetPolicy) -> Result<MetricsReport, EvalError> {
    let macro_avg = macro_metrics(gold, pred, policy)?;
    Ok(MetricsReport {
        micro: micro_metrics(gold, pred),
        macro_avg,
        support: Support {
            n_docs: documents(gold, pred).len(),
            n_gold_pairs: gold.values().map(BTreeSet::len).sum(),
            n_pred_pairs: pred.values().map(BTreeSet::len).sum(),
            n_classes: class_counts(gold, pred, policy).len(),
        },
        class_set_policy: policy,
    })
}

/// Maps each code to its ancestor-or-self at `level`; codes above that level
/// are dropped.
pub fn project_to_level(
    labels: &BTreeSet<String>,
    level: Level,
    ontology: &Ontology,
) -> Result<BTreeSet<String>, OntologyError> {
    let mut out = BTreeSet::new();
    for code in labels {
        if let Some(ancestor) = ontology.ancestor_at_level(code, level)? {
            out.insert(ancestor.to_string());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: Level,
    pub level_name: String,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    /// Gold (document, code) pairs whose code sits above this level.
    pub dropped_gold: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub rows: Vec<LevelRow>,
}

/// Level-wise metrics from the relevance decisions recorded in traces.
///
/// At level L the predictions are the codes judged relevant at L and the gold
/// set is the gold labels projected to L. A node is only reachable at L when
/// its ancestor was judged relevant at L-1, so failures higher in the tree
/// carry down. Rows run from Chapter to the deepest level holding a gold code.
pub fn level_analysis(
    gold: &LabelSets,
    traces: &[SearchTrace],
    ontology: &Ontology,
    policy: ClassSetPolicy,
) -> Result<LevelReport, EvalError> {
    let by_doc: BTreeMap<&str, &SearchTrace> = traces.iter().map(|t| (t.doc_id.as_str(), t)).collect();
    let missing: Vec<String> = gold
        .keys()
        .filter(|d| !by_doc.contains_key(d.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingTraces(missing));
    }
    let unexpected: Vec<String> = by_doc
        .keys()
        .filter(|d| !gold.contains_key(**d))
        .map(|d| d.to_string())
        .collect();
    if !unexpected.is_empty() {
        return Err(EvalError::UnexpectedTraces(unexpected));
    }

    let mut deepest = 0u8;
    for code in gold.values().flatten() {
        deepest = deepest.max(ontology.level(code)?.0);
    }

    let mut rows = Vec::new();
    for l in 1..=deepest {
        let level = Level(l);
        let mut gold_at = LabelSets::new();
        let mut pred_at = LabelSets::new();
        let mut dropped = 0;
        for (doc, codes) in gold {
            let projected = project_to_level(codes, level, ontology)?;
            for code in codes {
                if ontology.level(code)? < level {
                    dropped += 1;
                }
            }
            gold_at.insert(doc.clone(), projected);
            let relevant = by_doc[doc.as_str()]
                .relevant_by_level
                .get(&l)
                .cloned()
                .unwrap_or_default();
            pred_at.insert(doc.clone(), relevant);
        }
        let macro_avg = macro_metrics(&gold_at, &pred_at, policy)?;
        rows.push(LevelRow {
            level,
            level_name: level.name(),
            micro: micro_metrics(&gold_at, &pred_at),
            macro_avg,
            dropped_gold: dropped,
            n_classes: class_counts(&gold_at, &pred_at, policy).len(),
        });
    }
    Ok(LevelReport { rows })
}
