//! Accuracy and binary discriminatory metrics over reflection traces.
//!
//! Undefined ratios (0/0) are `None` throughout and serialize as JSON `null` and
//! CSV `NA`. Reported numbers use four fractional digits, rounded half-to-even on
//! the exact binary value.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::reflection::ReflectionTrace;
use crate::store::{Dataset, LabelMode, PredictionSet};
use crate::verifier::Answer;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no trace for item {0:?}")]
    MissingTrace(String),
    #[error("no gated item has a rank-1 verdict with a known label")]
    NoGatedItems,
}

pub fn fixed4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn fixed4_or_na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fixed4)
}

fn ser_fixed4<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => RawValue::from_string(fixed4(*x))
            .map_err(serde::ser::Error::custom)?
            .serialize(s),
        None => s.serialize_none(),
    }
}

pub fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn is_correct(label: usize, item: &PredictionSet) -> bool {
    item.true_labels.contains(&label)
}

fn index_traces(traces: &[ReflectionTrace]) -> HashMap<&str, &ReflectionTrace> {
    traces.iter().map(|t| (t.item_id.as_str(), t)).collect()
}

fn aligned<'a>(
    traces: &'a [ReflectionTrace],
    ds: &'a Dataset,
) -> Result<Vec<(&'a PredictionSet, &'a ReflectionTrace)>, EvalError> {
    let by_id = index_traces(traces);
    ds.items
        .iter()
        .map(|item| {
            by_id
                .get(item.item_id.as_str())
                .map(|&t| (item, t))
                .ok_or_else(|| EvalError::MissingTrace(item.item_id.clone()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AccuracyCounts {
    pub correct: usize,
    /// Items with a nonempty true label set.
    pub total: usize,
}

impl AccuracyCounts {
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.correct, self.total)
    }

    fn add(&mut self, item: &PredictionSet, label: usize) {
        if item.true_labels.is_empty() {
            return;
        }
        self.total += 1;
        if is_correct(label, item) {
            self.correct += 1;
        }
    }
}

/// Counts for the final labels in `traces`. In standard mode an item has one true
/// label; in ReaL mode any label in the set counts. Unlabeled items are skipped.
pub fn final_counts(traces: &[ReflectionTrace], ds: &Dataset) -> Result<AccuracyCounts, EvalError> {
    let mut counts = AccuracyCounts::default();
    for (item, trace) in aligned(traces, ds)? {
        counts.add(item, trace.final_label_index);
    }
    Ok(counts)
}

pub fn baseline_counts(ds: &Dataset) -> AccuracyCounts {
    let mut counts = AccuracyCounts::default();
    for item in &ds.items {
        if let Some(top1) = item.top1() {
            counts.add(item, top1);
        }
    }
    counts
}

pub fn top1_accuracy(traces: &[ReflectionTrace], ds: &Dataset) -> Result<Option<f64>, EvalError> {
    Ok(final_counts(traces, ds)?.accuracy())
}

/// Fraction of labeled items whose true label is among their first `k` candidates.
pub fn containment_counts(ds: &Dataset, k: usize) -> AccuracyCounts {
    let mut counts = AccuracyCounts::default();
    for item in ds.items.iter().filter(|i| !i.true_labels.is_empty()) {
        counts.total += 1;
        if item
            .candidates
            .iter()
            .take(k)
            .any(|c| is_correct(c.label, item))
        {
            counts.correct += 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SubsetAccuracy {
    pub threshold: f64,
    pub n: usize,
    #[serde(serialize_with = "ser_fixed4")]
    pub baseline_accuracy: Option<f64>,
    #[serde(serialize_with = "ser_fixed4")]
    pub reflected_accuracy: Option<f64>,
}

/// Accuracy before and after reflection on items with confidence below `threshold`.
pub fn subset_accuracy(
    traces: &[ReflectionTrace],
    ds: &Dataset,
    threshold: f64,
) -> Result<SubsetAccuracy, EvalError> {
    let mut n = 0;
    let mut baseline = AccuracyCounts::default();
    let mut reflected = AccuracyCounts::default();
    for (item, trace) in aligned(traces, ds)? {
        let Some(first) = item.candidates.first() else {
            continue;
        };
        if first.score >= threshold {
            continue;
        }
        n += 1;
        baseline.add(item, first.label);
        reflected.add(item, trace.final_label_index);
    }
    Ok(SubsetAccuracy {
        threshold,
        n,
        baseline_accuracy: baseline.accuracy(),
        reflected_accuracy: reflected.accuracy(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn new(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, actual: bool, predicted: bool) {
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn metrics(&self) -> BinaryMetrics {
        BinaryMetrics {
            counts: *self,
            accuracy: self.accuracy(),
            specificity: self.specificity(),
            precision: self.precision(),
            recall: self.recall(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BinaryMetrics {
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    #[serde(serialize_with = "ser_fixed4")]
    pub accuracy: Option<f64>,
    #[serde(serialize_with = "ser_fixed4")]
    pub specificity: Option<f64>,
    #[serde(serialize_with = "ser_fixed4")]
    pub precision: Option<f64>,
    #[serde(serialize_with = "ser_fixed4")]
    pub recall: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AnswerCounts {
    pub yes: usize,
    pub no: usize,
    pub not_sure: usize,
}

impl AnswerCounts {
    fn record(&mut self, answer: Answer) {
        match answer {
            Answer::Yes => self.yes += 1,
            Answer::No => self.no += 1,
            Answer::NotSure => self.not_sure += 1,
        }
    }
}

/// Rank-1 verdicts split by whether the rank-1 candidate was actually correct.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ThreeClassCounts {
    pub positive: AnswerCounts,
    pub negative: AnswerCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BinaryReport {
    /// NotSure read as a rejection, matching the loop's control flow.
    pub not_sure_as_negative: BinaryMetrics,
    /// NotSure verdicts left out.
    pub not_sure_excluded: BinaryMetrics,
    pub three_class: ThreeClassCounts,
}

/// Binary metrics of rank-1 verdicts: positive class is "the top-1 candidate is a
/// true label", predicted positive is a Yes at rank 1. Later ranks are ignored.
pub fn binary_metrics(traces: &[ReflectionTrace], ds: &Dataset) -> Result<BinaryReport, EvalError> {
    let mut as_negative = ConfusionCounts::default();
    let mut excluded = ConfusionCounts::default();
    let mut three_class = ThreeClassCounts::default();
    for (item, trace) in aligned(traces, ds)? {
        let Some(step) = trace.steps.first() else {
            continue;
        };
        if !trace.gated || step.rank != 1 || item.true_labels.is_empty() {
            continue;
        }
        let actual = item.top1().is_some_and(|l| is_correct(l, item));
        let answer = step.verdict.answer;
        as_negative.record(actual, answer.is_yes());
        if answer != Answer::NotSure {
            excluded.record(actual, answer.is_yes());
        }
        if actual {
            three_class.positive.record(answer);
        } else {
            three_class.negative.record(answer);
        }
    }
    if as_negative.total() == 0 {
        return Err(EvalError::NoGatedItems);
    }
    Ok(BinaryReport {
        not_sure_as_negative: as_negative.metrics(),
        not_sure_excluded: excluded.metrics(),
        three_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub label_mode: LabelMode,
    pub n_items: usize,
    /// Items with no true label; excluded from every accuracy denominator.
    pub n_unlabeled: usize,
    pub n_gated: usize,
    pub n_exhausted: usize,
    pub n_failed: usize,
    pub verifier_queries: usize,
    #[serde(serialize_with = "ser_fixed4")]
    pub baseline_accuracy: Option<f64>,
    #[serde(serialize_with = "ser_fixed4")]
    pub reflected_accuracy: Option<f64>,
    pub subset: SubsetAccuracy,
    pub binary: Option<BinaryReport>,
}

pub fn evaluate(
    traces: &[ReflectionTrace],
    ds: &Dataset,
    threshold: f64,
) -> Result<EvalReport, EvalError> {
    let reflected = final_counts(traces, ds)?;
    let binary = match binary_metrics(traces, ds) {
        Ok(b) => Some(b),
        Err(EvalError::NoGatedItems) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        label_mode: ds.label_mode,
        n_items: ds.len(),
        n_unlabeled: ds.items.iter().filter(|i| i.true_labels.is_empty()).count(),
        n_gated: traces.iter().filter(|t| t.gated).count(),
        n_exhausted: traces.iter().filter(|t| t.exhausted).count(),
        n_failed: traces.iter().filter(|t| t.failed()).count(),
        verifier_queries: traces.iter().map(|t| t.steps.len()).sum(),
        baseline_accuracy: baseline_counts(ds).accuracy(),
        reflected_accuracy: reflected.accuracy(),
        subset: subset_accuracy(traces, ds, threshold)?,
        binary,
    })
}

pub fn report_json(report: &EvalReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

/// Two-column `metric,value` summary.
pub fn report_csv(report: &EvalReport) -> String {
    let label_mode = match report.label_mode {
        LabelMode::Standard => "standard",
        LabelMode::Real => "real",
    };
    let mut rows: Vec<(&str, String)> = vec![
        ("label_mode", label_mode.to_string()),
        ("n_items", report.n_items.to_string()),
        ("n_unlabeled", report.n_unlabeled.to_string()),
        ("n_gated", report.n_gated.to_string()),
        ("n_exhausted", report.n_exhausted.to_string()),
        ("n_failed", report.n_failed.to_string()),
        ("verifier_queries", report.verifier_queries.to_string()),
        ("baseline_accuracy", fixed4_or_na(report.baseline_accuracy)),
        (
            "reflected_accuracy",
            fixed4_or_na(report.reflected_accuracy),
        ),
        ("subset_threshold", report.subset.threshold.to_string()),
        ("subset_n", report.subset.n.to_string()),
        (
            "subset_baseline_accuracy",
            fixed4_or_na(report.subset.baseline_accuracy),
        ),
        (
            "subset_reflected_accuracy",
            fixed4_or_na(report.subset.reflected_accuracy),
        ),
    ];
    let na = || "NA".to_string();
    let b = report.binary.map(|b| b.not_sure_as_negative);
    let count = |f: fn(&ConfusionCounts) -> usize| b.map_or_else(na, |m| f(&m.counts).to_string());
    rows.extend([
        ("binary_tp", count(|c| c.tp)),
        ("binary_fp", count(|c| c.fp)),
        ("binary_tn", count(|c| c.tn)),
        ("binary_fn", count(|c| c.fn_)),
        ("binary_accuracy", fixed4_or_na(b.and_then(|m| m.accuracy))),
        (
            "binary_specificity",
            fixed4_or_na(b.and_then(|m| m.specificity)),
        ),
        (
            "binary_precision",
            fixed4_or_na(b.and_then(|m| m.precision)),
        ),
        ("binary_recall", fixed4_or_na(b.and_then(|m| m.recall))),
    ]);
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        out.push_str(k);
        out.push(',');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Writes `path` (JSON) and the same path with a `.csv` extension.
pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> io::Result<PathBuf> {
    let path = path.as_ref();
    let csv_path = path.with_extension("csv");
    fs::write(path, report_json(report))?;
    fs::write(&csv_path, report_csv(report))?;
    Ok(csv_path)
}
