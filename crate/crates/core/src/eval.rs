//! Scoring detections against labels, and the result tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, AddAssign};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CaseRecord, CorpusManifest};
use crate::cwe::{CweGraph, CweId, MatchPolicy};
use crate::money::Money;
use crate::strategy::{ScanResult, ScanStatus};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("expected {0} is not in the CWE graph")]
    UnknownCwe(CweId),
    #[error("metrics are undefined for an empty confusion matrix")]
    EmptyMatrix,
    #[error("case {0} is not in the manifest")]
    UnknownCase(String),
    #[error("case {case_id} scored twice in group {group}")]
    DuplicateCase { case_id: String, group: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "FP")]
    FalsePositive,
    #[serde(rename = "TN")]
    TrueNegative,
    #[serde(rename = "FN")]
    FalseNegative,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::TruePositive => "TP",
            Outcome::FalsePositive => "FP",
            Outcome::TrueNegative => "TN",
            Outcome::FalseNegative => "FN",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub case_id: String,
    pub outcome: Outcome,
    /// The lowest reported CWE that matched the target.
    pub matched_cwe: Option<CweId>,
    /// Reported CWEs that did not match the target. They do not affect the
    /// outcome.
    pub unrelated: Vec<CweId>,
}

/// Scores one file. Only the targeted weakness (or an accepted relative)
/// counts; other findings are ignored.
pub fn classify(
    label: &CaseRecord,
    reported: &BTreeSet<CweId>,
    graph: &CweGraph,
    policy: &MatchPolicy,
) -> Result<Classification, EvalError> {
    let accepted = graph
        .acceptable_set(label.expected_cwe, policy)
        .map_err(|_| EvalError::UnknownCwe(label.expected_cwe))?;
    let matched_cwe = reported.iter().copied().find(|r| accepted.contains(r));
    let outcome = match (label.vulnerable, matched_cwe.is_some()) {
        (true, true) => Outcome::TruePositive,
        (true, false) => Outcome::FalseNegative,
        (false, true) => Outcome::FalsePositive,
        (false, false) => Outcome::TrueNegative,
    };
    Ok(Classification {
        case_id: label.case_id.clone(),
        outcome,
        matched_cwe,
        unrelated: reported.iter().copied().filter(|r| !accepted.contains(r)).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TruePositive => self.tp += 1,
            Outcome::FalsePositive => self.fp += 1,
            Outcome::TrueNegative => self.tn += 1,
            Outcome::FalseNegative => self.fn_ += 1,
        }
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tp + o.tp, self.fp + o.fp, self.tn + o.tn, self.fn_ + o.fn_)
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: ConfusionMatrix) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A ratio had a zero denominator and was set to 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricSet, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut degenerate = false;
    let accuracy = (cm.tp + cm.tn) as f64 / cm.total() as f64;
    let precision = ratio(cm.tp, cm.tp + cm.fp, &mut degenerate);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, &mut degenerate);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricSet {
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

/// A detector's output for one file: an LLM scan or a SAST report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub case_id: String,
    /// Strategy label or tool name.
    pub source: String,
    pub reported: BTreeSet<CweId>,
    pub cost: Money,
    #[serde(with = "crate::llm::duration_ms")]
    pub wall_time: Duration,
    /// Left out of the metrics (context overflow).
    pub skipped: bool,
}

impl From<&ScanResult> for Detection {
    fn from(r: &ScanResult) -> Self {
        Detection {
            case_id: r.case_id.clone(),
            source: r.strategy.label(),
            reported: r.reported_cwes.clone(),
            cost: r.transcript.total_cost(),
            wall_time: r.transcript.total_wall_time(),
            skipped: r.status == ScanStatus::SkippedOverflow,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub classification: Classification,
    pub expected_cwe: CweId,
    pub source: String,
    pub cost: Money,
    #[serde(with = "crate::llm::duration_ms")]
    pub wall_time: Duration,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Scoring {
    pub cases: Vec<ScoredCase>,
    /// (source, case_id) of detections left out of the metrics.
    pub skipped: Vec<(String, String)>,
}

/// Classifies every detection against the manifest. Output is sorted by
/// source, then case id.
pub fn score(
    detections: &[Detection],
    manifest: &CorpusManifest,
    graph: &CweGraph,
    policy: &MatchPolicy,
) -> Result<Scoring, EvalError> {
    let mut scoring = Scoring::default();
    let mut seen = BTreeSet::new();
    for d in detections {
        let label = manifest
            .get(&d.case_id)
            .ok_or_else(|| EvalError::UnknownCase(d.case_id.clone()))?;
        if !seen.insert((d.source.clone(), d.case_id.clone())) {
            return Err(EvalError::DuplicateCase {
                case_id: d.case_id.clone(),
                group: d.source.clone(),
            });
        }
        if d.skipped {
            scoring.skipped.push((d.source.clone(), d.case_id.clone()));
            continue;
        }
        scoring.cases.push(ScoredCase {
            classification: classify(label, &d.reported, graph, policy)?,
            expected_cwe: label.expected_cwe,
            source: d.source.clone(),
            cost: d.cost,
            wall_time: d.wall_time,
        });
    }
    if !scoring.skipped.is_empty() {
        tracing::warn!(count = scoring.skipped.len(), "cases skipped for context overflow");
    }
    scoring
        .cases
        .sort_by(|a, b| (&a.source, &a.classification.case_id).cmp(&(&b.source, &b.classification.case_id)));
    scoring.skipped.sort();
    Ok(scoring)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    Overall,
    PerCwe,
    PerStrategy,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKey {
    Overall,
    Cwe(CweId),
    Source(String),
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Overall => f.write_str("overall"),
            GroupKey::Cwe(c) => write!(f, "{c}"),
            GroupKey::Source(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub matrix: ConfusionMatrix,
    pub metrics: MetricSet,
    pub cost: Money,
    pub wall_time: Duration,
}

/// Sums classifications per group. Groups are never empty, so every
/// summary has metrics.
pub fn aggregate(cases: &[ScoredCase], group_by: GroupBy) -> BTreeMap<GroupKey, GroupSummary> {
    let mut sums: BTreeMap<GroupKey, (ConfusionMatrix, Money, Duration)> = BTreeMap::new();
    for c in cases {
        let key = match group_by {
            GroupBy::Overall => GroupKey::Overall,
            GroupBy::PerCwe => GroupKey::Cwe(c.expected_cwe),
            GroupBy::PerStrategy => GroupKey::Source(c.source.clone()),
        };
        let entry = sums.entry(key).or_default();
        entry.0.record(c.classification.outcome);
        entry.1 += c.cost;
        entry.2 += c.wall_time;
    }
    sums.into_iter()
        .map(|(k, (matrix, cost, wall_time))| {
            let metrics = metrics(&matrix).expect("a group holds at least one case");
            (k, GroupSummary { matrix, metrics, cost, wall_time })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub matrix: ConfusionMatrix,
    pub metrics: MetricSet,
    pub cost: Option<Money>,
    pub wall_time: Option<Duration>,
}

/// A result table in the TP/FP/TN/FN/Accuracy/Precision/Recall/F1/Cost/Time
/// layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

const HEADER: [&str; 11] = [
    "Label", "TP", "FP", "TN", "FN", "Accuracy", "Precision", "Recall", "F1", "Cost", "Time",
];

/// `h:mm:ss`, rounded down to whole seconds.
pub fn format_duration(d: Duration) -> String {
    let s = d.as_secs();
    format!("{}:{:02}:{:02}", s / 3600, s / 60 % 60, s % 60)
}

impl ResultTable {
    pub fn from_groups(title: &str, groups: &BTreeMap<GroupKey, GroupSummary>, with_cost: bool) -> Self {
        ResultTable {
            title: title.to_string(),
            rows: groups
                .iter()
                .map(|(k, g)| TableRow {
                    label: k.to_string(),
                    matrix: g.matrix,
                    metrics: g.metrics,
                    cost: with_cost.then_some(g.cost),
                    wall_time: with_cost.then_some(g.wall_time),
                })
                .collect(),
        }
    }

    fn cells(row: &TableRow) -> [String; 11] {
        let m = &row.metrics;
        [
            row.label.clone(),
            row.matrix.tp.to_string(),
            row.matrix.fp.to_string(),
            row.matrix.tn.to_string(),
            row.matrix.fn_.to_string(),
            format!("{:.3}", m.accuracy),
            format!("{:.3}", m.precision),
            format!("{:.3}", m.recall),
            format!("{:.3}", m.f1),
            row.cost.map(|c| format!("{}$", c.format_fixed(2))).unwrap_or_else(|| "-".into()),
            row.wall_time.map(format_duration).unwrap_or_else(|| "-".into()),
        ]
    }

    /// Comma-separated; cost keeps all six decimals and time is in
    /// milliseconds.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "label", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "f1", "degenerate", "cost_usd", "time_ms",
        ])
        .expect("in-memory write");
        for row in &self.rows {
            let cells = Self::cells(row);
            let mut record: Vec<String> = cells[..9].to_vec();
            record.push(row.metrics.degenerate.to_string());
            record.push(row.cost.map(|c| c.to_string()).unwrap_or_default());
            record.push(row.wall_time.map(|t| t.as_millis().to_string()).unwrap_or_default());
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Aligned text with a title line. Degenerate rows carry a `*` after
    /// their label and a footnote.
    pub fn to_text(&self) -> String {
        let rows: Vec<[String; 11]> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = Self::cells(r);
                if r.metrics.degenerate {
                    cells[0].push('*');
                }
                cells
            })
            .collect();
        let mut widths = HEADER.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut out = String::new();
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                if i == 0 {
                    out.push_str(&format!("{c:<w$}"));
                } else {
                    out.push_str(&format!("  {c:>w$}"));
                }
            }
            out.trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&HEADER.map(String::from)));
        out.push('\n');
        let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        if self.rows.iter().any(|r| r.metrics.degenerate) {
            out.push_str("* a metric had a zero denominator and is shown as 0\n");
        }
        out
    }
}
