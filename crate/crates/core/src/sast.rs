//! CodeQL CSV and SpotBugs text reports, mapped to CWE identifiers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusManifest;
use crate::cwe::{CweGraph, CweId, MatchPolicy};
use crate::eval::Detection;
use crate::money::Money;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SastError {
    #[error("row {index}: {message}")]
    Row { index: usize, message: String },
    #[error("unbalanced quotes in CSV report")]
    UnbalancedQuotes,
    #[error("rule map: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SastTool {
    CodeQl,
    SpotBugs,
}

impl fmt::Display for SastTool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SastTool::CodeQl => "codeql",
            SastTool::SpotBugs => "spotbugs",
        })
    }
}

impl FromStr for SastTool {
    type Err = SastError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "codeql" => Ok(SastTool::CodeQl),
            "spotbugs" => Ok(SastTool::SpotBugs),
            other => Err(SastError::Config(format!("unknown tool {other:?}"))),
        }
    }
}

/// One reported problem.
///
/// CodeQL rows carry the query name as `rule`; SpotBugs lines carry the
/// bug-pattern abbreviation (`SECCI`), the priority letter as `severity`
/// and the category letter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SastFinding {
    pub tool: SastTool,
    pub rule: String,
    pub description: String,
    pub severity: String,
    pub category: Option<String>,
    pub message: String,
    /// Forward slashes only.
    pub path: String,
    pub start_line: u32,
    pub start_column: Option<u32>,
    pub end_line: Option<u32>,
    pub end_column: Option<u32>,
    /// Filled in by [`RuleCweMap::annotate`].
    pub cwe_candidates: BTreeSet<CweId>,
}

fn normalize_path(raw: &str) -> String {
    let p = raw.trim().replace('\\', "/");
    p.strip_prefix("./").map(str::to_string).unwrap_or(p)
}

const CODEQL_COLUMNS: usize = 9;

/// Parses the nine-column CodeQL CSV export: name, description, severity,
/// message, path, start line, start column, end line, end column. There is
/// no header row.
pub fn parse_codeql_csv(report: &str) -> Result<Vec<SastFinding>, SastError> {
    if report.matches('"').count() % 2 != 0 {
        return Err(SastError::UnbalancedQuotes);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(report.as_bytes());
    let mut findings = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let index = i + 1;
        let record = record.map_err(|e| SastError::Row {
            index,
            message: e.to_string(),
        })?;
        if record.len() != CODEQL_COLUMNS {
            return Err(SastError::Row {
                index,
                message: format!("expected {CODEQL_COLUMNS} columns, found {}", record.len()),
            });
        }
        let number = |col: usize, what: &str| -> Result<u32, SastError> {
            record[col].trim().parse::<u32>().map_err(|_| SastError::Row {
                index,
                message: format!("{what} {:?} is not a number", &record[col]),
            })
        };
        let start_line = number(5, "start line")?;
        if start_line == 0 {
            return Err(SastError::Row {
                index,
                message: "start line is 0".into(),
            });
        }
        findings.push(SastFinding {
            tool: SastTool::CodeQl,
            rule: record[0].to_string(),
            description: record[1].to_string(),
            severity: record[2].to_string(),
            category: None,
            message: record[3].to_string(),
            path: normalize_path(&record[4]),
            start_line,
            start_column: Some(number(6, "start column")?),
            end_line: Some(number(7, "end line")?),
            end_column: Some(number(8, "end column")?),
            cwe_candidates: BTreeSet::new(),
        });
    }
    Ok(findings)
}

/// Renders findings in the CodeQL CSV layout, every field quoted.
pub fn render_codeql_csv(findings: &[SastFinding]) -> String {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .from_writer(Vec::new());
    for f in findings {
        let opt = |v: Option<u32>| v.map(|n| n.to_string()).unwrap_or_default();
        w.write_record([
            f.rule.clone(),
            f.description.clone(),
            f.severity.clone(),
            f.message.clone(),
            f.path.clone(),
            f.start_line.to_string(),
            opt(f.start_column),
            opt(f.end_line),
            opt(f.end_column),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpotbugsReport {
    pub findings: Vec<SastFinding>,
    /// (1-based line number, text) of non-blank lines that did not match.
    pub skipped: Vec<(usize, String)>,
}

/// Parses `<priority> <category> <RULE>: <message>  At <file>:[line <n>]`
/// lines. Blank lines are ignored; other non-matching lines are skipped
/// and listed.
pub fn parse_spotbugs_text(report: &str) -> SpotbugsReport {
    static LINE: OnceLock<Regex> = OnceLock::new();
    let re = LINE.get_or_init(|| {
        Regex::new(
            r"^\s*(?P<prio>[HML])\s+(?P<cat>[A-Z])\s+(?P<rule>[A-Za-z][A-Za-z0-9_]*):\s+(?P<msg>.*?)\s+At\s+(?P<file>[^\s:]+):\[lines?\s+(?P<line>\d+)(?:-(?P<end>\d+))?\]\s*$",
        )
        .expect("valid regex")
    });
    let mut out = SpotbugsReport::default();
    for (i, line) in report.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = re.captures(line).and_then(|c| {
            let start_line: u32 = c["line"].parse().ok().filter(|&n| n >= 1)?;
            Some(SastFinding {
                tool: SastTool::SpotBugs,
                rule: c["rule"].to_string(),
                description: String::new(),
                severity: c["prio"].to_string(),
                category: Some(c["cat"].to_string()),
                message: c["msg"].to_string(),
                path: normalize_path(&c["file"]),
                start_line,
                start_column: None,
                end_line: c.name("end").and_then(|m| m.as_str().parse().ok()),
                end_column: None,
                cwe_candidates: BTreeSet::new(),
            })
        });
        match parsed {
            Some(f) => out.findings.push(f),
            None => {
                tracing::warn!(line = i + 1, "unrecognized SpotBugs line");
                out.skipped.push((i + 1, line.to_string()));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleEntry {
    pub cwes: BTreeSet<CweId>,
    /// `official` when the tool documents the mapping, `manual` otherwise.
    pub provenance: String,
}

/// (tool, rule) → CWEs, loaded from a `tool,rule,cwes,provenance` table
/// where `cwes` is `;`-separated.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RuleCweMap {
    entries: BTreeMap<(SastTool, String), RuleEntry>,
}

const BUNDLED_RULES: &str = include_str!("../data/sast_rules.csv");

#[derive(Deserialize)]
struct RuleRow {
    tool: String,
    rule: String,
    cwes: String,
    provenance: String,
}

impl RuleCweMap {
    pub fn bundled() -> Self {
        RuleCweMap::from_csv(BUNDLED_RULES).expect("bundled rule map is valid")
    }

    pub fn from_csv(text: &str) -> Result<Self, SastError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut entries = BTreeMap::new();
        for (i, row) in reader.deserialize::<RuleRow>().enumerate() {
            let row = row.map_err(|e| SastError::Config(format!("row {}: {e}", i + 1)))?;
            let tool: SastTool = row.tool.parse()?;
            let cwes = row
                .cwes
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.parse::<CweId>().map_err(|e| SastError::Config(format!("row {}: {e}", i + 1))))
                .collect::<Result<BTreeSet<_>, _>>()?;
            if cwes.is_empty() {
                return Err(SastError::Config(format!("row {}: {} has no CWEs", i + 1, row.rule)));
            }
            let key = (tool, row.rule.trim().to_string());
            if entries.contains_key(&key) {
                return Err(SastError::Config(format!("row {}: duplicate rule {}", i + 1, key.1)));
            }
            entries.insert(
                key,
                RuleEntry {
                    cwes,
                    provenance: row.provenance.trim().to_string(),
                },
            );
        }
        Ok(RuleCweMap { entries })
    }

    pub fn get(&self, tool: SastTool, rule: &str) -> Option<&RuleEntry> {
        self.entries.get(&(tool, rule.trim().to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(SastTool, String), &RuleEntry)> {
        self.entries.iter()
    }

    /// Every CWE the tool can report.
    pub fn reachable(&self, tool: SastTool) -> BTreeSet<CweId> {
        self.entries
            .iter()
            .filter(|((t, _), _)| *t == tool)
            .flat_map(|(_, e)| e.cwes.iter().copied())
            .collect()
    }

    /// Sets each finding's `cwe_candidates`; unmapped rules get none.
    pub fn annotate(&self, findings: &mut [SastFinding]) {
        for f in findings {
            f.cwe_candidates = self.get(f.tool, &f.rule).map(|e| e.cwes.clone()).unwrap_or_default();
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MappedFindings {
    /// Every manifest case, with the union of its findings' CWEs.
    pub reported: BTreeMap<String, BTreeSet<CweId>>,
    /// Findings per unmapped (tool, rule).
    pub unmapped: BTreeMap<(SastTool, String), usize>,
    /// Paths that resolve to no manifest case.
    pub orphans: Vec<String>,
}

/// The case a finding's path refers to: a manifest path that is a suffix
/// of it, else a case id equal to the file stem.
fn resolve_case<'m>(manifest: &'m CorpusManifest, path: &str) -> Option<&'m str> {
    if let Some(c) = manifest
        .cases
        .iter()
        .find(|c| path == c.path || path.ends_with(&format!("/{}", c.path)))
    {
        return Some(&c.case_id);
    }
    let file = path.rsplit('/').next().unwrap_or(path);
    let stem = file.strip_suffix(".java").unwrap_or(file);
    manifest.get(stem).map(|c| c.case_id.as_str())
}

/// Rewrites each finding's path to its manifest path where one resolves.
pub fn relativize_paths(findings: &mut [SastFinding], manifest: &CorpusManifest) {
    for f in findings {
        if let Some(case) = resolve_case(manifest, &f.path).and_then(|id| manifest.get(id)) {
            f.path = case.path.clone();
        }
    }
}

pub fn map_findings(findings: &[SastFinding], rule_map: &RuleCweMap, manifest: &CorpusManifest) -> MappedFindings {
    let mut out = MappedFindings {
        reported: manifest.cases.iter().map(|c| (c.case_id.clone(), BTreeSet::new())).collect(),
        ..MappedFindings::default()
    };
    for f in findings {
        let Some(case_id) = resolve_case(manifest, &f.path) else {
            tracing::warn!(path = %f.path, "finding outside the corpus");
            out.orphans.push(f.path.clone());
            continue;
        };
        match rule_map.get(f.tool, &f.rule) {
            Some(entry) => {
                out.reported
                    .get_mut(case_id)
                    .expect("resolved cases are in the manifest")
                    .extend(entry.cwes.iter().copied());
            }
            None => {
                tracing::debug!(tool = %f.tool, rule = %f.rule, "unmapped rule");
                *out.unmapped.entry((f.tool, f.rule.clone())).or_default() += 1;
            }
        }
    }
    out
}

impl MappedFindings {
    /// One detection per manifest case, for the evaluator.
    pub fn detections(&self, source: &str) -> Vec<Detection> {
        self.reported
            .iter()
            .map(|(case_id, cwes)| Detection {
                case_id: case_id.clone(),
                source: source.to_string(),
                reported: cwes.clone(),
                cost: Money::ZERO,
                wall_time: std::time::Duration::ZERO,
                skipped: false,
            })
            .collect()
    }
}

/// Target CWEs the tool can never hit: no mapped CWE is in their
/// acceptable set.
pub fn undetectable_cwes(
    tool: SastTool,
    rule_map: &RuleCweMap,
    targets: &BTreeSet<CweId>,
    graph: &CweGraph,
    policy: &MatchPolicy,
) -> BTreeSet<CweId> {
    let reachable = rule_map.reachable(tool);
    targets
        .iter()
        .copied()
        .filter(|&t| {
            graph
                .acceptable_set(t, policy)
                .map(|acc| acc.is_disjoint(&reachable))
                .unwrap_or(true)
        })
        .collect()
}
