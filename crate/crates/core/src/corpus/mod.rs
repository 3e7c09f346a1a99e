//! Turning a Juliet-style labeled corpus into hint-free, single-file test
//! cases.
//!
//! The pipeline per raw case: drop multi-file cases, strip comments, split
//! into a vulnerable and a clean file, rename the test-case class to a
//! neutral `J#####` id and neutralize hint identifiers. The package
//! declaration is kept on disk and only replaced when a file is sent to a
//! model ([`prepare_for_llm`]).

mod hints;
pub mod lexer;
mod select;
mod split;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::cwe::CweId;
use lexer::{lex, LexError, TokenKind};

pub use hints::{hinted_identifiers, rename_hints, rename_identifier, HintLexicon};
pub use select::{select_subset, SplitMix64};
pub use split::{class_layout, classify_member, split_source, ClassLayout, Member, MemberRole, SplitFiles};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("cannot rename to {new_name}: collides with {old_names:?}")]
    RenameCollision {
        new_name: String,
        old_names: Vec<String>,
    },
    #[error("excluded: {0}")]
    Excluded(String),
    #[error("unexpected source structure: {0}")]
    Structure(String),
    #[error("{cwe} has {available} {label} cases, {requested} requested")]
    InsufficientCases {
        cwe: CweId,
        label: &'static str,
        available: usize,
        requested: usize,
    },
    #[error("duplicate case id {0}")]
    DuplicateCase(String),
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One normalized, labeled source file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    pub expected_cwe: CweId,
    pub vulnerable: bool,
    pub relative_path: String,
    pub source_text: String,
}

impl TestCase {
    pub fn record(&self) -> CaseRecord {
        CaseRecord {
            case_id: self.case_id.clone(),
            expected_cwe: self.expected_cwe,
            vulnerable: self.vulnerable,
            path: self.relative_path.clone(),
            digest: content_digest(&self.source_text),
        }
    }
}

/// A manifest entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub expected_cwe: CweId,
    pub vulnerable: bool,
    pub path: String,
    pub digest: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub vulnerable: usize,
    pub clean: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub per_cwe: Option<usize>,
    pub selection: BTreeMap<CweId, LabelCounts>,
    pub cases: Vec<CaseRecord>,
}

impl CorpusManifest {
    /// Sorts cases by id and tallies the per-CWE label counts.
    pub fn new(mut cases: Vec<CaseRecord>, seed: Option<u64>, per_cwe: Option<usize>) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let mut selection: BTreeMap<CweId, LabelCounts> = BTreeMap::new();
        for case in &cases {
            let counts = selection.entry(case.expected_cwe).or_default();
            if case.vulnerable {
                counts.vulnerable += 1;
            } else {
                counts.clean += 1;
            }
        }
        CorpusManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            seed,
            per_cwe,
            selection,
            cases,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for pair in self.cases.windows(2) {
            if pair[0].case_id == pair[1].case_id {
                return Err(CorpusError::DuplicateCase(pair[0].case_id.clone()));
            }
            if pair[0].case_id > pair[1].case_id {
                return Err(CorpusError::Manifest("cases are not sorted by case_id".into()));
            }
        }
        Ok(())
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases
            .binary_search_by(|c| c.case_id.as_str().cmp(case_id))
            .ok()
            .map(|i| &self.cases[i])
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let manifest: CorpusManifest =
            serde_json::from_str(text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CorpusError::Manifest(format!(
                "unsupported schema version {}",
                manifest.schema_version
            )));
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        CorpusManifest::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        content_digest(&self.to_json())
    }
}

pub fn content_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Removes line and block comments. Block comments leave their newlines
/// behind so code keeps its line numbers; trailing whitespace left on a
/// line that held a comment is trimmed.
pub fn strip_comments(source: &str) -> Result<String, LexError> {
    let tokens = lex(source)?;
    let mut out = String::with_capacity(source.len());
    let mut dirty_lines = Vec::new();
    let mut line = 0usize;
    for t in &tokens {
        if t.kind.is_comment() {
            dirty_lines.push(line);
            let newlines = t.text.matches('\n').count();
            out.extend(std::iter::repeat('\n').take(newlines));
            line += newlines;
            dirty_lines.push(line);
        } else {
            out.push_str(t.text);
            line += t.text.matches('\n').count();
        }
    }
    if dirty_lines.is_empty() {
        return Ok(out);
    }
    dirty_lines.dedup();
    let mut result = String::with_capacity(out.len());
    let mut dirty = dirty_lines.into_iter().peekable();
    for (index, piece) in out.split('\n').enumerate() {
        if index > 0 {
            result.push('\n');
        }
        if dirty.peek() == Some(&index) {
            while dirty.peek() == Some(&index) {
                dirty.next();
            }
            let (body, cr) = match piece.strip_suffix('\r') {
                Some(b) => (b, "\r"),
                None => (piece, ""),
            };
            result.push_str(body.trim_end_matches([' ', '\t']));
            result.push_str(cr);
        } else {
            result.push_str(piece);
        }
    }
    Ok(result)
}

/// Replaces (or inserts) the package declaration and drops indentation.
pub fn prepare_for_llm(source: &str, package_override: &str) -> String {
    let Ok(tokens) = lex(source) else {
        return prepare_unlexable(source, package_override);
    };
    let declaration = if package_override.trim().is_empty() {
        String::new()
    } else {
        format!("package {};", package_override.trim())
    };

    let sig: Vec<_> = tokens.iter().filter(|t| !t.kind.is_trivia()).collect();
    let replaced = match sig.first() {
        Some(first) if first.kind == TokenKind::Ident && first.text == "package" => {
            match sig.iter().find(|t| t.text == ";") {
                Some(semi) => {
                    let end = semi.offset + 1;
                    format!("{}{}{}", &source[..first.offset], declaration, &source[end..])
                }
                None => source.to_string(),
            }
        }
        _ if declaration.is_empty() => source.to_string(),
        _ => format!("{declaration}\n{source}"),
    };
    dedent(&replaced)
}

fn dedent(source: &str) -> String {
    let Ok(tokens) = lex(source) else {
        return dedent_lines(source);
    };
    let mut out = String::with_capacity(source.len());
    let mut at_line_start = true;
    for t in &tokens {
        if t.kind == TokenKind::Whitespace {
            for ch in t.text.chars() {
                if ch == '\n' {
                    out.push(ch);
                    at_line_start = true;
                } else if !(at_line_start && ch != '\r') {
                    out.push(ch);
                }
            }
        } else {
            out.push_str(t.text);
            at_line_start = false;
        }
    }
    out
}

fn dedent_lines(source: &str) -> String {
    source
        .split('\n')
        .map(|l| l.trim_start_matches(|c: char| c.is_whitespace() && c != '\r'))
        .collect::<Vec<_>>()
        .join("\n")
}

fn prepare_unlexable(source: &str, package_override: &str) -> String {
    let re = Regex::new(r"^\s*package\s+[^;]*;").expect("valid regex");
    let declaration = format!("package {};", package_override.trim());
    let replaced = if re.is_match(source) {
        re.replace(source, declaration.as_str()).into_owned()
    } else {
        format!("{declaration}\n{source}")
    };
    dedent_lines(&replaced)
}

/// One raw file of a raw case.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFile {
    pub relative_path: String,
    pub text: String,
}

/// A raw test case: one or more files sharing a case stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCase {
    pub stem: String,
    pub directory: String,
    pub expected_cwe: CweId,
    pub files: Vec<RawFile>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub case: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub cases: Vec<TestCase>,
    pub manifest: CorpusManifest,
    pub excluded: Vec<Exclusion>,
}

fn stem_pattern() -> Regex {
    Regex::new(r"^(?P<stem>CWE(?P<cwe>\d+)_.*_\d{2})(?P<part>[a-z]|_(?:bad|base|good\w*))?$")
        .expect("valid regex")
}

/// Finds every `.java` test-case file under `root` and groups them by case
/// stem. Files that do not follow the `CWE<n>_..._<nn>` naming are support
/// code and are skipped.
pub fn discover_raw_cases(root: &Path) -> Result<Vec<RawCase>, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let pattern = stem_pattern();
    let mut groups: BTreeMap<(String, String), RawCase> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            CorpusError::io(&path, e.into())
        })?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().is_none_or(|e| e != "java") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some(caps) = pattern.captures(stem) else {
            continue;
        };
        let Some(cwe) = caps["cwe"].parse().ok().and_then(CweId::new) else {
            continue;
        };
        let relative = path.strip_prefix(root).unwrap_or(path);
        let directory = relative
            .parent()
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_default();
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let case_stem = caps["stem"].to_string();
        groups
            .entry((directory.clone(), case_stem.clone()))
            .or_insert_with(|| RawCase {
                stem: case_stem,
                directory,
                expected_cwe: cwe,
                files: Vec::new(),
            })
            .files
            .push(RawFile {
                relative_path: relative.to_string_lossy().replace('\\', "/"),
                text,
            });
    }
    Ok(groups.into_values().collect())
}

/// Comment stripping and splitting for one raw case.
pub fn split_case(raw: &RawCase) -> Result<SplitFiles, CorpusError> {
    if raw.files.len() != 1 {
        return Err(CorpusError::Excluded(format!(
            "spans {} files",
            raw.files.len()
        )));
    }
    let stripped = strip_comments(&raw.files[0].text)?;
    split_source(&stripped)
}

/// Runs the full normalization over a raw corpus directory.
pub fn prepare_corpus(root: &Path, lexicon: &HintLexicon) -> Result<PreparedCorpus, CorpusError> {
    let raw_cases = discover_raw_cases(root)?;
    prepare_raw_cases(&raw_cases, lexicon)
}

pub fn prepare_raw_cases(
    raw_cases: &[RawCase],
    lexicon: &HintLexicon,
) -> Result<PreparedCorpus, CorpusError> {
    struct Pending<'a> {
        order_key: String,
        raw: &'a RawCase,
        class_name: String,
        vulnerable: bool,
        text: String,
    }

    let mut excluded = Vec::new();
    let mut pending = Vec::new();
    for raw in raw_cases {
        let name = format!("{}/{}", raw.directory, raw.stem);
        let files = match split_case(raw) {
            Ok(files) => files,
            Err(CorpusError::Excluded(reason)) => {
                tracing::info!(case = %name, %reason, "excluded");
                excluded.push(Exclusion { case: name, reason });
                continue;
            }
            Err(e) => return Err(e),
        };
        let class_name = class_layout(&files.vulnerable)?.class_name;
        for (vulnerable, text) in [(true, files.vulnerable), (false, files.clean)] {
            let label = if vulnerable { "vulnerable" } else { "clean" };
            pending.push(Pending {
                order_key: content_digest(&format!("{name}#{label}")),
                raw,
                class_name: class_name.clone(),
                vulnerable,
                text,
            });
        }
    }

    // Ids follow a digest order so neither the label nor the original name
    // can be read off the numbering.
    pending.sort_by(|a, b| a.order_key.cmp(&b.order_key));
    let mut cases = Vec::with_capacity(pending.len());
    for (index, p) in pending.into_iter().enumerate() {
        let case_id = format!("J{:05}", index + 1);
        let renamed = rename_identifier(&p.text, &p.class_name, &case_id)?;
        let source_text = rename_hints(&renamed, lexicon)?;
        let relative_path = if p.raw.directory.is_empty() {
            format!("{case_id}.java")
        } else {
            format!("{}/{case_id}.java", p.raw.directory)
        };
        cases.push(TestCase {
            case_id,
            expected_cwe: p.raw.expected_cwe,
            vulnerable: p.vulnerable,
            relative_path,
            source_text,
        });
    }

    let manifest = CorpusManifest::new(cases.iter().map(TestCase::record).collect(), None, None);
    Ok(PreparedCorpus {
        cases,
        manifest,
        excluded,
    })
}

/// Writes the normalized tree and `manifest.json` under `out_dir`.
pub fn write_corpus(
    out_dir: &Path,
    cases: &[TestCase],
    manifest: &CorpusManifest,
) -> Result<(), CorpusError> {
    for case in cases {
        let path = out_dir.join(&case.relative_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
        }
        std::fs::write(&path, &case.source_text).map_err(|e| CorpusError::io(&path, e))?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CorpusError::io(out_dir, e))?;
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| CorpusError::io(&path, e))
}

/// Reads the test cases a manifest lists, verifying each content digest.
pub fn load_cases(corpus_dir: &Path, manifest: &CorpusManifest) -> Result<Vec<TestCase>, CorpusError> {
    manifest
        .cases
        .iter()
        .map(|record| {
            let path = corpus_dir.join(&record.path);
            let source_text =
                std::fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
            if content_digest(&source_text) != record.digest {
                return Err(CorpusError::Manifest(format!(
                    "{} does not match its manifest digest",
                    record.path
                )));
            }
            Ok(TestCase {
                case_id: record.case_id.clone(),
                expected_cwe: record.expected_cwe,
                vulnerable: record.vulnerable,
                relative_path: record.path.clone(),
                source_text,
            })
        })
        .collect()
}
