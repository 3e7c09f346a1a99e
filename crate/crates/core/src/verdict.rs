//! Parsing model responses into verdicts.
//!
//! The requested shape is
//! `vulnerability: <YES or NO> | vulnerability type: <CWE_ID> | ...`, one
//! line per finding. Models drift from it: decorations around values
//! (`**YES**`), line breaks instead of `|`, `CWE_89` instead of `CWE-89`, a
//! description in place of the `vulnerability` key, hedged answers such as
//! `MAYBE`. Parsing is total; anything that cannot be read becomes a
//! [`Diagnostic`] rather than an error.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::cwe::CweId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Presence {
    Yes,
    No,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub present: Presence,
    pub cwe: Option<CweId>,
    pub name: Option<String>,
    pub explanation: Option<String>,
    /// The decision value exactly as it appears in the response.
    pub raw_decision_token: String,
    /// 1-based line of the decision.
    pub line: usize,
    /// A positive decision without a readable CWE.
    pub malformed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    NoVerdict,
    HedgedDecision,
    UnrecognizedDecision,
    DescriptionKeyedDecision,
    MissingCwe,
    UnparseableCwe,
    OrphanField,
    UnparsedYes,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub line: Option<usize>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub verdicts: Vec<Verdict>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedResponse {
    /// CWEs with at least one positive verdict. A `yes` outweighs a `no`
    /// for the same CWE.
    pub fn reported_cwes(&self) -> BTreeSet<CweId> {
        self.verdicts
            .iter()
            .filter(|v| v.present == Presence::Yes)
            .filter_map(|v| v.cwe)
            .collect()
    }

    pub fn has_positive(&self) -> bool {
        self.verdicts.iter().any(|v| v.present == Presence::Yes)
    }

    /// True when a human should look at the response.
    pub fn needs_review(&self) -> bool {
        !self.diagnostics.is_empty()
    }
}

/// How a decision token was read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecisionReading {
    Yes,
    No,
    /// MAYBE, POSSIBLE and similar; scored as no.
    Hedged,
    /// Anything else; scored as no.
    Unrecognized,
}

impl DecisionReading {
    pub fn presence(self) -> Presence {
        match self {
            DecisionReading::Yes => Presence::Yes,
            _ => Presence::No,
        }
    }
}

const DECORATION: &[char] = &['*', '_', '`', '"', '\'', '~', '[', ']', '(', ')', '<', '>', '{', '}'];

fn core_word(token: &str) -> Option<&str> {
    static WORD: OnceLock<Regex> = OnceLock::new();
    let re = WORD.get_or_init(|| Regex::new(r"^[A-Za-z0-9]+(?:/[A-Za-z0-9]+)?").expect("valid regex"));
    re.find(token).map(|m| m.as_str())
}

pub fn read_decision(token: &str) -> DecisionReading {
    let trimmed = token.trim_start_matches(|c: char| c.is_whitespace() || "*_`\"'~".contains(c));
    if trimmed.starts_with('<') {
        return DecisionReading::Unrecognized;
    }
    let Some(word) = core_word(trimmed) else {
        return DecisionReading::Unrecognized;
    };
    match word.to_ascii_uppercase().as_str() {
        "YES" | "TRUE" => DecisionReading::Yes,
        "NO" | "FALSE" | "NONE" | "N/A" => DecisionReading::No,
        "MAYBE" | "POSSIBLE" | "POSSIBLY" | "PROBABLY" | "LIKELY" | "UNLIKELY" | "POTENTIAL"
        | "POTENTIALLY" | "PARTIAL" | "PARTIALLY" | "UNCERTAIN" | "UNKNOWN" | "UNCLEAR" => {
            DecisionReading::Hedged
        }
        _ => DecisionReading::Unrecognized,
    }
}

/// `yes` only for the YES family; every other token counts as `no`.
pub fn normalize_decision(token: &str) -> Presence {
    read_decision(token).presence()
}

fn cwe_pattern() -> &'static Regex {
    static CWE: OnceLock<Regex> = OnceLock::new();
    CWE.get_or_init(|| Regex::new(r"(?i)\bcwe[\s*_`]*[-_:#]?[\s*_`]*0*([0-9]+)").expect("valid regex"))
}

/// Reads a CWE identifier from a type-field value: `CWE-89`, `CWE_89`,
/// `cwe-89`, `**CWE-089**` and a bare `89` all give CWE-89.
pub fn normalize_cwe_token(token: &str) -> Option<CweId> {
    if let Some(caps) = cwe_pattern().captures(token) {
        return caps[1].parse().ok().and_then(CweId::new);
    }
    let bare = token.trim_matches(|c: char| c.is_whitespace() || DECORATION.contains(&c) || ".,;:".contains(c));
    if !bare.is_empty() && bare.bytes().all(|b| b.is_ascii_digit()) {
        return bare.trim_start_matches('0').parse().ok().and_then(CweId::new);
    }
    None
}

fn all_cwes(value: &str) -> Vec<CweId> {
    let mut found: Vec<CweId> = cwe_pattern()
        .captures_iter(value)
        .filter_map(|c| c[1].parse().ok().and_then(CweId::new))
        .collect();
    if found.is_empty() {
        found.extend(normalize_cwe_token(value));
    }
    let mut seen = BTreeSet::new();
    found.retain(|c| seen.insert(*c));
    found
}

fn is_absent_value(value: &str) -> bool {
    let v = value.trim_matches(|c: char| c.is_whitespace() || DECORATION.contains(&c) || ".,;:".contains(c));
    matches!(v.to_ascii_uppercase().as_str(), "" | "N/A" | "NA" | "NONE" | "-" | "NULL" | "NOT APPLICABLE")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Key {
    Decision,
    Type,
    Name,
    Explanation,
}

fn key_pattern() -> &'static Regex {
    static KEY: OnceLock<Regex> = OnceLock::new();
    KEY.get_or_init(|| {
        Regex::new(
            r"(?i)\b(vulnerability[\s*_`]*type|vulnerability[\s*_`]*name|cwe[\s_-]*id|cwe[\s_-]*name|vulnerability|vulnerable|cwe|explanation|details?|reason(?:ing)?|description|justification)[\s*_`]*:",
        )
        .expect("valid regex")
    })
}

fn classify_key(key: &str) -> Key {
    let k: String = key.chars().filter(char::is_ascii_alphabetic).collect::<String>().to_ascii_lowercase();
    match k.as_str() {
        "vulnerabilitytype" | "cweid" | "cwe" => Key::Type,
        "vulnerabilityname" | "cwename" => Key::Name,
        "vulnerability" | "vulnerable" => Key::Decision,
        _ => Key::Explanation,
    }
}

struct Field<'a> {
    key: Option<Key>,
    /// Text before the key, or the whole field when unkeyed.
    prefix: &'a str,
    value: &'a str,
}

fn read_field(field: &str) -> Field<'_> {
    match key_pattern().captures(field) {
        Some(caps) => {
            let whole = caps.get(0).expect("match");
            Field {
                key: Some(classify_key(&caps[1])),
                prefix: &field[..whole.start()],
                value: field[whole.end()..].trim(),
            }
        }
        None => Field {
            key: None,
            prefix: field,
            value: field.trim(),
        },
    }
}

// The decision value as written: leading decoration, the word, trailing
// decoration.
fn raw_token(value: &str) -> &str {
    let start = value.len() - value.trim_start().len();
    let v = &value[start..];
    let lead = v.len() - v.trim_start_matches(|c: char| "*_`\"'~<[(".contains(c)).len();
    let after_lead = &v[lead..];
    let word_len = after_lead
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '/'))
        .unwrap_or(after_lead.len());
    let tail = &after_lead[word_len..];
    let trail = tail.len() - tail.trim_start_matches(|c: char| "*_`\"'~>])".contains(c)).len();
    let end = lead + word_len + trail;
    if end == 0 {
        v.split_whitespace().next().unwrap_or("")
    } else {
        &v[..end]
    }
}

struct Pending {
    present: Presence,
    raw: String,
    line: usize,
    type_seen: bool,
    type_value: Option<String>,
    cwes: Vec<CweId>,
    name: Option<String>,
    explanation: Option<String>,
}

fn clean_text(value: &str) -> Option<String> {
    let v = value.trim().trim_matches(|c: char| "*_`".contains(c)).trim();
    (!v.is_empty() && !is_absent_value(v)).then(|| v.to_string())
}

fn parenthetical_name(value: &str) -> Option<String> {
    let open = value.find('(')?;
    let close = value[open..].find(')')? + open;
    clean_text(&value[open + 1..close])
}

struct Parser {
    out: ParsedResponse,
    open: Option<Pending>,
}

impl Parser {
    fn diag(&mut self, kind: DiagnosticKind, line: Option<usize>, detail: impl Into<String>) {
        self.out.diagnostics.push(Diagnostic {
            kind,
            line,
            detail: detail.into(),
        });
    }

    fn close(&mut self) {
        let Some(p) = self.open.take() else { return };
        if p.cwes.is_empty() {
            if let Some(value) = &p.type_value {
                if !is_absent_value(value) {
                    self.diag(DiagnosticKind::UnparseableCwe, Some(p.line), format!("type value {value:?}"));
                }
            }
            let malformed = p.present == Presence::Yes;
            if malformed {
                self.diag(DiagnosticKind::MissingCwe, Some(p.line), "positive verdict without a CWE");
            }
            self.out.verdicts.push(Verdict {
                present: p.present,
                cwe: None,
                name: p.name,
                explanation: p.explanation,
                raw_decision_token: p.raw,
                line: p.line,
                malformed,
            });
            return;
        }
        for cwe in p.cwes {
            self.out.verdicts.push(Verdict {
                present: p.present,
                cwe: Some(cwe),
                name: p.name.clone(),
                explanation: p.explanation.clone(),
                raw_decision_token: p.raw.clone(),
                line: p.line,
                malformed: false,
            });
        }
    }

    fn open_decision(&mut self, value: &str, line: usize, described: bool) {
        self.close();
        let raw = raw_token(value).to_string();
        let reading = read_decision(&raw);
        match reading {
            DecisionReading::Hedged => {
                self.diag(DiagnosticKind::HedgedDecision, Some(line), format!("{raw:?} counted as no"))
            }
            DecisionReading::Unrecognized => {
                self.diag(DiagnosticKind::UnrecognizedDecision, Some(line), format!("{raw:?} counted as no"))
            }
            _ => {}
        }
        if described {
            self.diag(
                DiagnosticKind::DescriptionKeyedDecision,
                Some(line),
                "decision keyed by a description",
            );
        }
        self.open = Some(Pending {
            present: reading.presence(),
            raw,
            line,
            type_seen: false,
            type_value: None,
            cwes: Vec::new(),
            name: None,
            explanation: None,
        });
    }

    fn line(&mut self, text: &str, line_no: usize) {
        let fields: Vec<Field<'_>> = text.split('|').map(read_field).collect();
        let has_type = fields.iter().any(|f| f.key == Some(Key::Type));
        let has_decision = fields.iter().any(|f| f.key == Some(Key::Decision));
        let keyed = fields.iter().any(|f| f.key.is_some());

        if !keyed {
            if !text.trim().is_empty() {
                self.close();
            }
            return;
        }

        let mut opened_here = false;
        for (index, field) in fields.iter().enumerate() {
            match field.key {
                Some(Key::Decision) => {
                    self.open_decision(field.value, line_no, false);
                    opened_here = true;
                }
                None if index == 0 && !has_decision && has_type => {
                    if let Some(token) = read_described_decision(field.prefix) {
                        self.open_decision(token, line_no, true);
                        opened_here = true;
                    }
                }
                Some(Key::Type) => match self.open.as_mut() {
                    Some(p) if !p.type_seen => {
                        p.type_seen = true;
                        p.type_value = Some(field.value.to_string());
                        p.cwes = all_cwes(field.value);
                        if p.name.is_none() {
                            p.name = parenthetical_name(field.value);
                        }
                    }
                    _ => self.diag(
                        DiagnosticKind::OrphanField,
                        Some(line_no),
                        format!("type field {:?} without a decision", field.value),
                    ),
                },
                Some(Key::Name) => {
                    if let Some(p) = self.open.as_mut() {
                        p.name = clean_text(field.value).or(p.name.take());
                    }
                }
                Some(Key::Explanation) => {
                    if let Some(p) = self.open.as_mut() {
                        if p.explanation.is_none() {
                            p.explanation = clean_text(field.value);
                        }
                    }
                }
                None => {
                    if opened_here {
                        if let Some(p) = self.open.as_mut() {
                            if p.explanation.is_none() {
                                p.explanation = clean_text(field.value);
                            }
                        }
                    }
                }
            }
        }
    }
}

// `<description>: YES` used in place of the decision key.
fn read_described_decision(field: &str) -> Option<&str> {
    static DESC: OnceLock<Regex> = OnceLock::new();
    let re = DESC.get_or_init(|| {
        Regex::new(r"^[^:]{1,80}:\s*(?P<tok>[*_`]*(?i:yes|no|true|false|maybe|possible)[*_`]*)\s*$")
            .expect("valid regex")
    });
    re.captures(field.trim()).and_then(|c| c.name("tok")).map(|m| m.as_str())
}

/// Extracts every verdict from a response, in order.
pub fn parse_verdicts(response: &str) -> ParsedResponse {
    let mut parser = Parser {
        out: ParsedResponse::default(),
        open: None,
    };
    for (index, line) in response.split('\n').enumerate() {
        parser.line(line, index + 1);
    }
    parser.close();

    if parser.out.verdicts.is_empty() {
        parser.diag(DiagnosticKind::NoVerdict, None, "no verdict found");
    }
    if !parser.out.has_positive() && contains_word(response, "YES") {
        parser.diag(DiagnosticKind::UnparsedYes, None, "response says YES outside a verdict");
    }
    parser.out
}

fn contains_word(text: &str, word: &str) -> bool {
    text.match_indices(word).any(|(i, _)| {
        let before = text[..i].chars().next_back();
        let after = text[i + word.len()..].chars().next();
        !before.is_some_and(|c| c.is_alphanumeric()) && !after.is_some_and(|c| c.is_alphanumeric())
    })
}
