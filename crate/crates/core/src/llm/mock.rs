//! Offline backends.
//!
//! [`ScriptedBackend`] replays canned responses in order. [`HeuristicBackend`]
//! is a deterministic pattern-matching "analyst" that answers in the verdict
//! format, so whole pipelines can run without a provider. It is not a
//! detector worth measuring; it exists to exercise the plumbing.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use sha2::{Digest, Sha256};

use super::{estimate_tokens, replay_key, ChatBackend, ChatMessage, Completion, CompletionRequest, LlmError, Role};

/// Returns the given responses in order, then repeats the last one.
pub struct ScriptedBackend {
    responses: Mutex<VecDeque<String>>,
    last: Mutex<Option<String>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            last: Mutex::new(None),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, LlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let next = self.responses.lock().unwrap_or_else(|p| p.into_inner()).pop_front();
        let mut last = self.last.lock().unwrap_or_else(|p| p.into_inner());
        let content = match next {
            Some(text) => {
                *last = Some(text.clone());
                text
            }
            None => last
                .clone()
                .ok_or_else(|| LlmError::Protocol("script is empty".into()))?,
        };
        Ok(Completion {
            output_tokens: (content.chars().count() as u64).div_ceil(4),
            input_tokens: estimate_tokens(request.messages),
            content,
        })
    }
}

struct Rule {
    cwe: u32,
    name: &'static str,
    sink: Regex,
    needs_taint: bool,
}

fn rules() -> &'static [Rule] {
    static RULES: OnceLock<Vec<Rule>> = OnceLock::new();
    RULES.get_or_init(|| {
        let r = |cwe, name, pattern: &str, needs_taint| Rule {
            cwe,
            name,
            sink: Regex::new(pattern).expect("valid regex"),
            needs_taint,
        };
        vec![
            r(78, "OS Command Injection", r"\.exec\([^;]*\+\s*data", true),
            r(89, "SQL Injection", r#"(?s)createStatement\(\).*?(executeQuery|executeUpdate|execute|addBatch)\([^;]*\+\s*data"#, true),
            r(23, "Relative Path Traversal", r#"new\s+File\(\s*root\s*\+\s*data"#, true),
            r(36, "Absolute Path Traversal", r#"new\s+File\(\s*data\s*\)"#, true),
            r(79, "Cross-site Scripting", r#"println\([^;]*\+\s*data"#, true),
            r(190, "Integer Overflow", r"data\s*\+\s*1\b|data\s*\*\s*2\b|\+\+\s*data|data\s*\+\+", true),
            r(191, "Integer Underflow", r"data\s*-\s*1\b|--\s*data|data\s*--", true),
            r(129, "Improper Validation of Array Index", r"\[\s*data\s*\]", true),
            r(400, "Uncontrolled Resource Consumption", r"Thread\.sleep\(\s*data|new\s+\w+\[\s*data\s*\]", true),
            r(798, "Use of Hard-coded Credentials", r#"(?i)password\s*=\s*"[^"]+""#, false),
            r(319, "Cleartext Transmission of Sensitive Information", r#"http://[^"]*(?i:pass)"#, false),
        ]
    })
}

fn tainted(code: &str) -> bool {
    static SOURCE: OnceLock<Regex> = OnceLock::new();
    SOURCE
        .get_or_init(|| {
            Regex::new(r"getenv\(|getParameter\(|getQueryString\(|getCookies\(|readLine\(|getProperty\(|getInputStream\(|nextInt\(|parseInt\(")
                .expect("valid regex")
        })
        .is_match(code)
}

fn sanitized(code: &str) -> bool {
    code.contains("prepareStatement(") || code.contains("Math.abs(") || code.contains("< Integer.MAX_VALUE")
}

/// The code under analysis: the last fenced block of the first human turn
/// that has one.
pub fn extract_code(messages: &[ChatMessage]) -> Option<&str> {
    messages
        .iter()
        .filter(|m| m.role == Role::Human)
        .find_map(|m| last_fenced(&m.content))
}

fn last_fenced(text: &str) -> Option<&str> {
    let end = text.rfind("```")?;
    let start = text[..end].rfind("```")?;
    let inner = &text[start + 3..end];
    let inner = inner
        .strip_prefix("java")
        .filter(|rest| rest.starts_with(['\n', '\r', ' ']))
        .unwrap_or(inner);
    Some(inner.trim_matches(['\n', '\r']))
}

/// Rule hits for a piece of code, in rule order.
pub fn heuristic_findings(code: &str) -> Vec<(u32, &'static str)> {
    let taint = tainted(code) && !sanitized(code);
    rules()
        .iter()
        .filter(|r| (!r.needs_taint || taint) && r.sink.is_match(code))
        .map(|r| (r.cwe, r.name))
        .collect()
}

pub struct HeuristicBackend;

impl HeuristicBackend {
    pub fn new() -> Self {
        HeuristicBackend
    }
}

impl Default for HeuristicBackend {
    fn default() -> Self {
        HeuristicBackend::new()
    }
}

fn unit_noise(key: &str, salt: &str) -> f64 {
    let digest = Sha256::digest(format!("{salt}:{key}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

impl ChatBackend for HeuristicBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, LlmError> {
        let key = replay_key(request.messages, request.profile, request.params);
        let last = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Human)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let lower = last.to_ascii_lowercase();

        let content = if lower.contains("best candidate") {
            let pick = 1 + (unit_noise(&key, "vote") * 3.0) as usize;
            format!("The most complete and accurate reasoning is in candidate {pick}.\nbest candidate: {pick}")
        } else if (lower.contains("find problems") || lower.contains("overall feedback"))
            && !lower.contains("vulnerability: <")
        {
            "The previous answer follows the data from its source to the sink. No further problems found.".to_string()
        } else {
            let code = extract_code(request.messages).unwrap_or(last);
            let mut findings = heuristic_findings(code);
            // Sampling noise: above zero temperature an answer sometimes
            // drops its first finding.
            if request.params.temperature > 0.0
                && !findings.is_empty()
                && unit_noise(&key, "drop") < request.params.temperature * 0.3
            {
                findings.remove(0);
            }
            let mut out = String::from("Analysis of the provided code:\n");
            if findings.is_empty() {
                out.push_str("No untrusted input reaches a sensitive sink.\n");
                out.push_str("vulnerability: NO | vulnerability type: N/A | vulnerability name: N/A | explanation: no unsafe data flow found\n");
            } else {
                for (cwe, name) in findings {
                    out.push_str(&format!(
                        "vulnerability: YES | vulnerability type: CWE-{cwe} | vulnerability name: {name} | explanation: untrusted data reaches the sink unchecked\n"
                    ));
                }
            }
            out
        };

        Ok(Completion {
            input_tokens: estimate_tokens(request.messages),
            output_tokens: (content.chars().count() as u64).div_ceil(4),
            content,
        })
    }
}
