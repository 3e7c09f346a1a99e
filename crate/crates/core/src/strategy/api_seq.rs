use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::lexer::{lex, significant, LexError, Token, TokenKind};

/// One method invocation, in source order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCall {
    /// Dotted receiver when it is a plain name chain (`System.out`,
    /// `Runtime`); `None` for unqualified calls and calls on expressions.
    pub receiver: Option<String>,
    pub name: String,
}

impl fmt::Display for ApiCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.receiver {
            Some(r) => write!(f, "{r}.{}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

/// Words that look like a call when followed by `(` but are not one.
const NOT_CALLS: &[&str] = &[
    "if", "for", "while", "switch", "catch", "synchronized", "return", "new", "this", "super", "try", "do", "else",
    "throw", "assert", "case",
];

/// Keywords that may directly precede a call expression.
const EXPRESSION_KEYWORDS: &[&str] = &["return", "throw", "else", "case", "assert", "yield", "do"];

/// Method invocations in order of appearance. Declarations, constructor
/// calls, annotations and control-flow keywords are skipped.
pub fn extract_api_sequence(source: &str) -> Result<Vec<ApiCall>, LexError> {
    let tokens = lex(source)?;
    let sig = significant(&tokens);
    let mut calls = Vec::new();
    for i in 0..sig.len() {
        let t = sig[i];
        if t.kind != TokenKind::Ident || sig.get(i + 1).map(|n| n.text) != Some("(") {
            continue;
        }
        if NOT_CALLS.contains(&t.text) {
            continue;
        }
        let (receiver, before) = receiver_chain(&sig, i);
        let prev = before.map(|j| sig[j]);
        if prev.is_some_and(|p| p.text == "new" || p.text == "@") {
            continue;
        }
        let qualified = i > 0 && sig[i - 1].text == ".";
        if !qualified && is_declaration(&sig, i, before) {
            continue;
        }
        calls.push(ApiCall {
            receiver,
            name: t.text.to_string(),
        });
    }
    Ok(calls)
}

/// The dotted name chain before `sig[at]` and the index of the token that
/// precedes the whole chain.
fn receiver_chain(sig: &[Token<'_>], at: usize) -> (Option<String>, Option<usize>) {
    let mut parts: Vec<&str> = Vec::new();
    let mut j = at;
    let mut evident = true;
    while j >= 2 && sig[j - 1].text == "." {
        let r = sig[j - 2];
        if r.kind == TokenKind::Ident {
            parts.push(r.text);
            j -= 2;
        } else {
            // Receiver is a call result, index or literal.
            evident = false;
            j -= 1;
            break;
        }
    }
    let receiver = if evident && !parts.is_empty() {
        parts.reverse();
        Some(parts.join("."))
    } else {
        None
    };
    (receiver, j.checked_sub(1))
}

fn is_declaration(sig: &[Token<'_>], at: usize, prev: Option<usize>) -> bool {
    let body_follows = || matches!(after_parens(sig, at + 1).map(|t| t.text), Some("{") | Some("throws"));
    match prev.map(|j| (j, sig[j])) {
        Some((_, p)) if p.kind == TokenKind::Ident && !EXPRESSION_KEYWORDS.contains(&p.text) => true,
        Some((j, p)) if p.text == ">" => closes_type_arguments(sig, j) || body_follows(),
        Some((_, p)) if p.text == "]" => {
            body_follows() || matches!(after_parens(sig, at + 1).map(|t| t.text), Some(";"))
        }
        _ => body_follows(),
    }
}

/// Whether the `>` at `close` ends a type argument list (`List<String>`)
/// rather than a comparison.
fn closes_type_arguments(sig: &[Token<'_>], close: usize) -> bool {
    let mut depth = 0usize;
    for k in (0..=close).rev() {
        match sig[k].text {
            ">" => depth += 1,
            "<" => {
                depth -= 1;
                if depth == 0 {
                    return k > 0 && sig[k - 1].kind == TokenKind::Ident;
                }
            }
            ";" | "{" | "}" | "=" | "(" | ")" | "&&" | "||" => return false,
            _ => {}
        }
    }
    false
}

fn after_parens<'a>(sig: &[Token<'a>], open: usize) -> Option<Token<'a>> {
    let mut depth = 0usize;
    for (k, t) in sig.iter().enumerate().skip(open) {
        match t.text {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth == 0 {
                    return sig.get(k + 1).copied();
                }
            }
            _ => {}
        }
    }
    None
}

/// The `{api_sequence}` slot text.
pub fn format_api_sequence(calls: &[ApiCall]) -> String {
    if calls.is_empty() {
        return "none".to_string();
    }
    calls.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}
