use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lexer::{lex, significant, Token, TokenKind};
use super::CorpusError;

const DEFAULT_LEXICON: &str = include_str!("../../data/hint_lexicon.toml");

/// Hint tokens to neutralize inside identifiers.
///
/// Matching is case-insensitive and the replacement takes the case shape of
/// the matched text: `bad` becomes `process`, `Bad` becomes `Process` and
/// `BAD` becomes `PROCESS`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintLexicon {
    pub replacements: BTreeMap<String, String>,
    /// Substitute for `CWE` followed by digits inside an identifier.
    pub cwe_pattern_replacement: String,
}

impl Default for HintLexicon {
    fn default() -> Self {
        toml::from_str(DEFAULT_LEXICON).expect("bundled lexicon parses")
    }
}

impl HintLexicon {
    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        let lexicon: HintLexicon =
            toml::from_str(text).map_err(|e| CorpusError::Lexicon(e.to_string()))?;
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        HintLexicon::from_toml(&text)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let ident_safe = |s: &str| {
            !s.is_empty()
                && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                && !s.starts_with(|c: char| c.is_ascii_digit())
        };
        for (hint, replacement) in &self.replacements {
            if hint.is_empty() || !hint.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(CorpusError::Lexicon(format!("hint {hint:?} is not alphanumeric")));
            }
            if !ident_safe(replacement) {
                return Err(CorpusError::Lexicon(format!(
                    "replacement {replacement:?} for {hint:?} is not identifier-safe"
                )));
            }
            if self.replacements.keys().any(|h| contains_ci(replacement, h)) {
                return Err(CorpusError::Lexicon(format!(
                    "replacement {replacement:?} itself contains a hint"
                )));
            }
        }
        if !ident_safe(&self.cwe_pattern_replacement) {
            return Err(CorpusError::Lexicon("cwe_pattern_replacement is not identifier-safe".into()));
        }
        Ok(())
    }

    // Longest hint first so that overlapping hints resolve the same way
    // every time.
    fn ordered_hints(&self) -> Vec<(&str, &str)> {
        let mut hints: Vec<(&str, &str)> = self
            .replacements
            .iter()
            .map(|(h, r)| (h.as_str(), r.as_str()))
            .collect();
        hints.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));
        hints
    }

    /// The neutralized form of one identifier; `None` when it holds no hint.
    pub fn neutralize(&self, ident: &str) -> Option<String> {
        let hints = self.ordered_hints();
        let mut out = String::with_capacity(ident.len() + 8);
        let mut changed = false;
        let mut rest = ident;
        'scan: while !rest.is_empty() {
            if let Some(len) = cwe_pattern_len(rest) {
                out.push_str(&shape_like(&rest[..3], &self.cwe_pattern_replacement));
                rest = &rest[len..];
                changed = true;
                continue;
            }
            for (hint, replacement) in &hints {
                if let Some(head) = rest.get(..hint.len()) {
                    if head.eq_ignore_ascii_case(hint) {
                        out.push_str(&shape_like(head, replacement));
                        rest = &rest[hint.len()..];
                        changed = true;
                        continue 'scan;
                    }
                }
            }
            let ch = rest.chars().next().expect("non-empty");
            out.push(ch);
            rest = &rest[ch.len_utf8()..];
        }
        changed.then_some(out)
    }

    /// True when `ident` still carries a hint token or a CWE number.
    pub fn has_hint(&self, ident: &str) -> bool {
        self.neutralize(ident).is_some()
    }
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_ascii_lowercase().contains(&needle.to_ascii_lowercase())
}

fn cwe_pattern_len(s: &str) -> Option<usize> {
    let head = s.get(..3)?;
    if !head.eq_ignore_ascii_case("cwe") {
        return None;
    }
    let digits = s[3..].bytes().take_while(u8::is_ascii_digit).count();
    (digits > 0).then_some(3 + digits)
}

fn shape_like(matched: &str, replacement: &str) -> String {
    let letters: Vec<char> = matched.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        return replacement.to_uppercase();
    }
    let mut chars = replacement.chars();
    match (matched.chars().next(), chars.next()) {
        (Some(m), Some(first)) if m.is_uppercase() => first.to_uppercase().chain(chars).collect(),
        (Some(_), Some(first)) => first.to_lowercase().chain(chars).collect(),
        _ => replacement.to_string(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Namespaces {
    method: bool,
    other: bool,
}

impl Namespaces {
    fn add(&mut self, called: bool) {
        if called {
            self.method = true;
        } else {
            self.other = true;
        }
    }

    fn overlaps(self, other: Namespaces) -> bool {
        (self.method && other.method) || (self.other && other.other)
    }

    fn union(self, other: Namespaces) -> Namespaces {
        Namespaces {
            method: self.method || other.method,
            other: self.other || other.other,
        }
    }
}

/// Byte ranges of `package ...;` and `import ...;` declarations. Identifiers
/// inside them are left alone.
pub(crate) fn declaration_ranges(tokens: &[Token<'_>]) -> Vec<(usize, usize)> {
    let sig = significant(tokens);
    let mut ranges = Vec::new();
    let mut depth = 0i32;
    let mut i = 0;
    while i < sig.len() {
        let t = sig[i];
        match (t.kind, t.text) {
            (TokenKind::Punct, "{") => depth += 1,
            (TokenKind::Punct, "}") => depth -= 1,
            (TokenKind::Ident, "package" | "import") if depth == 0 => {
                if let Some(end) = sig[i..].iter().position(|s| s.text == ";") {
                    let last = sig[i + end];
                    ranges.push((t.offset, last.offset + last.text.len()));
                    i += end;
                }
            }
            _ => {}
        }
        i += 1;
    }
    ranges
}

/// Rewrites every identifier holding a hint token or CWE number, outside
/// package and import declarations. A given identifier maps to the same
/// new name everywhere in the file.
pub fn rename_hints(source: &str, lexicon: &HintLexicon) -> Result<String, CorpusError> {
    let tokens = lex(source)?;
    let skip = declaration_ranges(&tokens);
    let in_decl = |offset: usize| skip.iter().any(|&(s, e)| offset >= s && offset < e);

    // Methods and variables live in separate namespaces: a method renamed
    // to `process` may coexist with a local named `process`.
    let mut mapping: BTreeMap<&str, String> = BTreeMap::new();
    let mut uses: BTreeMap<&str, Namespaces> = BTreeMap::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.kind != TokenKind::Ident || in_decl(t.offset) {
            continue;
        }
        let called = tokens[i + 1..]
            .iter()
            .find(|n| !n.kind.is_trivia())
            .is_some_and(|n| n.text == "(");
        uses.entry(t.text).or_default().add(called);
        if let Some(new) = lexicon.neutralize(t.text) {
            mapping.insert(t.text, new);
        }
    }

    let mut targets: BTreeMap<&str, (&str, Namespaces)> = BTreeMap::new();
    for (old, new) in &mapping {
        let space = uses[old];
        if let Some((prev, prev_space)) = targets.get(new.as_str()) {
            if prev_space.overlaps(space) {
                return Err(CorpusError::RenameCollision {
                    new_name: new.clone(),
                    old_names: vec![prev.to_string(), old.to_string()],
                });
            }
        }
        if let Some(existing) = uses.get(new.as_str()) {
            if !mapping.contains_key(new.as_str()) && existing.overlaps(space) {
                return Err(CorpusError::RenameCollision {
                    new_name: new.clone(),
                    old_names: vec![old.to_string()],
                });
            }
        }
        let entry = targets.entry(new.as_str()).or_insert((old, Namespaces::default()));
        entry.1 = entry.1.union(space);
    }

    let mut out = String::with_capacity(source.len());
    for t in &tokens {
        match mapping.get(t.text) {
            Some(new) if t.kind == TokenKind::Ident && !in_decl(t.offset) => out.push_str(new),
            _ => out.push_str(t.text),
        }
    }
    Ok(out)
}

/// Replaces one identifier everywhere outside package/import declarations.
pub fn rename_identifier(source: &str, old: &str, new: &str) -> Result<String, CorpusError> {
    let tokens = lex(source)?;
    let skip = declaration_ranges(&tokens);
    let mut out = String::with_capacity(source.len());
    for t in &tokens {
        let in_decl = skip.iter().any(|&(s, e)| t.offset >= s && t.offset < e);
        if t.kind == TokenKind::Ident && t.text == old && !in_decl {
            out.push_str(new);
        } else {
            out.push_str(t.text);
        }
    }
    Ok(out)
}

/// Identifiers (outside package/import declarations) that still carry a
/// hint. Empty for a fully normalized file.
pub fn hinted_identifiers(source: &str, lexicon: &HintLexicon) -> Result<Vec<String>, CorpusError> {
    let tokens = lex(source)?;
    let skip = declaration_ranges(&tokens);
    Ok(tokens
        .iter()
        .filter(|t| t.kind == TokenKind::Ident)
        .filter(|t| !skip.iter().any(|&(s, e)| t.offset >= s && t.offset < e))
        .filter(|t| lexicon.has_hint(t.text))
        .map(|t| t.text.to_string())
        .collect())
}
