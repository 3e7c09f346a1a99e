//! Splitting a labeled test case into a vulnerable file and a clean file.
//!
//! Members of the test-case class are sorted by name: `bad*` members go to
//! the vulnerable file, `good*` members to the clean file, and everything
//! else (fields, `main`, helpers) to both.

use super::lexer::{lex, Token, TokenKind};
use super::CorpusError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemberRole {
    Bad,
    Good,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Member {
    pub name: Option<String>,
    pub role: MemberRole,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassLayout {
    pub class_name: String,
    /// Byte offset just after the class body's opening brace.
    pub body_start: usize,
    /// Byte offset of the class body's closing brace.
    pub body_end: usize,
    pub members: Vec<Member>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitFiles {
    pub vulnerable: String,
    pub clean: String,
}

pub fn classify_member(name: &str) -> MemberRole {
    let lower = name.to_ascii_lowercase();
    if lower.starts_with("bad") {
        MemberRole::Bad
    } else if lower.starts_with("good") {
        MemberRole::Good
    } else if lower.contains("bad") {
        MemberRole::Bad
    } else if lower.contains("good") {
        MemberRole::Good
    } else {
        MemberRole::Shared
    }
}

/// Locates the first top-level class and its members.
pub fn class_layout(source: &str) -> Result<ClassLayout, CorpusError> {
    let tokens = lex(source)?;
    let sig: Vec<Token<'_>> = tokens.iter().copied().filter(|t| !t.kind.is_trivia()).collect();

    let class_at = sig
        .iter()
        .position(|t| t.kind == TokenKind::Ident && t.text == "class")
        .ok_or_else(|| CorpusError::Structure("no class declaration".into()))?;
    let class_name = sig
        .get(class_at + 1)
        .filter(|t| t.kind == TokenKind::Ident)
        .ok_or_else(|| CorpusError::Structure("class without a name".into()))?
        .text
        .to_string();
    let open = sig[class_at..]
        .iter()
        .position(|t| t.text == "{")
        .map(|i| class_at + i)
        .ok_or_else(|| CorpusError::Structure("class without a body".into()))?;

    let body_start = sig[open].offset + 1;
    let mut members = Vec::new();
    let mut depth = 0usize;
    let mut member_first: Option<usize> = None;
    let mut i = open + 1;
    let mut body_end = None;

    while i < sig.len() {
        let t = sig[i];
        if depth == 0 && t.text == "}" {
            body_end = Some(t.offset);
            break;
        }
        if depth == 0 && member_first.is_none() {
            member_first = Some(i);
        }
        match t.text {
            "{" => depth += 1,
            "}" => {
                depth -= 1;
                if depth == 0 {
                    let mut last = i;
                    if sig.get(i + 1).is_some_and(|n| n.text == ";") {
                        last = i + 1;
                    }
                    members.push(make_member(&sig, member_first.take().expect("open member"), last));
                    i = last;
                }
            }
            ";" if depth == 0 => {
                members.push(make_member(&sig, member_first.take().expect("open member"), i));
            }
            _ => {}
        }
        i += 1;
    }

    let body_end = body_end.ok_or_else(|| CorpusError::Structure("unbalanced class body".into()))?;
    Ok(ClassLayout {
        class_name,
        body_start,
        body_end,
        members,
    })
}

fn make_member(sig: &[Token<'_>], first: usize, last: usize) -> Member {
    let tokens = &sig[first..=last];
    let name = member_name(tokens);
    let role = name.as_deref().map_or(MemberRole::Shared, classify_member);
    Member {
        name,
        role,
        start: sig[first].offset,
        end: sig[last].offset + sig[last].text.len(),
    }
}

// Method: identifier before the first `(`. Nested type: identifier after
// `class`/`interface`/`enum`. Field: identifier before `=` or `;`.
fn member_name(tokens: &[Token<'_>]) -> Option<String> {
    let header_len = tokens.iter().position(|t| t.text == "{").unwrap_or(tokens.len());
    let header = strip_annotations(&tokens[..header_len]);
    let header = header.as_slice();
    if let Some(i) = header
        .iter()
        .position(|t| matches!(t.text, "class" | "interface" | "enum"))
    {
        return header.get(i + 1).map(|t| t.text.to_string());
    }
    let stop = header
        .iter()
        .position(|t| matches!(t.text, "(" | "=" | ";"))
        .unwrap_or(header.len());
    header[..stop]
        .iter()
        .rev()
        .find(|t| t.kind == TokenKind::Ident)
        .map(|t| t.text.to_string())
}

fn strip_annotations<'a>(tokens: &[Token<'a>]) -> Vec<Token<'a>> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i].text != "@" || tokens.get(i + 1).is_some_and(|t| t.text == "interface") {
            out.push(tokens[i]);
            i += 1;
            continue;
        }
        i += 1;
        while i < tokens.len() && (tokens[i].kind == TokenKind::Ident || tokens[i].text == ".") {
            i += 1;
        }
        if tokens.get(i).is_some_and(|t| t.text == "(") {
            let mut depth = 0;
            while i < tokens.len() {
                match tokens[i].text {
                    "(" => depth += 1,
                    ")" => depth -= 1,
                    _ => {}
                }
                i += 1;
                if depth == 0 {
                    break;
                }
            }
        }
    }
    out
}

/// Produces the vulnerable and clean halves of one single-file case.
/// A case without good members holds only vulnerable code and is rejected,
/// as is one without bad members.
pub fn split_source(source: &str) -> Result<SplitFiles, CorpusError> {
    let layout = class_layout(source)?;
    let has = |role| layout.members.iter().any(|m| m.role == role);
    if !has(MemberRole::Good) {
        return Err(CorpusError::Excluded("only vulnerable code".into()));
    }
    if !has(MemberRole::Bad) {
        return Err(CorpusError::Excluded("no vulnerable flow".into()));
    }
    Ok(SplitFiles {
        vulnerable: assemble(source, &layout, MemberRole::Bad),
        clean: assemble(source, &layout, MemberRole::Good),
    })
}

fn assemble(source: &str, layout: &ClassLayout, keep: MemberRole) -> String {
    let mut out = String::with_capacity(source.len());
    out.push_str(&source[..layout.body_start]);
    let mut cursor = layout.body_start;
    for member in &layout.members {
        // Leading trivia before a member travels with it.
        let chunk = &source[cursor..member.end];
        if member.role == keep || member.role == MemberRole::Shared {
            out.push_str(chunk);
        }
        cursor = member.end;
    }
    out.push_str(&source[cursor..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE: &str = r#"package testcases.CWE78_OS_Command_Injection;

import testcasesupport.*;

public class CWE78_OS_Command_Injection__Environment_01 extends AbstractTestCase
{
    private int[] table = {1, 2};

    public void bad() throws Throwable
    {
        String data = System.getenv("ADD");
        Runtime.getRuntime().exec("ls " + data);
    }

    public void good() throws Throwable
    {
        goodG2B();
    }

    private void goodG2B() throws Throwable
    {
        String data = "foo";
        Runtime.getRuntime().exec("ls " + data);
    }

    public static void main(String[] args) throws Exception
    {
        mainFromServlet(args);
    }
}
"#;

    #[test]
    fn layout_finds_members() {
        let layout = class_layout(CASE).unwrap();
        assert_eq!(layout.class_name, "CWE78_OS_Command_Injection__Environment_01");
        let names: Vec<_> = layout.members.iter().map(|m| m.name.clone().unwrap()).collect();
        assert_eq!(names, ["table", "bad", "good", "goodG2B", "main"]);
        let roles: Vec<_> = layout.members.iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            [MemberRole::Shared, MemberRole::Bad, MemberRole::Good, MemberRole::Good, MemberRole::Shared]
        );
    }

    #[test]
    fn split_separates_flows() {
        let files = split_source(CASE).unwrap();
        assert!(files.vulnerable.contains("public void bad()"));
        assert!(!files.vulnerable.contains("goodG2B"));
        assert!(files.clean.contains("private void goodG2B()"));
        assert!(!files.clean.contains("void bad()"));
        for f in [&files.vulnerable, &files.clean] {
            assert!(f.contains("int[] table = {1, 2};"));
            assert!(f.contains("mainFromServlet(args);"));
            assert!(f.trim_end().ends_with('}'));
            assert_eq!(f.matches('{').count(), f.matches('}').count());
        }
    }

    #[test]
    fn vulnerable_only_case_is_excluded() {
        let src = "class A { public void bad() { run(); } }";
        assert!(matches!(split_source(src), Err(CorpusError::Excluded(_))));
    }
}
