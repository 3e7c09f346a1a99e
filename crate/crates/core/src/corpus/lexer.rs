//! A lexer for Java-like source: just enough structure to tell code from
//! comments and literals. It does not parse.

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Whitespace,
    LineComment,
    BlockComment,
    Ident,
    Number,
    Str,
    TextBlock,
    Char,
    Punct,
}

impl TokenKind {
    pub fn is_comment(self) -> bool {
        matches!(self, TokenKind::LineComment | TokenKind::BlockComment)
    }

    pub fn is_trivia(self) -> bool {
        self == TokenKind::Whitespace || self.is_comment()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    pub offset: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexError {
    #[error("unterminated block comment starting at byte {0}")]
    UnterminatedComment(usize),
    #[error("unterminated string literal starting at byte {0}")]
    UnterminatedString(usize),
    #[error("unterminated character literal starting at byte {0}")]
    UnterminatedChar(usize),
}

impl LexError {
    pub fn offset(&self) -> usize {
        match *self {
            LexError::UnterminatedComment(o)
            | LexError::UnterminatedString(o)
            | LexError::UnterminatedChar(o) => o,
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c == '_' || c == '$' || c.is_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c == '_' || c == '$' || c.is_alphanumeric()
}

pub fn lex(src: &str) -> Result<Vec<Token<'_>>, LexError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0;

    while pos < src.len() {
        let start = pos;
        let c = src[pos..].chars().next().expect("in bounds");
        let next = bytes.get(pos + 1).copied();

        let kind = if c.is_whitespace() {
            pos += c.len_utf8();
            while let Some(ch) = src[pos..].chars().next() {
                if !ch.is_whitespace() {
                    break;
                }
                pos += ch.len_utf8();
            }
            TokenKind::Whitespace
        } else if c == '/' && next == Some(b'/') {
            pos = src[pos..].find('\n').map_or(src.len(), |i| pos + i);
            TokenKind::LineComment
        } else if c == '/' && next == Some(b'*') {
            match src[pos + 2..].find("*/") {
                Some(i) => pos = pos + 2 + i + 2,
                None => return Err(LexError::UnterminatedComment(start)),
            }
            TokenKind::BlockComment
        } else if src[pos..].starts_with("\"\"\"") {
            match src[pos + 3..].find("\"\"\"") {
                Some(i) => pos = pos + 3 + i + 3,
                None => return Err(LexError::UnterminatedString(start)),
            }
            TokenKind::TextBlock
        } else if c == '"' || c == '\'' {
            pos = scan_quoted(src, pos, c).ok_or(if c == '"' {
                LexError::UnterminatedString(start)
            } else {
                LexError::UnterminatedChar(start)
            })?;
            if c == '"' {
                TokenKind::Str
            } else {
                TokenKind::Char
            }
        } else if c.is_ascii_digit() || (c == '.' && next.is_some_and(|b| b.is_ascii_digit())) {
            pos += 1;
            while pos < bytes.len() {
                let b = bytes[pos];
                let prev = bytes[pos - 1];
                if b.is_ascii_alphanumeric() || b == b'_' || b == b'.' {
                    pos += 1;
                } else if (b == b'+' || b == b'-') && matches!(prev, b'e' | b'E' | b'p' | b'P') {
                    pos += 1;
                } else {
                    break;
                }
            }
            TokenKind::Number
        } else if is_ident_start(c) {
            pos += c.len_utf8();
            while let Some(ch) = src[pos..].chars().next() {
                if !is_ident_continue(ch) {
                    break;
                }
                pos += ch.len_utf8();
            }
            TokenKind::Ident
        } else {
            pos += c.len_utf8();
            TokenKind::Punct
        };

        tokens.push(Token {
            kind,
            text: &src[start..pos],
            offset: start,
        });
    }
    Ok(tokens)
}

// Returns the byte just past the closing quote.
fn scan_quoted(src: &str, open: usize, quote: char) -> Option<usize> {
    let mut chars = src[open + 1..].char_indices();
    while let Some((i, ch)) = chars.next() {
        match ch {
            '\\' => {
                chars.next()?;
            }
            '\n' => return None,
            c if c == quote => return Some(open + 1 + i + 1),
            _ => {}
        }
    }
    None
}

/// Non-trivia tokens only.
pub fn significant<'a>(tokens: &[Token<'a>]) -> Vec<Token<'a>> {
    tokens.iter().copied().filter(|t| !t.kind.is_trivia()).collect()
}
