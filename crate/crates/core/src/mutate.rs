//! Locating and rewriting the batch-size default in the input provider's
//! signature.
//!
//! The scanner is token level: it understands identifiers, numbers, string
//! literals (including prefixed and triple-quoted forms), comments and
//! brackets, which is enough to find one keyword default in one `def` while
//! ignoring look-alikes inside strings and comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PROVIDER: &str = "input_provider";
pub const DEFAULT_KWARG: &str = "batch_size";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationTarget {
    pub provider_name: String,
    pub kwarg_name: String,
}

impl Default for MutationTarget {
    fn default() -> Self {
        MutationTarget {
            provider_name: DEFAULT_PROVIDER.into(),
            kwarg_name: DEFAULT_KWARG.into(),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_alphabetic())
        && chars.all(|c| c == '_' || c.is_alphanumeric())
}

impl MutationTarget {
    pub fn new(provider_name: impl Into<String>, kwarg_name: impl Into<String>) -> Result<Self, MutateError> {
        let target = MutationTarget {
            provider_name: provider_name.into(),
            kwarg_name: kwarg_name.into(),
        };
        for name in [&target.provider_name, &target.kwarg_name] {
            if !is_identifier(name) {
                return Err(MutateError::InvalidIdentifier(name.clone()));
            }
        }
        Ok(target)
    }
}

/// Byte range of the integer literal, `[byte_start, byte_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiteralSpan {
    pub line_number: u32,
    pub byte_start: usize,
    pub byte_end: usize,
    pub current_value: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MutateError {
    #[error("`{0}` is not a valid identifier")]
    InvalidIdentifier(String),
    #[error("no definition of `{0}` found")]
    ProviderNotFound(String),
    #[error("`{provider}` is defined more than once (lines {lines:?})")]
    MultipleProviders { provider: String, lines: Vec<u32> },
    #[error("`{provider}` has no `{kwarg}` keyword argument")]
    KwargNotFound { provider: String, kwarg: String },
    #[error("non-literal default for `{kwarg}` on line {line}: `{found}`")]
    NonLiteralDefault { kwarg: String, line: u32, found: String },
    #[error("`{kwarg}` default must be a positive integer")]
    NonPositive { kwarg: String },
    #[error("unterminated signature for `{0}`")]
    UnterminatedSignature(String),
    #[error("source changed since the batch size literal was located")]
    StaleSpan,
    #[error("new batch size must be >= 1")]
    ZeroBatch,
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenKind {
    Ident,
    Number,
    Str,
    Open,
    Close,
    Op,
    Newline,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    kind: TokenKind,
    start: usize,
    end: usize,
    line: u32,
}

fn string_prefix_len(src: &[u8], i: usize) -> Option<usize> {
    // r, b, u, f and two-letter combinations directly before a quote.
    let mut j = i;
    while j < src.len() && j - i < 2 && matches!(src[j].to_ascii_lowercase(), b'r' | b'b' | b'u' | b'f') {
        j += 1;
    }
    (j < src.len() && (src[j] == b'\'' || src[j] == b'"')).then_some(j - i)
}

fn tokenize(source: &str) -> Vec<Token> {
    let src = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut line = 1u32;

    while i < src.len() {
        let c = src[i];
        match c {
            b'\n' => {
                tokens.push(Token { kind: TokenKind::Newline, start: i, end: i + 1, line });
                line += 1;
                i += 1;
            }
            b' ' | b'\t' | b'\r' | b'\x0c' => i += 1,
            b'\\' if src.get(i + 1) == Some(&b'\n') => {
                line += 1;
                i += 2;
            }
            b'#' => {
                while i < src.len() && src[i] != b'\n' {
                    i += 1;
                }
            }
            b'(' | b'[' | b'{' => {
                tokens.push(Token { kind: TokenKind::Open, start: i, end: i + 1, line });
                i += 1;
            }
            b')' | b']' | b'}' => {
                tokens.push(Token { kind: TokenKind::Close, start: i, end: i + 1, line });
                i += 1;
            }
            _ if c.is_ascii_digit() || (c == b'.' && src.get(i + 1).is_some_and(u8::is_ascii_digit)) => {
                let start = i;
                while i < src.len() && (src[i].is_ascii_alphanumeric() || src[i] == b'_' || src[i] == b'.') {
                    // exponent sign, e.g. 1e-3
                    if matches!(src[i], b'e' | b'E') && matches!(src.get(i + 1), Some(b'+' | b'-')) {
                        i += 1;
                    }
                    i += 1;
                }
                tokens.push(Token { kind: TokenKind::Number, start, end: i, line });
            }
            _ if c == b'\'' || c == b'"' || string_prefix_len(src, i).is_some() => {
                let start = i;
                let start_line = line;
                i += string_prefix_len(src, i).unwrap_or(0);
                let quote = src[i];
                let triple = src.get(i + 1) == Some(&quote) && src.get(i + 2) == Some(&quote);
                i += if triple { 3 } else { 1 };
                while i < src.len() {
                    match src[i] {
                        b'\\' => {
                            if src.get(i + 1) == Some(&b'\n') {
                                line += 1;
                            }
                            i += 2;
                        }
                        b'\n' if !triple => break,
                        b'\n' => {
                            line += 1;
                            i += 1;
                        }
                        q if q == quote => {
                            if !triple {
                                i += 1;
                                break;
                            }
                            if src.get(i + 1) == Some(&quote) && src.get(i + 2) == Some(&quote) {
                                i += 3;
                                break;
                            }
                            i += 1;
                        }
                        _ => i += 1,
                    }
                }
                i = i.min(src.len());
                tokens.push(Token { kind: TokenKind::Str, start, end: i, line: start_line });
            }
            _ if c == b'_' || c.is_ascii_alphabetic() || c >= 0x80 => {
                let start = i;
                while i < src.len() && (src[i] == b'_' || src[i].is_ascii_alphanumeric() || src[i] >= 0x80) {
                    i += 1;
                }
                tokens.push(Token { kind: TokenKind::Ident, start, end: i, line });
            }
            _ => {
                // Multi-char operators only matter for `=` vs `==`, `<=`, etc.
                let start = i;
                i += 1;
                if src.get(i) == Some(&b'=') && matches!(c, b'=' | b'!' | b'<' | b'>' | b'+' | b'-' | b'*' | b'/' | b':' | b'%' | b'&' | b'|' | b'^' | b'@')
                    || (c == b'-' && src.get(i) == Some(&b'>'))
                {
                    i += 1;
                } else if matches!(c, b'*' | b'/' | b'<' | b'>') && src.get(i) == Some(&c) {
                    i += 1;
                    if src.get(i) == Some(&b'=') {
                        i += 1;
                    }
                }
                tokens.push(Token { kind: TokenKind::Op, start, end: i, line });
            }
        }
    }
    tokens
}

fn parse_decimal(text: &str) -> Option<u64> {
    let bytes = text.as_bytes();
    if bytes.is_empty() || !bytes[0].is_ascii_digit() || bytes[bytes.len() - 1] == b'_' {
        return None;
    }
    if !bytes.iter().all(|b| b.is_ascii_digit() || *b == b'_') || text.contains("__") {
        return None;
    }
    let digits: String = text.chars().filter(|c| *c != '_').collect();
    // Python rejects leading zeros on non-zero decimals.
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

/// Finds the integer default of `target.kwarg_name` in the unique
/// `def target.provider_name(...)` of `source`.
pub fn locate_batch_kwarg(source: &str, target: &MutationTarget) -> Result<LiteralSpan, MutateError> {
    let tokens = tokenize(source);
    let text = |t: &Token| &source[t.start..t.end];

    // Only module-level definitions count; methods and nested functions
    // with the same name are ignored.
    let at_line_start = |t: &Token| t.start == 0 || source.as_bytes()[t.start - 1] == b'\n';
    let mut defs = Vec::new();
    for (i, window) in tokens.windows(3).enumerate() {
        if window[0].kind == TokenKind::Ident
            && text(&window[0]) == "def"
            && at_line_start(&window[0])
            && window[1].kind == TokenKind::Ident
            && text(&window[1]) == target.provider_name
            && window[2].kind == TokenKind::Open
            && text(&window[2]) == "("
        {
            defs.push(i + 2);
        }
    }
    let open = match defs.as_slice() {
        [] => return Err(MutateError::ProviderNotFound(target.provider_name.clone())),
        [open] => *open,
        many => {
            return Err(MutateError::MultipleProviders {
                provider: target.provider_name.clone(),
                lines: many.iter().map(|&i| tokens[i].line).collect(),
            })
        }
    };

    let mut depth = 0usize;
    let mut param_start = true;
    let mut i = open;
    while i < tokens.len() {
        let tok = tokens[i];
        match tok.kind {
            TokenKind::Open => {
                depth += 1;
                if depth == 1 {
                    param_start = true;
                }
            }
            TokenKind::Close => {
                depth -= 1;
                if depth == 0 {
                    return Err(MutateError::KwargNotFound {
                        provider: target.provider_name.clone(),
                        kwarg: target.kwarg_name.clone(),
                    });
                }
            }
            TokenKind::Newline => {}
            TokenKind::Op if depth == 1 && text(&tok) == "," => param_start = true,
            TokenKind::Ident if depth == 1 && param_start && text(&tok) == target.kwarg_name => {
                return literal_after(source, &tokens, i, target);
            }
            _ => {
                if depth == 1 && !(tok.kind == TokenKind::Op && matches!(text(&tok), "*" | "**" | "/")) {
                    param_start = false;
                }
            }
        }
        i += 1;
    }
    Err(MutateError::UnterminatedSignature(target.provider_name.clone()))
}

fn literal_after(
    source: &str,
    tokens: &[Token],
    name_idx: usize,
    target: &MutationTarget,
) -> Result<LiteralSpan, MutateError> {
    let text = |t: &Token| &source[t.start..t.end];
    let significant = |from: usize| (from..tokens.len()).find(|&j| tokens[j].kind != TokenKind::Newline);
    let kwarg_line = tokens[name_idx].line;
    let missing = || MutateError::NonLiteralDefault {
        kwarg: target.kwarg_name.clone(),
        line: kwarg_line,
        found: "<no default>".into(),
    };

    // Skip an annotation up to the `=` at parameter depth.
    let mut j = significant(name_idx + 1).ok_or_else(missing)?;
    if text(&tokens[j]) == ":" {
        let mut depth = 0usize;
        loop {
            j = significant(j + 1).ok_or_else(missing)?;
            let t = &tokens[j];
            match t.kind {
                TokenKind::Open => depth += 1,
                TokenKind::Close if depth == 0 => return Err(missing()),
                TokenKind::Close => depth -= 1,
                TokenKind::Op if depth == 0 && text(t) == "," => return Err(missing()),
                TokenKind::Op if depth == 0 && text(t) == "=" => break,
                _ => {}
            }
        }
    }
    if text(&tokens[j]) != "=" {
        return Err(missing());
    }

    let value_idx = significant(j + 1).ok_or_else(missing)?;
    let value = tokens[value_idx];
    // The default must be exactly one number token followed by `,` or `)`.
    let end_idx = significant(value_idx + 1);
    let ends_cleanly = end_idx.is_some_and(|k| {
        let t = &tokens[k];
        t.kind == TokenKind::Close && text(t) == ")" || t.kind == TokenKind::Op && text(t) == ","
    });
    let parsed = (value.kind == TokenKind::Number).then(|| parse_decimal(text(&value))).flatten();
    match parsed {
        Some(v) if ends_cleanly => {
            if v == 0 {
                return Err(MutateError::NonPositive {
                    kwarg: target.kwarg_name.clone(),
                });
            }
            Ok(LiteralSpan {
                line_number: value.line,
                byte_start: value.start,
                byte_end: value.end,
                current_value: v,
            })
        }
        _ => {
            // Report the whole default expression, up to `,` or `)` at its own depth.
            let mut depth = 0usize;
            let mut stop = source.len();
            for t in &tokens[value_idx..] {
                match t.kind {
                    TokenKind::Open => depth += 1,
                    TokenKind::Close if depth == 0 => {
                        stop = t.start;
                        break;
                    }
                    TokenKind::Close => depth -= 1,
                    TokenKind::Op if depth == 0 && text(t) == "," => {
                        stop = t.start;
                        break;
                    }
                    _ => {}
                }
            }
            let found = source[value.start..stop.max(value.end)].trim().to_owned();
            Err(MutateError::NonLiteralDefault {
                kwarg: target.kwarg_name.clone(),
                line: value.line,
                found,
            })
        }
    }
}

/// Replaces the literal at `span` with `new_value`; every other byte is kept.
pub fn apply_batch_size(source: &str, span: &LiteralSpan, new_value: u64) -> Result<String, MutateError> {
    if new_value == 0 {
        return Err(MutateError::ZeroBatch);
    }
    let current = source
        .get(span.byte_start..span.byte_end)
        .ok_or(MutateError::StaleSpan)?;
    if parse_decimal(current) != Some(span.current_value) {
        return Err(MutateError::StaleSpan);
    }
    let line = source[..span.byte_start].bytes().filter(|&b| b == b'\n').count() as u32 + 1;
    if line != span.line_number {
        return Err(MutateError::StaleSpan);
    }
    let rendered = new_value.to_string();
    let mut out = String::with_capacity(source.len() + rendered.len());
    out.push_str(&source[..span.byte_start]);
    out.push_str(&rendered);
    out.push_str(&source[span.byte_end..]);
    Ok(out)
}

/// Result of rewriting a file on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileMutation {
    pub previous: LiteralSpan,
    pub updated: LiteralSpan,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> MutateError {
    MutateError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory followed by a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), MutateError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    if let Ok(meta) = fs::metadata(path) {
        let _ = fs::set_permissions(tmp.path(), meta.permissions());
    }
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Re-locates the literal in `path` and rewrites it to `new_value`.
///
/// `hint` is a previously located span; when it no longer matches the file
/// the literal is located again once before giving up.
pub fn mutate_file(
    path: &Path,
    target: &MutationTarget,
    hint: Option<&LiteralSpan>,
    new_value: u64,
) -> Result<FileMutation, MutateError> {
    let source = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (previous, updated_source) = match hint.map(|span| (span, apply_batch_size(&source, span, new_value))) {
        Some((span, Ok(out))) => (*span, out),
        Some((_, Err(MutateError::StaleSpan))) | None => {
            let span = locate_batch_kwarg(&source, target)?;
            let out = apply_batch_size(&source, &span, new_value)?;
            (span, out)
        }
        Some((_, Err(e))) => return Err(e),
    };
    let updated = locate_batch_kwarg(&updated_source, target)?;
    write_atomic(path, &updated_source)?;
    Ok(FileMutation { previous, updated })
}
