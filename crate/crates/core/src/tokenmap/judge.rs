//! Database-lookup markup: `<|db_start|> ENTITY <|sep|> RELATION <|db_retrieve|> VALUE`.
//!
//! The lookup and one whitespace character after `<|db_retrieve|>` are removed; VALUE stays
//! in the clean text. VALUE ends at an optional `<|db_end|>`, the next marker, a newline, or
//! sentence-final `.`, `!` or `?` followed by whitespace or the end of the text. Alphanumeric
//! words inside VALUE are delegated.

use std::ops::Range;

use super::{token_offsets, SubwordTokenizer, TokenError, CALL_TOKEN};

const DB_START: &str = "<|db_start|>";
const SEP: &str = "<|sep|>";
const RETRIEVE: &str = "<|db_retrieve|>";
const DB_END: &str = "<|db_end|>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeConversion {
    pub clean_text: String,
    pub token_ids: Vec<u32>,
    pub calls: Vec<bool>,
    /// Byte ranges of delegated words in `clean_text`.
    pub delegated: Vec<Range<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Start,
    Sep,
    Retrieve,
    End,
}

fn marker_at(text: &str, at: usize) -> Result<Option<(Marker, usize)>, TokenError> {
    let rest = &text[at..];
    if !rest.starts_with("<|") {
        return Ok(None);
    }
    for (m, s) in [(Marker::Start, DB_START), (Marker::Sep, SEP), (Marker::Retrieve, RETRIEVE), (Marker::End, DB_END)] {
        if rest.starts_with(s) {
            return Ok(Some((m, s.len())));
        }
    }
    match rest.find("|>") {
        Some(close) => {
            Err(TokenError::Markup { offset: at, message: format!("unknown marker {:?}", &rest[..close + 2]) })
        }
        None => Ok(None),
    }
}

fn next_marker(text: &str, from: usize) -> Result<Option<(usize, Marker, usize)>, TokenError> {
    let mut search = from;
    while let Some(rel) = text[search..].find("<|") {
        let at = search + rel;
        if let Some((m, len)) = marker_at(text, at)? {
            return Ok(Some((at, m, len)));
        }
        search = at + 2;
    }
    Ok(None)
}

/// Removes lookup markup, returning the clean text and the byte ranges of delegated values.
fn strip_markup(annotated: &str) -> Result<(String, Vec<Range<usize>>), TokenError> {
    let mut clean = String::with_capacity(annotated.len());
    let mut values = Vec::new();
    let mut pos = 0;
    while let Some((at, marker, len)) = next_marker(annotated, pos)? {
        clean.push_str(&annotated[pos..at]);
        if marker != Marker::Start {
            return Err(TokenError::Markup { offset: at, message: "marker outside a lookup".into() });
        }
        let expect = |from: usize, want: Marker| -> Result<usize, TokenError> {
            match next_marker(annotated, from)? {
                Some((m_at, m, m_len)) if m == want => Ok(m_at + m_len),
                Some((m_at, Marker::Start, _)) => {
                    Err(TokenError::Markup { offset: m_at, message: "nested lookup".into() })
                }
                Some((m_at, _, _)) => {
                    Err(TokenError::Markup { offset: m_at, message: "lookup markers out of order".into() })
                }
                None => Err(TokenError::Markup { offset: at, message: "unterminated lookup".into() }),
            }
        };
        let after_sep = expect(at + len, Marker::Sep)?;
        let mut value_start = expect(after_sep, Marker::Retrieve)?;
        if let Some(c) = annotated[value_start..].chars().next().filter(|c| c.is_whitespace()) {
            value_start += c.len_utf8();
        }
        let (value_end, resume) = value_extent(annotated, value_start)?;
        let start = clean.len();
        clean.push_str(&annotated[value_start..value_end]);
        values.push(start..clean.len());
        pos = resume;
    }
    clean.push_str(&annotated[pos..]);
    Ok((clean, values))
}

/// End of a value starting at `from`, and where scanning resumes.
fn value_extent(text: &str, from: usize) -> Result<(usize, usize), TokenError> {
    let mut iter = text[from..].char_indices().peekable();
    while let Some((rel, c)) = iter.next() {
        let at = from + rel;
        if c == '<' {
            if let Some((m, len)) = marker_at(text, at)? {
                return match m {
                    Marker::End => Ok((at, at + len)),
                    Marker::Start => Ok((at, at)),
                    _ => Err(TokenError::Markup { offset: at, message: "marker inside a retrieved value".into() }),
                };
            }
        }
        if c == '\n' {
            return Ok((at, at));
        }
        if matches!(c, '.' | '!' | '?') && iter.peek().is_none_or(|(_, n)| n.is_whitespace()) {
            return Ok((at, at));
        }
    }
    Ok((text.len(), text.len()))
}

fn alphanumeric_words(text: &str, range: Range<usize>) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (rel, c) in text[range.clone()].char_indices() {
        let at = range.start + rel;
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(at),
            (false, Some(s)) => {
                out.push(s..at);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..range.end);
    }
    out
}

/// Converts externally annotated text into clean tokens with per-token call labels.
pub fn convert_judge_annotations(
    annotated: &str,
    tokenizer: &dyn SubwordTokenizer,
) -> Result<JudgeConversion, TokenError> {
    let (clean_text, values) = strip_markup(annotated)?;
    let delegated: Vec<Range<usize>> = values.into_iter().flat_map(|v| alphanumeric_words(&clean_text, v)).collect();
    let token_ids = tokenizer.encode(&clean_text)?;
    if tokenizer.decode(&token_ids)? != clean_text {
        return Err(TokenError::Alignment { word_index: 0, word: clean_text });
    }
    let calls = delegated_calls(&clean_text, &token_ids, &delegated, tokenizer)?;
    Ok(JudgeConversion { clean_text, token_ids, calls, delegated })
}

/// Call labels for a tokenization of `text`: a token is called when its non-whitespace part
/// overlaps a delegated byte range.
pub fn delegated_calls(
    text: &str,
    token_ids: &[u32],
    delegated: &[Range<usize>],
    tokenizer: &dyn SubwordTokenizer,
) -> Result<Vec<bool>, TokenError> {
    let offsets = token_offsets(tokenizer, token_ids)?;
    offsets
        .iter()
        .map(|r| {
            let piece =
                text.get(r.clone()).ok_or_else(|| TokenError::Alignment { word_index: 0, word: text.to_string() })?;
            let content = r.start + (piece.len() - piece.trim_start().len())..r.end;
            Ok(!content.is_empty() && delegated.iter().any(|d| d.start < content.end && content.start < d.end))
        })
        .collect()
}

/// Renders training targets: called tokens become `<CALL>`, keeping their leading whitespace.
pub fn render_call_targets(
    tokenizer: &dyn SubwordTokenizer,
    token_ids: &[u32],
    calls: &[bool],
) -> Result<String, TokenError> {
    let mut out = String::new();
    for (&id, &call) in token_ids.iter().zip(calls) {
        let text = tokenizer.decode(&[id])?;
        if call {
            let trimmed = text.trim_start();
            out.push_str(&text[..text.len() - trimmed.len()]);
            out.push_str(CALL_TOKEN);
        } else {
            out.push_str(&text);
        }
    }
    Ok(out)
}
