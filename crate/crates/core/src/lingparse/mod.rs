//! Document model for linguistic parses.
//!
//! Parses come from an external parser through CoNLL-U (see [`conllu`]).
//! Word indices are document-global: `head`, entity spans and noun chunks all
//! index into [`ParsedDocument::words`].

pub mod conllu;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conllu::{read_conllu, write_conllu, ReadOutcome};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: head index {head} does not exist in a sentence of {len} words")]
    DanglingHead { line: usize, head: usize, len: usize },
    #[error("document {doc_id}: {message}")]
    Structure { doc_id: String, message: String },
    #[error("document {doc_id}: reconstruction differs from raw text at byte {offset}")]
    Reconstruction { doc_id: String, offset: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Universal coarse part-of-speech tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl Pos {
    pub fn as_str(self) -> &'static str {
        match self {
            Pos::Adj => "ADJ",
            Pos::Adp => "ADP",
            Pos::Adv => "ADV",
            Pos::Aux => "AUX",
            Pos::Cconj => "CCONJ",
            Pos::Det => "DET",
            Pos::Intj => "INTJ",
            Pos::Noun => "NOUN",
            Pos::Num => "NUM",
            Pos::Part => "PART",
            Pos::Pron => "PRON",
            Pos::Propn => "PROPN",
            Pos::Punct => "PUNCT",
            Pos::Sconj => "SCONJ",
            Pos::Sym => "SYM",
            Pos::Verb => "VERB",
            Pos::X => "X",
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pos {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ADJ" => Pos::Adj,
            "ADP" => Pos::Adp,
            "ADV" => Pos::Adv,
            "AUX" => Pos::Aux,
            "CCONJ" | "CONJ" => Pos::Cconj,
            "DET" => Pos::Det,
            "INTJ" => Pos::Intj,
            "NOUN" => Pos::Noun,
            "NUM" => Pos::Num,
            "PART" => Pos::Part,
            "PRON" => Pos::Pron,
            "PROPN" => Pos::Propn,
            "PUNCT" => Pos::Punct,
            "SCONJ" => Pos::Sconj,
            "SYM" => Pos::Sym,
            "VERB" => Pos::Verb,
            "X" => Pos::X,
            other => return Err(format!("unknown UPOS tag `{other}`")),
        })
    }
}

/// Entity category of a named-entity span.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NerTag {
    Person,
    Org,
    Date,
    Other(String),
}

impl NerTag {
    pub fn as_str(&self) -> &str {
        match self {
            NerTag::Person => "PERSON",
            NerTag::Org => "ORG",
            NerTag::Date => "DATE",
            NerTag::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> NerTag {
        match s {
            "PERSON" | "PER" => NerTag::Person,
            "ORG" => NerTag::Org,
            "DATE" => NerTag::Date,
            other => NerTag::Other(other.to_string()),
        }
    }
}

impl fmt::Display for NerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for NerTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for NerTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(NerTag::parse(&s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedWord {
    pub surface: String,
    pub lemma: String,
    pub pos: Pos,
    /// Dependency relation label, as produced by the parser (`nsubj`, `dobj`, `obj`, ...).
    pub dep: String,
    /// Document-global index of the syntactic head; `None` for the sentence root.
    pub head: Option<usize>,
    pub ner: Option<NerTag>,
    pub is_numeric: bool,
    /// Exact whitespace following the word in the source text (often `" "` or `""`).
    pub space_after: String,
}

impl ParsedWord {
    pub fn whitespace_after(&self) -> bool {
        !self.space_after.is_empty()
    }

    /// Whether the whitespace after this word splits noun chunks (newline or tab).
    pub fn boundary_after(&self) -> bool {
        self.space_after.contains(['\n', '\t', '\r'])
    }
}

/// Half-open range of document word indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub span: Span,
    pub tag: NerTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDocument {
    pub doc_id: String,
    pub words: Vec<ParsedWord>,
    /// Start index of every sentence; the first entry is always 0 for non-empty documents.
    pub sentence_starts: Vec<usize>,
    pub entity_spans: Vec<EntitySpan>,
    pub noun_chunks: Vec<Span>,
}

impl ParsedDocument {
    pub fn sentences(&self) -> impl Iterator<Item = &[ParsedWord]> + '_ {
        self.sentence_spans().map(move |s| &self.words[s.indices()])
    }

    pub fn sentence_spans(&self) -> impl Iterator<Item = Span> + '_ {
        let n = self.words.len();
        self.sentence_starts.iter().enumerate().map(move |(i, &start)| {
            let end = self.sentence_starts.get(i + 1).copied().unwrap_or(n);
            Span::new(start, end)
        })
    }

    pub fn sentence_of(&self, word: usize) -> Span {
        self.sentence_spans().find(|s| s.contains(word)).unwrap_or(Span::new(word, word + 1))
    }

    /// Surfaces joined with their trailing whitespace.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for w in &self.words {
            out.push_str(&w.surface);
            out.push_str(&w.space_after);
        }
        out
    }

    /// Checks that the document reproduces `raw` exactly.
    pub fn check_reconstruction(&self, raw: &str) -> Result<(), ParseError> {
        let text = self.text();
        if text == raw {
            return Ok(());
        }
        let offset =
            text.bytes().zip(raw.bytes()).position(|(a, b)| a != b).unwrap_or_else(|| text.len().min(raw.len()));
        Err(ParseError::Reconstruction { doc_id: self.doc_id.clone(), offset })
    }

    pub fn entity_at(&self, word: usize) -> Option<&EntitySpan> {
        self.entity_spans.iter().find(|e| e.span.contains(word))
    }

    /// Verifies the structural invariants of the document model.
    pub fn validate(&self) -> Result<(), ParseError> {
        let err = |message: String| ParseError::Structure { doc_id: self.doc_id.clone(), message };
        let n = self.words.len();
        if n > 0 && self.sentence_starts.first() != Some(&0) {
            return Err(err("first sentence must start at word 0".into()));
        }
        if self.sentence_starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(err("sentence starts must be strictly increasing".into()));
        }
        if self.sentence_starts.last().is_some_and(|&s| s >= n) {
            return Err(err("empty trailing sentence".into()));
        }
        for (i, w) in self.words.iter().enumerate() {
            if let Some(h) = w.head {
                let sent = self.sentence_of(i);
                if !sent.contains(h) {
                    return Err(err(format!("word {i} has head {h} outside its sentence")));
                }
            }
        }
        check_ranges(self.entity_spans.iter().map(|e| e.span), n, "entity span").map_err(err)?;
        check_ranges(self.noun_chunks.iter().copied(), n, "noun chunk").map_err(err)?;
        Ok(())
    }
}

fn check_ranges(spans: impl Iterator<Item = Span>, n: usize, what: &str) -> Result<(), String> {
    let mut sorted: Vec<Span> = spans.collect();
    sorted.sort();
    for s in &sorted {
        if s.is_empty() || s.end > n {
            return Err(format!("{what} {}..{} out of range", s.start, s.end));
        }
    }
    for w in sorted.windows(2) {
        if w[0].overlaps(&w[1]) {
            return Err(format!("{what}s {}..{} and {}..{} overlap", w[0].start, w[0].end, w[1].start, w[1].end));
        }
    }
    Ok(())
}

/// Replaces every noun chunk that crosses a newline or tab with sub-chunks that do not.
pub fn split_chunks_on_whitespace(doc: &ParsedDocument) -> ParsedDocument {
    let mut chunks = Vec::with_capacity(doc.noun_chunks.len());
    for chunk in &doc.noun_chunks {
        let mut start = chunk.start;
        for i in chunk.start..chunk.end.saturating_sub(1) {
            if doc.words[i].boundary_after() {
                chunks.push(Span::new(start, i + 1));
                start = i + 1;
            }
        }
        chunks.push(Span::new(start, chunk.end));
    }
    ParsedDocument { noun_chunks: chunks, ..doc.clone() }
}

/// Whether a surface string reads as a number (`1769`, `1,000`, `3.5`, `12th` is not).
pub fn looks_numeric(surface: &str) -> bool {
    let mut digits = 0;
    for c in surface.chars() {
        match c {
            '0'..='9' => digits += 1,
            ',' | '.' => {}
            _ => return false,
        }
    }
    digits > 0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(surface: &str, space_after: &str) -> ParsedWord {
        ParsedWord {
            surface: surface.into(),
            lemma: surface.to_lowercase(),
            pos: Pos::Noun,
            dep: "dep".into(),
            head: None,
            ner: None,
            is_numeric: false,
            space_after: space_after.into(),
        }
    }

    fn doc(words: Vec<ParsedWord>, chunks: Vec<Span>) -> ParsedDocument {
        ParsedDocument {
            doc_id: "d".into(),
            words,
            sentence_starts: vec![0],
            entity_spans: vec![],
            noun_chunks: chunks,
        }
    }

    /// Re-segments a chunk by checking every word boundary independently.
    fn oracle_split(d: &ParsedDocument, chunk: Span) -> Vec<Span> {
        let mut cuts = vec![chunk.start];
        for i in chunk.start + 1..chunk.end {
            let ws = &d.words[i - 1].space_after;
            if ws.chars().any(|c| c == '\n' || c == '\t' || c == '\r') {
                cuts.push(i);
            }
        }
        cuts.push(chunk.end);
        cuts.windows(2).map(|w| Span::new(w[0], w[1])).collect()
    }

    #[test]
    fn splits_chunk_at_newline() {
        let d = doc(
            vec![word("the", " "), word("Yellow", "\n"), word("Line", " "), word("runs", "")],
            vec![Span::new(0, 3)],
        );
        let split = split_chunks_on_whitespace(&d);
        assert_eq!(split.noun_chunks, vec![Span::new(0, 2), Span::new(2, 3)]);
        assert_eq!(split.noun_chunks, oracle_split(&d, Span::new(0, 3)));
        assert_eq!(split.words, d.words);
    }

    #[test]
    fn no_boundary_is_fixed_point() {
        let d = doc(vec![word("the", " "), word("Yellow", " "), word("Line", "")], vec![Span::new(0, 3)]);
        assert_eq!(split_chunks_on_whitespace(&d), d);
    }

    #[test]
    fn single_word_chunk_unchanged() {
        let d = doc(vec![word("Line", "\n"), word("two", "")], vec![Span::new(0, 1)]);
        assert_eq!(split_chunks_on_whitespace(&d), d);
    }

    #[test]
    fn tab_is_a_boundary_but_space_is_not() {
        let d = doc(vec![word("a", "\t"), word("b", "  "), word("c", "")], vec![Span::new(0, 3)]);
        let split = split_chunks_on_whitespace(&d);
        assert_eq!(split.noun_chunks, vec![Span::new(0, 1), Span::new(1, 3)]);
    }

    #[test]
    fn reconstruction_mismatch_reports_offset() {
        let d = doc(vec![word("Marie", " "), word("Curie", "")], vec![]);
        assert!(d.check_reconstruction("Marie Curie").is_ok());
        match d.check_reconstruction("Marie  Curie") {
            Err(ParseError::Reconstruction { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn numeric_detection() {
        assert!(looks_numeric("1769"));
        assert!(looks_numeric("1,000"));
        assert!(!looks_numeric("12th"));
        assert!(!looks_numeric(","));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_doc() -> impl Strategy<Value = ParsedDocument> {
            (1usize..12)
                .prop_flat_map(|n| {
                    (
                        proptest::collection::vec(
                            prop_oneof![Just(""), Just(" "), Just("\n"), Just("\t"), Just(" \n ")],
                            n,
                        ),
                        proptest::collection::vec(any::<bool>(), n),
                    )
                })
                .prop_map(|(spaces, cuts)| {
                    let n = spaces.len();
                    let words = spaces.iter().enumerate().map(|(i, s)| word(&format!("w{i}"), s)).collect();
                    let mut chunks = vec![];
                    let mut start = 0;
                    #[allow(clippy::needless_range_loop)]
                    for i in 1..=n {
                        if i == n || cuts[i] {
                            chunks.push(Span::new(start, i));
                            start = i;
                        }
                    }
                    doc(words, chunks)
                })
        }

        proptest! {
            #[test]
            fn split_is_idempotent_and_preserves_words(d in arb_doc()) {
                let once = split_chunks_on_whitespace(&d);
                let twice = split_chunks_on_whitespace(&once);
                prop_assert_eq!(&once, &twice);
                prop_assert_eq!(&once.words, &d.words);
                prop_assert_eq!(&once.entity_spans, &d.entity_spans);
                let expected: Vec<Span> = d.noun_chunks.iter().flat_map(|c| oracle_split(&d, *c)).collect();
                prop_assert_eq!(once.noun_chunks, expected);
            }
        }
    }
}
