//! CoNLL-U interchange.
//!
//! Documents are separated by `# newdoc id = <doc_id>`. Word-level extras live
//! in the MISC column:
//!
//! | key            | meaning                                                   |
//! |----------------|-----------------------------------------------------------|
//! | `NER=B-PERSON` | entity tag; `B-`/`I-` prefixes optional, `O` for none     |
//! | `ChunkStart=Yes` | first word of a noun chunk                              |
//! | `ChunkEnd=Yes` | last word of a noun chunk                                 |
//! | `SpaceAfter=No`| no whitespace follows the word                            |
//! | `SpacesAfter=\n` | exact whitespace following the word (`\s`, `\n`, `\t`, `\\`, `\|` escapes) |
//!
//! Other MISC keys are skipped and counted in [`ReadOutcome::unknown_misc_keys`].
//! Multiword-token ranges (`1-2`) and empty nodes (`1.1`) are skipped.

use std::io::{BufRead, Write};

use super::{looks_numeric, EntitySpan, NerTag, ParseError, ParsedDocument, ParsedWord, Pos, Span};

#[derive(Debug, Default)]
pub struct ReadOutcome {
    pub documents: Vec<ParsedDocument>,
    pub unknown_misc_keys: usize,
}

struct RawWord {
    word: ParsedWord,
    head: usize,
    ner: Option<(bool, NerTag)>,
    chunk_start: bool,
    chunk_end: bool,
    line: usize,
}

#[derive(Default)]
struct DocBuilder {
    doc_id: String,
    words: Vec<ParsedWord>,
    sentence_starts: Vec<usize>,
    entity_spans: Vec<EntitySpan>,
    noun_chunks: Vec<Span>,
}

impl DocBuilder {
    fn new(doc_id: String) -> Self {
        DocBuilder { doc_id, ..Default::default() }
    }

    fn push_sentence(&mut self, sentence: Vec<RawWord>) -> Result<(), ParseError> {
        if sentence.is_empty() {
            return Ok(());
        }
        let offset = self.words.len();
        let len = sentence.len();
        self.sentence_starts.push(offset);
        let mut open_chunk: Option<(usize, usize)> = None;
        let mut open_entity: Option<(usize, NerTag)> = None;
        for (i, raw) in sentence.into_iter().enumerate() {
            let idx = offset + i;
            if raw.head > len {
                return Err(ParseError::DanglingHead { line: raw.line, head: raw.head, len });
            }
            let mut word = raw.word;
            word.head = (raw.head > 0).then(|| offset + raw.head - 1);

            match (&raw.ner, open_entity.take()) {
                (Some((begin, tag)), Some((start, open_tag))) if !*begin && *tag == open_tag => {
                    open_entity = Some((start, open_tag));
                }
                (next, prev) => {
                    if let Some((start, tag)) = prev {
                        self.entity_spans.push(EntitySpan { span: Span::new(start, idx), tag });
                    }
                    if let Some((_, tag)) = next {
                        open_entity = Some((idx, tag.clone()));
                    }
                }
            }
            word.ner = raw.ner.map(|(_, t)| t);

            if raw.chunk_start {
                if let Some((_, line)) = open_chunk {
                    return Err(ParseError::Malformed {
                        line: raw.line,
                        message: format!("chunk opened while the chunk from line {line} is still open"),
                    });
                }
                open_chunk = Some((idx, raw.line));
            }
            if raw.chunk_end {
                let Some((start, _)) = open_chunk.take() else {
                    return Err(ParseError::Malformed {
                        line: raw.line,
                        message: "ChunkEnd without ChunkStart".into(),
                    });
                };
                self.noun_chunks.push(Span::new(start, idx + 1));
            }
            self.words.push(word);
        }
        if let Some((start, tag)) = open_entity {
            self.entity_spans.push(EntitySpan { span: Span::new(start, offset + len), tag });
        }
        if let Some((_, line)) = open_chunk {
            return Err(ParseError::Malformed { line, message: "noun chunk not closed before sentence end".into() });
        }
        Ok(())
    }

    fn finish(self) -> Result<ParsedDocument, ParseError> {
        let doc = ParsedDocument {
            doc_id: self.doc_id,
            words: self.words,
            sentence_starts: self.sentence_starts,
            entity_spans: self.entity_spans,
            noun_chunks: self.noun_chunks,
        };
        doc.validate()?;
        Ok(doc)
    }
}

/// Reads every document in a CoNLL-U stream.
pub fn read_conllu<R: BufRead>(reader: R) -> Result<ReadOutcome, ParseError> {
    let mut out = ReadOutcome::default();
    let mut doc: Option<DocBuilder> = None;
    let mut sentence: Vec<RawWord> = Vec::new();
    let mut implicit_docs = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);

        if line.trim().is_empty() {
            if !sentence.is_empty() {
                let d = doc.get_or_insert_with(|| {
                    implicit_docs += 1;
                    DocBuilder::new(format!("doc-{implicit_docs}"))
                });
                d.push_sentence(std::mem::take(&mut sentence))?;
            }
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = newdoc_id(comment) {
                if !sentence.is_empty() {
                    return Err(ParseError::Malformed { line: lineno, message: "newdoc inside a sentence".into() });
                }
                if let Some(d) = doc.take() {
                    out.documents.push(d.finish()?);
                }
                doc = Some(DocBuilder::new(id));
            }
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ParseError::Malformed {
                line: lineno,
                message: format!("expected 10 columns, found {}", cols.len()),
            });
        }
        if cols[0].contains(['-', '.']) {
            continue;
        }
        let id: usize = cols[0]
            .parse()
            .map_err(|_| ParseError::Malformed { line: lineno, message: format!("bad word id `{}`", cols[0]) })?;
        if id != sentence.len() + 1 {
            return Err(ParseError::Malformed {
                line: lineno,
                message: format!("word id {id} out of sequence (expected {})", sentence.len() + 1),
            });
        }
        let pos: Pos = cols[3].parse().map_err(|message| ParseError::Malformed { line: lineno, message })?;
        let head: usize = cols[6]
            .parse()
            .map_err(|_| ParseError::Malformed { line: lineno, message: format!("bad head `{}`", cols[6]) })?;
        let surface = cols[1].to_string();
        let mut raw = RawWord {
            word: ParsedWord {
                lemma: if cols[2] == "_" { surface.to_lowercase() } else { cols[2].to_string() },
                is_numeric: pos == Pos::Num || looks_numeric(&surface),
                surface,
                pos,
                dep: cols[7].to_string(),
                head: None,
                ner: None,
                space_after: " ".into(),
            },
            head,
            ner: None,
            chunk_start: false,
            chunk_end: false,
            line: lineno,
        };
        parse_misc(cols[9], &mut raw, &mut out.unknown_misc_keys)
            .map_err(|message| ParseError::Malformed { line: lineno, message })?;
        sentence.push(raw);
    }
    if !sentence.is_empty() {
        let d = doc.get_or_insert_with(|| DocBuilder::new(format!("doc-{}", implicit_docs + 1)));
        d.push_sentence(sentence)?;
    }
    if let Some(d) = doc {
        out.documents.push(d.finish()?);
    }
    if out.unknown_misc_keys > 0 {
        log::warn!("ignored {} unknown MISC entries", out.unknown_misc_keys);
    }
    Ok(out)
}

fn newdoc_id(comment: &str) -> Option<String> {
    let rest = comment.trim().strip_prefix("newdoc")?;
    let rest = rest.trim_start();
    let id = rest.strip_prefix("id").map(|r| r.trim_start().trim_start_matches('=').trim());
    Some(id.filter(|s| !s.is_empty()).unwrap_or("").to_string())
}

fn parse_misc(misc: &str, raw: &mut RawWord, unknown: &mut usize) -> Result<(), String> {
    if misc == "_" {
        return Ok(());
    }
    for item in misc.split('|') {
        let (key, value) = item.split_once('=').unwrap_or((item, ""));
        match key {
            "NER" => {
                raw.ner = match value {
                    "O" | "" | "_" => None,
                    v => {
                        if let Some(t) = v.strip_prefix("B-") {
                            Some((true, NerTag::parse(t)))
                        } else if let Some(t) = v.strip_prefix("I-") {
                            Some((false, NerTag::parse(t)))
                        } else {
                            Some((false, NerTag::parse(v)))
                        }
                    }
                }
            }
            "ChunkStart" => raw.chunk_start = value == "Yes",
            "ChunkEnd" => raw.chunk_end = value == "Yes",
            "SpaceAfter" => {
                if value == "No" {
                    raw.word.space_after.clear();
                }
            }
            "SpacesAfter" => raw.word.space_after = unescape_spaces(value)?,
            _ => *unknown += 1,
        }
    }
    Ok(())
}

fn unescape_spaces(value: &str) -> Result<String, String> {
    let mut out = String::new();
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('s') => out.push(' '),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('p') | Some('|') => out.push('|'),
            Some('\\') => out.push('\\'),
            other => {
                return Err(format!("bad escape in SpacesAfter: \\{}", other.map(String::from).unwrap_or_default()))
            }
        }
    }
    Ok(out)
}

fn escape_spaces(value: &str) -> String {
    let mut out = String::new();
    for c in value.chars() {
        match c {
            ' ' => out.push_str("\\s"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '|' => out.push_str("\\p"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

/// Writes documents in the same dialect [`read_conllu`] accepts.
pub fn write_conllu<W: Write>(docs: &[ParsedDocument], mut w: W) -> std::io::Result<()> {
    for doc in docs {
        writeln!(w, "# newdoc id = {}", doc.doc_id)?;
        for sent in doc.sentence_spans() {
            for i in sent.indices() {
                let word = &doc.words[i];
                let head = word.head.map(|h| h - sent.start + 1).unwrap_or(0);
                let mut misc: Vec<String> = Vec::new();
                if let Some(e) = doc.entity_at(i) {
                    let prefix = if e.span.start == i { "B" } else { "I" };
                    misc.push(format!("NER={prefix}-{}", e.tag));
                }
                if doc.noun_chunks.iter().any(|c| c.start == i) {
                    misc.push("ChunkStart=Yes".into());
                }
                if doc.noun_chunks.iter().any(|c| c.end == i + 1) {
                    misc.push("ChunkEnd=Yes".into());
                }
                match word.space_after.as_str() {
                    " " => {}
                    "" => misc.push("SpaceAfter=No".into()),
                    other => misc.push(format!("SpacesAfter={}", escape_spaces(other))),
                }
                let misc = if misc.is_empty() { "_".to_string() } else { misc.join("|") };
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t{}",
                    i - sent.start + 1,
                    word.surface,
                    word.lemma,
                    word.pos,
                    head,
                    word.dep,
                    misc
                )?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// One JSON document per line, for debugging.
pub fn write_jsonl<W: Write>(docs: &[ParsedDocument], mut w: W) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        writeln!(w)?;
    }
    Ok(())
}
