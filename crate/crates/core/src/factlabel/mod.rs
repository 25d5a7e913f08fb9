//! Word-level fact labeling.
//!
//! Every word receives one of three classes. The rules run in a fixed order:
//!
//! 1. named-entity spans: the first mention is a fact, later mentions are repeats
//!    (PERSON entities repeat when any name component was seen before);
//! 2. noun chunks not covered by an entity, then bare numeric words: likely persons,
//!    organisations, proper nouns, common nouns in factual roles and numbers are facts
//!    on their first occurrence;
//! 3. determiners, prepositions, conjunctions, auxiliaries and punctuation are grammatical,
//!    including when they sit inside a fact span;
//! 4. everything else is other.
//!
//! Mentions are tracked across the whole document and reset between documents.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::LabelerConfig;

use crate::lingparse::{split_chunks_on_whitespace, NerTag, ParsedDocument, ParsedWord, Pos, Span};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("entity string is empty after normalization")]
    EmptyEntity,
    #[error("chunk {start}..{end} is out of bounds for a document of {len} words")]
    ChunkOutOfBounds { start: usize, end: usize, len: usize },
    #[error("labeler config line {line}: {message}")]
    Config { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordClass {
    Fact,
    Grammatical,
    Other,
}

impl WordClass {
    pub fn as_u8(self) -> u8 {
        match self {
            WordClass::Other => 0,
            WordClass::Grammatical => 1,
            WordClass::Fact => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(WordClass::Other),
            1 => Some(WordClass::Grammatical),
            2 => Some(WordClass::Fact),
            _ => None,
        }
    }
}

/// The rule that decided a word's class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    NamedEntityFirst,
    PersonComponent,
    OrgKeyword,
    ProperNoun,
    PredicativeAttribute,
    DirectObject,
    Appositive,
    NumericFirst,
    DeterminerLike,
    RepeatMention,
    DefaultOther,
}

impl Reason {
    pub fn class(self) -> WordClass {
        match self {
            Reason::DeterminerLike => WordClass::Grammatical,
            Reason::RepeatMention | Reason::DefaultOther => WordClass::Other,
            _ => WordClass::Fact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WordLabel {
    pub class: WordClass,
    pub reason: Reason,
}

impl From<Reason> for WordLabel {
    fn from(reason: Reason) -> Self {
        WordLabel { class: reason.class(), reason }
    }
}

/// Category under which a mention string is logged.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MentionCategory {
    Entity(NerTag),
    Person,
    Org,
    Proper,
    Noun,
}

#[derive(Debug, Clone, Default)]
pub struct MentionTracker {
    seen_entities: BTreeMap<MentionCategory, BTreeSet<String>>,
    seen_person_components: BTreeSet<String>,
    seen_numbers: BTreeSet<String>,
}

impl MentionTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Whether the normalized string was logged under any category.
    pub fn seen(&self, normalized: &str) -> bool {
        self.seen_entities.values().any(|s| s.contains(normalized))
    }

    pub fn seen_in(&self, category: &MentionCategory, normalized: &str) -> bool {
        self.seen_entities.get(category).is_some_and(|s| s.contains(normalized))
    }

    pub fn seen_number(&self, number: &str) -> bool {
        self.seen_numbers.contains(number)
    }

    pub fn record(&mut self, category: MentionCategory, normalized: &str) {
        self.seen_entities.entry(category).or_default().insert(normalized.to_string());
    }

    pub fn record_person(&mut self, normalized: &str) {
        self.seen_person_components.extend(normalized.split_whitespace().map(str::to_string));
        self.record(MentionCategory::Person, normalized);
    }

    pub fn record_number(&mut self, number: &str) {
        self.seen_numbers.insert(number.to_string());
    }

    pub fn person_components(&self) -> &BTreeSet<String> {
        &self.seen_person_components
    }
}

/// Case-folds, drops punctuation and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize_number(surface: &str) -> String {
    surface.chars().filter(|c| *c != ',').collect()
}

/// True iff any name component of `entity` has been seen in a person mention.
pub fn is_person_repeat(tracker: &MentionTracker, entity: &str) -> Result<bool, LabelError> {
    let normalized = normalize(entity);
    if normalized.is_empty() {
        return Err(LabelError::EmptyEntity);
    }
    Ok(normalized.split_whitespace().any(|c| tracker.seen_person_components.contains(c)))
}

/// Outcome of the supplementary detection rules for one noun chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkDecision {
    Fact(Reason),
    /// A fact rule matched but the mention was seen before.
    Repeat(Reason),
    NotFact,
}

#[derive(Debug, Clone, Default)]
pub struct Labeler {
    config: LabelerConfig,
}

impl Labeler {
    pub fn new(config: LabelerConfig) -> Self {
        Labeler { config }
    }

    pub fn config(&self) -> &LabelerConfig {
        &self.config
    }

    fn is_grammatical(&self, w: &ParsedWord) -> bool {
        match w.pos {
            Pos::Det | Pos::Adp | Pos::Cconj | Pos::Sconj | Pos::Aux | Pos::Punct => true,
            Pos::Pron => self.config.possessive_deps.contains(&w.dep.to_lowercase()),
            _ => false,
        }
    }

    fn content_text(&self, doc: &ParsedDocument, span: Span) -> String {
        let parts: Vec<&str> = span
            .indices()
            .filter(|&i| !self.is_grammatical(&doc.words[i]))
            .map(|i| doc.words[i].surface.as_str())
            .collect();
        normalize(&parts.join(" "))
    }

    /// Applies the supplementary rules to a noun chunk, logging the mention on a match.
    pub fn classify_chunk(
        &self,
        chunk: Span,
        doc: &ParsedDocument,
        tracker: &mut MentionTracker,
    ) -> Result<ChunkDecision, LabelError> {
        let len = doc.words.len();
        if chunk.is_empty() || chunk.end > len {
            return Err(LabelError::ChunkOutOfBounds { start: chunk.start, end: chunk.end, len });
        }
        let words = &doc.words;
        let head = chunk_head(doc, chunk);
        let head_word = &words[head];
        let content: Vec<usize> = chunk.indices().filter(|&i| !self.is_grammatical(&words[i])).collect();
        if content.is_empty() || head_word.pos == Pos::Pron {
            return Ok(ChunkDecision::NotFact);
        }
        let key = self.content_text(doc, chunk);
        if key.is_empty() {
            return Ok(ChunkDecision::NotFact);
        }
        let dep = head_word.dep.to_lowercase();
        let cfg = &self.config;

        // (a) likely person
        if head_word.pos == Pos::Propn && is_capitalized(&head_word.surface) {
            let role = cfg.subject_deps.contains(&dep) || cfg.appositive_deps.contains(&dep);
            if role || self.has_person_cue(doc, chunk) {
                let repeat = is_person_repeat(tracker, &key)? || tracker.seen(&key);
                tracker.record_person(&key);
                return Ok(decide(repeat, Reason::PersonComponent));
            }
        }

        // (b) likely organisation
        let has_keyword = content.iter().any(|&i| {
            cfg.org_keywords.contains(&words[i].surface.to_lowercase())
                || cfg.org_keywords.contains(&words[i].lemma.to_lowercase())
        });
        let definite_capitalized = words[chunk.start].surface.eq_ignore_ascii_case("the")
            && head != chunk.start
            && is_capitalized(&head_word.surface);
        if has_keyword || definite_capitalized {
            let repeat = tracker.seen(&key);
            tracker.record(MentionCategory::Org, &key);
            return Ok(decide(repeat, Reason::OrgKeyword));
        }

        // (c) proper noun; a mention made only of known name components repeats a person
        if content.iter().any(|&i| words[i].pos == Pos::Propn) {
            let repeat = tracker.seen(&key) || key.split_whitespace().all(|c| tracker.person_components().contains(c));
            tracker.record(MentionCategory::Proper, &key);
            return Ok(decide(repeat, Reason::ProperNoun));
        }

        // (d) common noun in a factual role
        if head_word.pos == Pos::Noun && !self.governed_by_manner_preposition(doc, head) {
            let role = if cfg.predicative_deps.contains(&dep) || has_child(doc, head, "cop") {
                Some(Reason::PredicativeAttribute)
            } else if cfg.object_deps.contains(&dep) {
                Some(Reason::DirectObject)
            } else if cfg.appositive_deps.contains(&dep) {
                Some(Reason::Appositive)
            } else {
                None
            };
            if let Some(reason) = role {
                let repeat = tracker.seen(&key);
                tracker.record(MentionCategory::Noun, &key);
                return Ok(decide(repeat, reason));
            }
        }

        // (e) numeric
        if head_word.is_numeric || content.iter().all(|&i| words[i].is_numeric) {
            let numbers: Vec<String> = content
                .iter()
                .filter(|&&i| words[i].is_numeric)
                .map(|&i| normalize_number(&words[i].surface))
                .collect();
            let repeat = !numbers.is_empty() && numbers.iter().all(|n| tracker.seen_number(n));
            for n in &numbers {
                tracker.record_number(n);
            }
            return Ok(decide(repeat, Reason::NumericFirst));
        }

        Ok(ChunkDecision::NotFact)
    }

    fn has_person_cue(&self, doc: &ParsedDocument, chunk: Span) -> bool {
        let cfg = &self.config;
        let clean = |w: &ParsedWord| w.surface.trim_end_matches('.').to_lowercase();
        let first = clean(&doc.words[chunk.start]);
        if cfg.person_titles.contains(&first) {
            return true;
        }
        let before = chunk.start.checked_sub(1).map(|i| clean(&doc.words[i]));
        let after = doc.words.get(chunk.end).map(clean);
        let is_cue = |w: &Option<String>, titles: bool| {
            w.as_ref().is_some_and(|w| cfg.person_verbs.contains(w) || (titles && cfg.person_titles.contains(w)))
        };
        is_cue(&before, true) || is_cue(&after, false)
    }

    fn governed_by_manner_preposition(&self, doc: &ParsedDocument, word: usize) -> bool {
        let manner = &self.config.manner_prepositions;
        let is_manner = |w: &ParsedWord| w.pos == Pos::Adp && manner.contains(&w.surface.to_lowercase());
        if doc.words.iter().any(|w| w.head == Some(word) && w.dep.eq_ignore_ascii_case("case") && is_manner(w)) {
            return true;
        }
        doc.words[word].head.is_some_and(|h| is_manner(&doc.words[h]))
    }

    /// Labels every word of a document.
    pub fn label_document(&self, doc: &ParsedDocument) -> Vec<WordLabel> {
        let doc = split_chunks_on_whitespace(doc);
        let n = doc.words.len();
        let mut decided: Vec<Option<Reason>> = vec![None; n];
        let mut claimed = vec![false; n];
        let mut repeat = vec![false; n];
        let mut tracker = MentionTracker::new();

        let mut entities: Vec<_> = doc.entity_spans.iter().collect();
        entities.sort_by_key(|e| e.span);
        for entity in entities {
            let key = self.content_text(&doc, entity.span);
            for i in entity.span.indices() {
                claimed[i] = true;
            }
            if key.is_empty() {
                continue;
            }
            let is_repeat = match entity.tag {
                NerTag::Person => {
                    let r = is_person_repeat(&tracker, &key).unwrap_or(false) || tracker.seen(&key);
                    tracker.record_person(&key);
                    r
                }
                ref tag => {
                    let r = tracker.seen(&key);
                    tracker.record(MentionCategory::Entity(tag.clone()), &key);
                    r
                }
            };
            for i in entity.span.indices() {
                if doc.words[i].is_numeric {
                    tracker.record_number(&normalize_number(&doc.words[i].surface));
                }
                if is_repeat {
                    repeat[i] = true;
                } else {
                    decided[i] = Some(Reason::NamedEntityFirst);
                }
            }
        }

        let mut chunks = doc.noun_chunks.clone();
        chunks.sort();
        for chunk in chunks {
            let Some(sub) = unclaimed_run(&doc, chunk, &claimed) else { continue };
            let decision =
                self.classify_chunk(sub, &doc, &mut tracker).expect("chunk bounds come from a valid document");
            for i in sub.indices() {
                claimed[i] = true;
                match decision {
                    ChunkDecision::Fact(reason) => decided[i] = Some(reason),
                    ChunkDecision::Repeat(_) => repeat[i] = true,
                    ChunkDecision::NotFact => {}
                }
            }
            if decision == ChunkDecision::NotFact {
                for i in sub.indices() {
                    if doc.words[i].is_numeric {
                        claimed[i] = false;
                    }
                }
            }
        }

        for i in 0..n {
            let w = &doc.words[i];
            if claimed[i] || !w.is_numeric || self.is_grammatical(w) {
                continue;
            }
            let number = normalize_number(&w.surface);
            if tracker.seen_number(&number) {
                repeat[i] = true;
            } else {
                decided[i] = Some(Reason::NumericFirst);
            }
            tracker.record_number(&number);
        }

        (0..n)
            .map(|i| {
                let reason = if self.is_grammatical(&doc.words[i]) {
                    Reason::DeterminerLike
                } else if let Some(r) = decided[i] {
                    r
                } else if repeat[i] {
                    Reason::RepeatMention
                } else {
                    Reason::DefaultOther
                };
                WordLabel::from(reason)
            })
            .collect()
    }
}

fn decide(repeat: bool, reason: Reason) -> ChunkDecision {
    if repeat {
        ChunkDecision::Repeat(reason)
    } else {
        ChunkDecision::Fact(reason)
    }
}

fn is_capitalized(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

fn has_child(doc: &ParsedDocument, word: usize, dep: &str) -> bool {
    doc.words.iter().any(|w| w.head == Some(word) && w.dep.eq_ignore_ascii_case(dep))
}

/// The chunk word whose head lies outside the chunk (the last such word when several do).
fn chunk_head(doc: &ParsedDocument, chunk: Span) -> usize {
    chunk.indices().rev().find(|&i| doc.words[i].head.is_none_or(|h| !chunk.contains(h))).unwrap_or(chunk.end - 1)
}

/// The run of words not claimed by an entity that contains the chunk head.
fn unclaimed_run(doc: &ParsedDocument, chunk: Span, claimed: &[bool]) -> Option<Span> {
    let head = chunk_head(doc, chunk);
    if claimed[head] {
        return None;
    }
    let mut start = head;
    while start > chunk.start && !claimed[start - 1] {
        start -= 1;
    }
    let mut end = head + 1;
    while end < chunk.end && !claimed[end] {
        end += 1;
    }
    Some(Span::new(start, end))
}

/// Labels a document with the bundled rule lists.
pub fn label_document(doc: &ParsedDocument) -> Vec<WordLabel> {
    Labeler::default().label_document(doc)
}

/// One line of the `annotate` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedWord {
    pub doc_id: String,
    pub index: usize,
    pub surface: String,
    pub space_after: String,
    pub class: WordClass,
    pub reason: Reason,
}

pub fn annotated_words(doc: &ParsedDocument, labels: &[WordLabel]) -> Vec<AnnotatedWord> {
    doc.words
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(index, (w, l))| AnnotatedWord {
            doc_id: doc.doc_id.clone(),
            index,
            surface: w.surface.clone(),
            space_after: w.space_after.clone(),
            class: l.class,
            reason: l.reason,
        })
        .collect()
}

pub fn write_annotations<W: Write>(words: &[AnnotatedWord], mut w: W) -> std::io::Result<()> {
    for word in words {
        serde_json::to_writer(&mut w, word)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Groups `annotate` output lines back into per-document word lists, preserving order.
pub fn group_annotations(words: Vec<AnnotatedWord>) -> Vec<(String, Vec<AnnotatedWord>)> {
    let mut out: Vec<(String, Vec<AnnotatedWord>)> = Vec::new();
    for w in words {
        match out.last_mut() {
            Some((id, list)) if *id == w.doc_id => list.push(w),
            _ => out.push((w.doc_id.clone(), vec![w])),
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod testdoc {
    use crate::lingparse::{read_conllu, ParsedDocument};

    /// Builds a document from a compact notation: one string per sentence, words
    /// separated by spaces, each `surface/UPOS/dep/head[/flag...]` with 1-based heads.
    /// Flags: `B-TAG`/`I-TAG` entity, `[` chunk start, `]` chunk end, `~` no space after,
    /// `nl` newline after.
    pub fn compact(sentences: &[&str]) -> ParsedDocument {
        let mut conll = String::from("# newdoc id = t\n");
        for sent in sentences {
            for (i, tok) in sent.split_whitespace().enumerate() {
                let parts: Vec<&str> = tok.split('/').collect();
                let mut misc = Vec::new();
                for flag in &parts[4..] {
                    match *flag {
                        "[" => misc.push("ChunkStart=Yes".to_string()),
                        "]" => misc.push("ChunkEnd=Yes".to_string()),
                        "[]" => misc.push("ChunkStart=Yes|ChunkEnd=Yes".to_string()),
                        "~" => misc.push("SpaceAfter=No".to_string()),
                        "nl" => misc.push("SpacesAfter=\\n".to_string()),
                        ner => misc.push(format!("NER={ner}")),
                    }
                }
                let misc = if misc.is_empty() { "_".to_string() } else { misc.join("|") };
                conll.push_str(&format!(
                    "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t{}\n",
                    i + 1,
                    parts[0],
                    parts[1],
                    parts[3],
                    parts[2],
                    misc
                ));
            }
            conll.push('\n');
        }
        read_conllu(conll.as_bytes()).expect("valid compact document").documents.remove(0)
    }
}
