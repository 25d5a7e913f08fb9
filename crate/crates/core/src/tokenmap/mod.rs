//! Subword alignment of word labels, the `<CALL>`-extended vocabulary, and conversion of
//! external database-lookup annotations into per-token call labels.

mod bpe;
mod judge;
mod word;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bpe::{BpeTokenizer, BpeTrainer};
pub use judge::{convert_judge_annotations, delegated_calls, render_call_targets, JudgeConversion};
pub use word::WordTokenizer;

use crate::factlabel::{WordClass, WordLabel};
use crate::lingparse::ParsedDocument;

pub const CALL_TOKEN: &str = "<CALL>";
pub const EOT_TOKEN: &str = "<|endoftext|>";

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("character {ch:?} at byte {offset} is not in the tokenizer alphabet")]
    Unencodable { ch: char, offset: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("tokens of word {word_index} ({word:?}) do not reconstruct its text")]
    Alignment { word_index: usize, word: String },
    #[error("{labels} labels for {words} words")]
    LabelCount { words: usize, labels: usize },
    #[error("markup error at byte {offset}: {message}")]
    Markup { offset: usize, message: String },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid tokenizer file: {0}")]
    Format(String),
}

/// Token strings with `<CALL>` appended exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    call_token_id: u32,
}

impl Vocabulary {
    /// Extends a base vocabulary by `<CALL>`.
    pub fn with_call(base: Vec<String>) -> Result<Self, TokenError> {
        if base.iter().any(|t| t == CALL_TOKEN) {
            return Err(TokenError::Vocabulary(format!("base vocabulary already contains {CALL_TOKEN}")));
        }
        let mut tokens = base;
        tokens.push(CALL_TOKEN.to_string());
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from a full token list that contains `<CALL>` exactly once.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        let call_token_id =
            *index.get(CALL_TOKEN).ok_or_else(|| TokenError::Vocabulary(format!("missing {CALL_TOKEN}")))?;
        Ok(Vocabulary { tokens, index, call_token_id })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn call_token_id(&self) -> u32 {
        self.call_token_id
    }

    pub fn eot_id(&self) -> Option<u32> {
        self.id(EOT_TOKEN)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Injected tokenizer interface. Implementations must be shareable across threads.
pub trait SubwordTokenizer: Send + Sync {
    fn vocab(&self) -> &Vocabulary;
    fn encode(&self, text: &str) -> Result<Vec<u32>, TokenError>;
    /// Concatenation of the token texts; decoding is assumed to distribute over concatenation.
    fn decode(&self, ids: &[u32]) -> Result<String, TokenError>;
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TokenizerFile {
    Bpe(bpe::BpeFile),
    Word { tokens: Vec<String> },
}

/// Loads a tokenizer from its JSON description.
pub fn load_tokenizer(json: &str) -> Result<Arc<dyn SubwordTokenizer>, TokenError> {
    let file: TokenizerFile = serde_json::from_str(json).map_err(|e| TokenError::Format(e.to_string()))?;
    Ok(match file {
        TokenizerFile::Bpe(f) => Arc::new(BpeTokenizer::from_file(f)?),
        TokenizerFile::Word { tokens } => Arc::new(WordTokenizer::new(tokens)?),
    })
}

/// Per-token classes aligned to the words they came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenLabelSequence {
    pub token_ids: Vec<u32>,
    pub classes: Vec<WordClass>,
    pub word_of_token: Vec<usize>,
}

impl TokenLabelSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// A word's surface, the whitespace following it, and its class.
pub type LabeledWord<'a> = (&'a str, &'a str, WordClass);

/// Tokenizes a document word by word so that every token belongs to exactly one word.
pub fn propagate_labels(
    doc: &ParsedDocument,
    labels: &[WordLabel],
    tokenizer: &dyn SubwordTokenizer,
) -> Result<TokenLabelSequence, TokenError> {
    if labels.len() != doc.words.len() {
        return Err(TokenError::LabelCount { words: doc.words.len(), labels: labels.len() });
    }
    let words: Vec<LabeledWord> =
        doc.words.iter().zip(labels).map(|(w, l)| (w.surface.as_str(), w.space_after.as_str(), l.class)).collect();
    propagate_word_labels(&words, tokenizer)
}

/// Word-level core of [`propagate_labels`]. Whitespace before a word is tokenized with that
/// word; whitespace after the last word is attached to the last word.
pub fn propagate_word_labels(
    words: &[LabeledWord],
    tokenizer: &dyn SubwordTokenizer,
) -> Result<TokenLabelSequence, TokenError> {
    let mut out = TokenLabelSequence::default();
    let mut prefix = "";
    for (i, &(surface, space_after, class)) in words.iter().enumerate() {
        let mut chunk = String::with_capacity(prefix.len() + surface.len() + space_after.len());
        chunk.push_str(prefix);
        chunk.push_str(surface);
        if i + 1 == words.len() {
            chunk.push_str(space_after);
        }
        let alignment = || TokenError::Alignment { word_index: i, word: surface.to_string() };
        let ids = tokenizer.encode(&chunk).map_err(|_| alignment())?;
        if tokenizer.decode(&ids).map_err(|_| alignment())? != chunk {
            return Err(alignment());
        }
        for id in ids {
            out.token_ids.push(id);
            out.classes.push(class);
            out.word_of_token.push(i);
        }
        prefix = space_after;
    }
    Ok(out)
}

/// Byte range of every token within the decoded text.
pub fn token_offsets(tokenizer: &dyn SubwordTokenizer, ids: &[u32]) -> Result<Vec<std::ops::Range<usize>>, TokenError> {
    let mut pos = 0;
    ids.iter()
        .map(|&id| {
            let len = tokenizer.decode(&[id])?.len();
            let r = pos..pos + len;
            pos += len;
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factlabel::label_document;
    use crate::factlabel::testdoc::compact;

    fn tiny_bpe() -> BpeTokenizer {
        BpeTrainer { vocab_size: 400, min_frequency: 2 }
            .train(["Salzburg is in Austria. Salzburg hosts a festival. Mozart was born in Salzburg."])
            .unwrap()
    }

    #[test]
    fn vocabulary_contains_call_once() {
        let v = Vocabulary::with_call(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.token(v.call_token_id()), Some(CALL_TOKEN));
        assert!(Vocabulary::with_call(vec![CALL_TOKEN.into()]).is_err());
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn empty_document_gives_empty_sequence() {
        let tok = tiny_bpe();
        assert!(propagate_word_labels(&[], &tok).unwrap().is_empty());
    }

    #[test]
    fn every_subword_inherits_word_class() {
        // No merges: one token per character.
        let tok = BpeTrainer { vocab_size: 0, min_frequency: 2 }.train(["Salzburg"]).unwrap();
        let seq = propagate_word_labels(&[("Salzburg", "", WordClass::Fact)], &tok).unwrap();
        assert_eq!(seq.len(), 8);
        assert!(seq.classes.iter().all(|c| *c == WordClass::Fact));
    }

    #[test]
    fn fixture_sentence_matches_independent_tokenization() {
        let tok = tiny_bpe();
        let doc = compact(&[
            "Mozart/PROPN/nsubjpass/3/B-PERSON/[] was/AUX/auxpass/3 born/VERB/ROOT/0 in/ADP/prep/3 Salzburg/PROPN/pobj/4/B-GPE/[]/~ ./PUNCT/punct/3",
        ]);
        let labels = label_document(&doc);
        let seq = propagate_labels(&doc, &labels, &tok).unwrap();
        // Oracle: tokenize the whole sentence at once, then assign words by byte offsets.
        let text = doc.text();
        let whole = tok.encode(&text).unwrap();
        assert_eq!(seq.token_ids, whole);
        let offsets = token_offsets(&tok, &whole).unwrap();
        let mut word_end = Vec::new();
        let mut pos = 0;
        for w in &doc.words {
            pos += w.surface.len();
            word_end.push(pos);
            pos += w.space_after.len();
        }
        for (t, r) in offsets.iter().enumerate() {
            let content_end = r.end;
            let word = word_end.iter().position(|&e| e >= content_end).unwrap_or(doc.words.len() - 1);
            assert_eq!(seq.word_of_token[t], word);
            assert_eq!(seq.classes[t], labels[word].class);
        }
        assert_eq!(tok.decode(&seq.token_ids).unwrap(), text);
    }

    #[test]
    fn alignment_error_names_the_word() {
        let tok = WordTokenizer::new(vec!["a".into()]).unwrap();
        let err =
            propagate_word_labels(&[("a", " ", WordClass::Other), ("zz", "", WordClass::Fact)], &tok).unwrap_err();
        assert!(matches!(err, TokenError::Alignment { word_index: 1, ref word } if word == "zz"));
    }

    #[test]
    fn load_round_trip() {
        let tok = tiny_bpe();
        let loaded = load_tokenizer(&tok.to_json()).unwrap();
        assert_eq!(loaded.vocab(), tok.vocab());
        let text = "Mozart was born in Salzburg.";
        assert_eq!(loaded.encode(text).unwrap(), tok.encode(text).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn detokenization_reproduces_text(
                words in proptest::collection::vec(("[A-Za-z]{1,8}|[0-9]{1,4}|[,.]", prop_oneof![Just(" "), Just(""), Just("\n")]), 0..20)
            ) {
                let tok = tiny_bpe();
                let labeled: Vec<LabeledWord> = words.iter().map(|(s, sp)| (s.as_str(), *sp, WordClass::Other)).collect();
                let seq = propagate_word_labels(&labeled, &tok).unwrap();
                let text: String = words.iter().map(|(s, sp)| format!("{s}{sp}")).collect();
                prop_assert_eq!(tok.decode(&seq.token_ids).unwrap(), text);
                prop_assert!(seq.word_of_token.windows(2).all(|w| w[0] <= w[1]));
            }

            #[test]
            fn token_classes_sum_to_word_counts(
                words in proptest::collection::vec(("[A-Za-z]{1,8}|[0-9]{1,4}", 0u8..3), 1..20)
            ) {
                let tok = tiny_bpe();
                let labeled: Vec<LabeledWord> = words
                    .iter()
                    .map(|(s, c)| (s.as_str(), " ", WordClass::from_u8(*c).unwrap()))
                    .collect();
                let seq = propagate_word_labels(&labeled, &tok).unwrap();
                for (i, (_, _, class)) in labeled.iter().enumerate() {
                    let n = seq.word_of_token.iter().filter(|&&w| w == i).count();
                    let same = seq.word_of_token.iter().zip(&seq.classes).filter(|(&w, c)| w == i && *c == class).count();
                    prop_assert!(n >= 1);
                    prop_assert_eq!(n, same);
                }
            }
        }
    }
}
