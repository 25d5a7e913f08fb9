use super::{SubwordTokenizer, TokenError, Vocabulary};

/// Whole-word tokenizer for synthetic vocabularies: tokens are separated by single spaces.
///
/// Decoding joins tokens with spaces, so it does not distribute over concatenation and
/// cannot be used for word-label alignment.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab: Vocabulary,
}

impl WordTokenizer {
    /// `tokens` is the base vocabulary; `<CALL>` is appended.
    pub fn new(tokens: Vec<String>) -> Result<Self, TokenError> {
        if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(TokenError::Vocabulary(format!("word token {t:?} is empty or contains whitespace")));
        }
        Ok(WordTokenizer { vocab: Vocabulary::with_call(tokens)? })
    }

    pub fn from_vocabulary(vocab: Vocabulary) -> Self {
        WordTokenizer { vocab }
    }

    pub fn to_json(&self) -> String {
        let base: Vec<String> = self.vocab.tokens().iter().filter(|t| *t != super::CALL_TOKEN).cloned().collect();
        serde_json::to_string_pretty(&super::TokenizerFile::Word { tokens: base }).expect("tokenizer serializes")
    }
}

impl SubwordTokenizer for WordTokenizer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>, TokenError> {
        text.split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| self.vocab.id(w).ok_or_else(|| TokenError::UnknownToken(w.to_string())))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> Result<String, TokenError> {
        let words: Result<Vec<&str>, _> =
            ids.iter().map(|&id| self.vocab.token(id).ok_or(TokenError::UnknownId(id))).collect();
        Ok(words?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let tok = WordTokenizer::new(vec!["A1".into(), "V3".into()]).unwrap();
        let ids = tok.encode("A1 V3 A1").unwrap();
        assert_eq!(ids, [0, 1, 0]);
        assert_eq!(tok.decode(&ids).unwrap(), "A1 V3 A1");
        assert_eq!(tok.decode(&[2]).unwrap(), "<CALL>");
        assert!(matches!(tok.encode("A1 Q"), Err(TokenError::UnknownToken(_))));
        assert!(WordTokenizer::new(vec!["a b".into()]).is_err());
    }
}
