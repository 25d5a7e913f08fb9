use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{SubwordTokenizer, TokenError, TokenizerFile, Vocabulary, EOT_TOKEN};

/// Marks a space that belongs to the following symbol.
const SPACE: char = '▁';

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct BpeFile {
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Byte-pair tokenizer without byte fallback.
///
/// Pre-tokens are a letter run, a single digit or a single other character, each optionally
/// preceded by one space. A space not followed by a pre-token, and any other whitespace
/// character, is a token of its own. Merges never cross pre-token boundaries, so digits
/// are always split.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    vocab: Vocabulary,
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

/// Learns merges by pair frequency; ties go to the lexicographically smallest pair.
#[derive(Debug, Clone, Copy)]
pub struct BpeTrainer {
    /// Stop once the vocabulary (without `<CALL>`) reaches this many entries.
    pub vocab_size: usize,
    /// Stop once the most frequent pair occurs fewer times than this.
    pub min_frequency: usize,
}

struct Piece {
    symbols: Vec<String>,
    /// Byte offset of the last character of each symbol.
    offsets: Vec<usize>,
}

fn pre_tokenize(text: &str) -> Vec<Piece> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (offset, c) = chars[i];
        let mut symbols = Vec::new();
        let mut offsets = Vec::new();
        let mut lead = false;
        if c.is_whitespace() {
            let next_is_core = c == ' ' && chars.get(i + 1).is_some_and(|(_, n)| !n.is_whitespace());
            if !next_is_core {
                symbols.push(if c == ' ' { SPACE.to_string() } else { c.to_string() });
                pieces.push(Piece { symbols, offsets: vec![offset] });
                i += 1;
                continue;
            }
            lead = true;
            i += 1;
        }
        let start = i;
        let first = chars[start].1;
        let mut end = start + 1;
        if first.is_alphabetic() {
            while end < chars.len() && chars[end].1.is_alphabetic() {
                end += 1;
            }
        }
        for (k, &(at, ch)) in chars[start..end].iter().enumerate() {
            if k == 0 && lead {
                symbols.push(format!("{SPACE}{ch}"));
            } else {
                symbols.push(ch.to_string());
            }
            offsets.push(at);
        }
        pieces.push(Piece { symbols, offsets });
        i = end;
    }
    pieces
}

fn default_alphabet() -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for b in 0x21u8..=0x7e {
        let c = b as char;
        set.insert(c.to_string());
        set.insert(format!("{SPACE}{c}"));
    }
    for s in [SPACE.to_string(), "\n".into(), "\t".into(), "\r".into()] {
        set.insert(s);
    }
    set
}

impl BpeTrainer {
    pub fn train<'a, I: IntoIterator<Item = &'a str>>(&self, texts: I) -> Result<BpeTokenizer, TokenError> {
        let mut alphabet = default_alphabet();
        let mut word_counts: HashMap<Vec<String>, usize> = HashMap::new();
        for text in texts {
            if let Some(offset) = text.find(SPACE) {
                return Err(TokenError::Unencodable { ch: SPACE, offset });
            }
            for piece in pre_tokenize(text) {
                alphabet.extend(piece.symbols.iter().cloned());
                *word_counts.entry(piece.symbols).or_default() += 1;
            }
        }
        let alphabet: Vec<String> = alphabet.into_iter().collect();
        let mut tok = BpeTokenizer::build(alphabet, Vec::new())?;
        let mut words: Vec<(Vec<u32>, usize)> = word_counts
            .into_iter()
            .map(|(syms, n)| (syms.iter().map(|s| tok.vocab.id(s).expect("alphabet covers corpus")).collect(), n))
            .collect();
        words.sort();

        let mut base_len = tok.vocab.size() - 1;
        while base_len < self.vocab_size {
            let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
            for (syms, n) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += n;
                }
            }
            let token = |id: u32| tok.vocab.token(id).expect("id in vocabulary").to_string();
            let best = pairs
                .into_iter()
                .map(|(p, n)| (n, token(p.0), token(p.1), p))
                .min_by(|a, b| b.0.cmp(&a.0).then_with(|| (&a.1, &a.2).cmp(&(&b.1, &b.2))));
            let Some((count, a, b, pair)) = best else { break };
            if count < self.min_frequency.max(1) {
                break;
            }
            let before = tok.vocab.size();
            tok.merges.push((a, b));
            tok = BpeTokenizer::build(std::mem::take(&mut tok.alphabet), std::mem::take(&mut tok.merges))?;
            if tok.vocab.size() > before {
                base_len += 1;
            }
            let (_, merged) = tok.ranks[&pair];
            for (syms, _) in &mut words {
                apply_merge(syms, pair, merged);
            }
        }
        Ok(tok)
    }
}

fn apply_merge(syms: &mut Vec<u32>, pair: (u32, u32), merged: u32) {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(merged);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

impl BpeTokenizer {
    fn build(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Result<Self, TokenError> {
        let mut tokens = vec![EOT_TOKEN.to_string()];
        let mut index: HashMap<String, u32> = HashMap::new();
        index.insert(EOT_TOKEN.into(), 0);
        for s in &alphabet {
            if index.insert(s.clone(), tokens.len() as u32).is_some() {
                return Err(TokenError::Vocabulary(format!("duplicate alphabet entry {s:?}")));
            }
            tokens.push(s.clone());
        }
        let mut ranks = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            let lookup = |s: &String| {
                index.get(s).copied().ok_or_else(|| TokenError::Vocabulary(format!("merge part {s:?} undefined")))
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            let joined = format!("{a}{b}");
            let id = match index.get(&joined) {
                Some(&id) => id,
                None => {
                    let id = tokens.len() as u32;
                    index.insert(joined.clone(), id);
                    tokens.push(joined);
                    id
                }
            };
            ranks.entry((ia, ib)).or_insert((rank, id));
        }
        let vocab = Vocabulary::with_call(tokens)?;
        Ok(BpeTokenizer { vocab, alphabet, merges, ranks })
    }

    pub(super) fn from_file(f: BpeFile) -> Result<Self, TokenError> {
        Self::build(f.alphabet, f.merges)
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile::Bpe(BpeFile { alphabet: self.alphabet.clone(), merges: self.merges.clone() });
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn encode_piece(&self, piece: &Piece, out: &mut Vec<u32>) -> Result<(), TokenError> {
        let mut syms = Vec::with_capacity(piece.symbols.len());
        for (s, &offset) in piece.symbols.iter().zip(&piece.offsets) {
            let id = self.vocab.id(s).ok_or_else(|| {
                let ch = s.chars().last().expect("symbols are non-empty");
                TokenError::Unencodable { ch, offset }
            })?;
            syms.push(id);
        }
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, (w[0], w[1]), id)))
                .min();
            let Some((_, pair, merged)) = best else { break };
            apply_merge(&mut syms, pair, merged);
        }
        out.extend(syms);
        Ok(())
    }
}

impl SubwordTokenizer for BpeTokenizer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>, TokenError> {
        if let Some(offset) = text.find(SPACE) {
            return Err(TokenError::Unencodable { ch: SPACE, offset });
        }
        let mut out = Vec::new();
        for piece in pre_tokenize(text) {
            self.encode_piece(&piece, &mut out)?;
        }
        Ok(out)
    }

    fn decode(&self, ids: &[u32]) -> Result<String, TokenError> {
        let mut s = String::new();
        for &id in ids {
            let t = self.vocab.token(id).ok_or(TokenError::UnknownId(id))?;
            s.extend(t.chars().map(|c| if c == SPACE { ' ' } else { c }));
        }
        Ok(s)
    }
}
