//! Word-level tokenizer over a closed vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const IMG: TokenId = 4;

/// Spellings of the reserved ids, in id order. They double as the vocabulary
/// file header.
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<img>"];

/// Lowercase, drop ASCII punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    words(text).collect::<Vec<_>>().join(" ")
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|w| {
        let w: String = w
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .flat_map(char::to_lowercase)
            .collect();
        (!w.is_empty()).then_some(w)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Words with count ≥ `min_count`, ids in descending frequency then
    /// lexicographic order, starting after the reserved block.
    pub fn build<S: AsRef<str>>(texts: &[S], min_count: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words(t.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(w, _)| w)))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Normalized words to ids; unknown words become [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        words(text)
            .map(|w| match self.ids.get(&w) {
                Some(&id) if id as usize >= RESERVED.len() => id,
                _ => UNK,
            })
            .collect()
    }

    /// Space-joined tokens; PAD/BOS/EOS/IMG are dropped, UNK is kept as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::OutOfVocab {
                id: id as usize,
                vocab_size: self.len(),
            })?;
            if matches!(id, PAD | BOS | EOS | IMG) {
                continue;
            }
            out.push(tok);
        }
        Ok(out.join(" "))
    }

    /// Vocabulary file contents: the reserved header lines, then one token per line.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(contents: &str) -> Result<Self> {
        let lines: Vec<&str> = contents.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::schema("vocabulary", "missing reserved-token header"));
        }
        let mut seen = std::collections::HashSet::new();
        for (n, line) in lines.iter().enumerate().skip(RESERVED.len()) {
            if line.is_empty() || line.contains(char::is_whitespace) || normalize(line) != *line {
                return Err(Error::schema(
                    format!("vocabulary line {}", n + 1),
                    format!("invalid token {line:?}"),
                ));
            }
            if !seen.insert(*line) || RESERVED.contains(line) {
                return Err(Error::schema(
                    format!("vocabulary line {}", n + 1),
                    format!("duplicate token {line:?}"),
                ));
            }
        }
        Ok(Self::from_tokens(
            lines[RESERVED.len()..].iter().map(|s| s.to_string()),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&s)
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> String {
        crate::fsutil::sha256_hex(self.to_file_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["is there water", "is there forest"], 1).unwrap()
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = vocab();
        assert_eq!(v.len(), 9);
        assert_eq!(v.id("is"), Some(5));
        assert_eq!(v.id("there"), Some(6));
        assert_eq!(v.id("forest"), Some(7));
        assert_eq!(v.id("water"), Some(8));
    }

    #[test]
    fn empty_corpus() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn case_folding() {
        let v = Vocabulary::build(&["Water water WATER."], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("water"), Some(5));
    }

    #[test]
    fn min_count_filters() {
        let v = Vocabulary::build(&["a a b"], 2).unwrap();
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn encode_cases() {
        let v = vocab();
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("is there water"), vec![5, 6, 8]);
        assert_eq!(v.encode("is there lava"), vec![5, 6, UNK]);
        assert_eq!(v.encode("Is there WATER?"), vec![5, 6, 8]);
    }

    #[test]
    fn decode_cases() {
        let v = Vocabulary::build(&["yes no"], 1).unwrap();
        assert_eq!(v.decode(&[]).unwrap(), "");
        let yes = v.id("yes").unwrap();
        assert_eq!(v.decode(&[BOS, yes, EOS]).unwrap(), "yes");
        assert_eq!(v.decode(&[IMG, PAD, yes]).unwrap(), "yes");
        assert!(matches!(v.decode(&[99]), Err(Error::OutOfVocab { id: 99, .. })));
    }

    #[test]
    fn reserved_spellings_are_not_words() {
        let v = Vocabulary::build(&["<img> water"], 1).unwrap();
        // punctuation stripping turns "<img>" into "img", an ordinary word
        assert!(v.id("img").unwrap() >= 5);
        assert!(v.encode("<img>").iter().all(|&id| id != IMG));
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let s = v.to_file_string();
        assert!(s.starts_with("<pad>\n<bos>\n<eos>\n<unk>\n<img>\n"));
        let back = Vocabulary::parse(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_string(), s);
    }

    #[test]
    fn parse_rejects_bad_files() {
        assert!(Vocabulary::parse("water\n").is_err());
        assert!(Vocabulary::parse("<pad>\n<bos>\n<eos>\n<unk>\n<img>\nx\nx\n").is_err());
        assert!(Vocabulary::parse("<pad>\n<bos>\n<eos>\n<unk>\n<img>\nWater\n").is_err());
    }
}
