//! Word-level vocabulary, input formatting with marker tokens, and a
//! rule-based sentence splitter.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const QUERY: usize = 4;
pub const REF: usize = 5;
pub const CONTEXT: usize = 6;

/// Special tokens in id order. They occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<unk>", "[query]", "[ref]", "[context]"];

const ABBREVIATIONS: [&str; 5] = ["e.g.", "i.e.", "etc.", "mr.", "dr."];

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max vocabulary size {max_size} leaves no room beyond the {specials} special tokens")]
    VocabTooSmall { max_size: usize, specials: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("max length {0} cannot hold the marker tokens (need at least 3)")]
    MaxLengthTooSmall(usize),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error("vocabulary io: {0}")]
    Io(String),
}

/// Lowercased word tokens; every punctuation character is its own token.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Normalized form of `text`: its word tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    normalize_words(text).join(" ")
}

/// Bijective token ↔ id mapping with the special tokens first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Words ranked by descending frequency, ties broken lexicographically,
    /// truncated so the whole vocabulary has at most `max_size` entries.
    pub fn build<S: AsRef<str>>(texts: &[S], max_size: usize) -> Result<Self, TokenizerError> {
        if max_size <= SPECIALS.len() {
            return Err(TokenizerError::VocabTooSmall {
                max_size,
                specials: SPECIALS.len(),
            });
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in normalize_words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Word ids of `text`; unknown words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize_words(text)
            .iter()
            .map(|w| self.ids.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Space-joined tokens. Special tokens other than UNK are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if id < SPECIALS.len() && id != UNK {
                continue;
            }
            words.push(tok);
        }
        Ok(words.join(" "))
    }

    /// `[query] q [ref] p [EOS]`, truncated to `max_len` with EOS kept last.
    pub fn format_passage(&self, query: &str, passage: &str, max_len: usize) -> Result<Vec<usize>, TokenizerError> {
        if max_len < 3 {
            return Err(TokenizerError::MaxLengthTooSmall(max_len));
        }
        let mut ids = vec![QUERY];
        ids.extend(self.encode(query));
        // the REF marker always survives truncation
        ids.truncate(max_len - 2);
        ids.push(REF);
        ids.extend(self.encode(passage));
        ids.truncate(max_len - 1);
        ids.push(EOS);
        Ok(ids)
    }

    /// `[context] T [EOS]`, truncated to `max_len` with EOS kept last.
    pub fn format_context(&self, context: &str, max_len: usize) -> Result<Vec<usize>, TokenizerError> {
        if max_len < 3 {
            return Err(TokenizerError::MaxLengthTooSmall(max_len));
        }
        let mut ids = vec![CONTEXT];
        ids.extend(self.encode(context));
        ids.truncate(max_len - 1);
        ids.push(EOS);
        Ok(ids)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(TokenizerError::Format(format!(
                "{} does not start with the special tokens",
                path.display()
            )));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(TokenizerError::Format(format!("{} has duplicate tokens", path.display())));
        }
        Ok(vocab)
    }
}

/// Splits on `.`, `!` or `?` at the end of a whitespace-delimited word,
/// keeping the punctuation. Common abbreviations do not end a sentence.
/// Whitespace inside each sentence is collapsed to single spaces.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for word in text.split_whitespace() {
        current.push(word);
        let terminal = word.ends_with(['.', '!', '?']);
        if terminal && !ABBREVIATIONS.contains(&word.to_lowercase().as_str()) {
            sentences.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    sentences
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Vocabulary {
        Vocabulary::build(&["the cat sat on the mat .", "a dog ran"], 100).unwrap()
    }

    #[test]
    fn frequency_order() {
        let v = Vocabulary::build(&["a b b"], 10).unwrap();
        assert!(v.id("b").unwrap() < v.id("a").unwrap());
        assert_eq!(v.id("b"), Some(SPECIALS.len()));
    }

    #[test]
    fn truncation_keeps_one_word() {
        let v = Vocabulary::build(&["x y"], SPECIALS.len() + 1).unwrap();
        assert_eq!(v.len(), SPECIALS.len() + 1);
        assert_eq!(v.token(SPECIALS.len()), Some("x"));
    }

    #[test]
    fn rebuild_is_identical() {
        assert_eq!(toy(), toy());
    }

    #[test]
    fn build_errors() {
        let empty: [&str; 0] = [];
        assert_eq!(Vocabulary::build(&empty, 100), Err(TokenizerError::EmptyCorpus));
        assert_eq!(Vocabulary::build(&["   "], 100), Err(TokenizerError::EmptyCorpus));
        assert!(matches!(
            Vocabulary::build(&["a"], SPECIALS.len()),
            Err(TokenizerError::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn specials_are_lowest_ids() {
        let v = toy();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
        assert_eq!(v.token(EOS), Some("<eos>"));
    }

    #[test]
    fn encode_decode_cases() {
        let v = toy();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&v.encode("The  cat SAT.")).unwrap(), "the cat sat .");
        assert_eq!(v.encode("zebra"), vec![UNK]);
        assert!(matches!(v.decode(&[999]), Err(TokenizerError::IdOutOfRange { .. })));
    }

    #[test]
    fn eos_never_produced_by_text() {
        let v = toy();
        for text in ["<eos>", "[query] x [ref]", "<pad> <bos>"] {
            assert!(v.encode(text).iter().all(|&id| id == UNK || id >= SPECIALS.len()));
        }
    }

    #[test]
    fn passage_format() {
        let v = Vocabulary::build(&["a b"], 20).unwrap();
        let ids = v.format_passage("a", "b", 64).unwrap();
        assert_eq!(ids, vec![QUERY, v.id("a").unwrap(), REF, v.id("b").unwrap(), EOS]);
        assert_eq!(v.format_context("", 64).unwrap(), vec![CONTEXT, EOS]);
        let long = "a ".repeat(100);
        let ids = v.format_passage("b", &long, 16).unwrap();
        assert_eq!(ids.len(), 16);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids.iter().filter(|&&i| i == REF).count(), 1);
        let ids = v.format_context(&long, 10).unwrap();
        assert_eq!((ids.len(), ids[9]), (10, EOS));
        assert_eq!(v.format_passage("a", "b", 2), Err(TokenizerError::MaxLengthTooSmall(2)));
    }

    #[test]
    fn split_cases() {
        assert_eq!(split_sentences("A. B! C?"), vec!["A.", "B!", "C?"]);
        assert_eq!(split_sentences("e.g. apples."), vec!["e.g. apples."]);
        assert_eq!(split_sentences("Dr. Who came. Then left"), vec!["Dr. Who came.", "Then left"]);
        assert!(split_sentences("  ").is_empty());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = toy();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        fs::write(&path, "a\nb\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(TokenizerError::Format(_))));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(text in "[a-zA-Z.!? ]{0,80}") {
            let parts = split_sentences(&text);
            let joined = parts.join(" ");
            let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(joined, normalized);
        }

        #[test]
        fn passage_format_markers(q in "[a-z ]{0,20}", p in "[a-z .]{0,60}", max_len in 3usize..40) {
            let v = Vocabulary::build(&["a b c d e f g"], 50).unwrap();
            let ids = v.format_passage(&q, &p, max_len).unwrap();
            prop_assert_eq!(ids[0], QUERY);
            prop_assert_eq!(*ids.last().unwrap(), EOS);
            prop_assert_eq!(ids.iter().filter(|&&i| i == REF).count(), 1);
            prop_assert!(ids.len() <= max_len);
        }

        #[test]
        fn round_trip_in_vocab(words in proptest::collection::vec("[a-g]", 0..12)) {
            let v = Vocabulary::build(&["a b c d e f g"], 50).unwrap();
            let text = words.join(" ");
            prop_assert_eq!(v.decode(&v.encode(&text)).unwrap(), normalize(&text));
        }
    }
}
