//! BM25 first-stage retrieval over an inverted index.
//!
//! ```text
//! score(D, Q) = Σ_t idf(t) · tf(t, D) · (k1 + 1) / (tf(t, D) + k1 · (1 − b + b · |D| / avgdl))
//! idf(t)      = ln((N − df(t) + 0.5) / (df(t) + 0.5) + 1)
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::normalize_words;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

const MAGIC: &[u8; 4] = b"DKIX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate passage id `{0}`")]
    DuplicateId(String),
    #[error("passage `{0}` has empty text")]
    EmptyPassage(String),
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("index file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A retrievable unit of external knowledge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_title: Option<String>,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source_title: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub ordinal: usize,
    pub passage: Passage,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    passages: Vec<Passage>,
    postings: BTreeMap<String, Vec<Posting>>,
    lengths: Vec<u32>,
    avg_len: f64,
}

impl InvertedIndex {
    pub fn build(corpus: &[Passage]) -> Result<Self, RetrieverError> {
        if corpus.is_empty() {
            return Err(RetrieverError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut lengths = Vec::with_capacity(corpus.len());
        for (ordinal, p) in corpus.iter().enumerate() {
            if !seen.insert(p.id.as_str()) {
                return Err(RetrieverError::DuplicateId(p.id.clone()));
            }
            if p.text.trim().is_empty() {
                return Err(RetrieverError::EmptyPassage(p.id.clone()));
            }
            let words = normalize_words(&p.text);
            lengths.push(words.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for w in words {
                *tf.entry(w).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    ordinal: ordinal as u32,
                    tf: count,
                });
            }
        }
        let avg_len = lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64;
        Ok(Self {
            passages: corpus.to_vec(),
            postings,
            lengths,
            avg_len,
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.passages.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top `k` passages by BM25, ties broken by ascending passage id.
    /// Passages with zero score are still ranked, so `k ≥ N` returns everything.
    pub fn search(&self, query: &str, k: usize) -> Vec<SearchHit> {
        let mut terms = normalize_words(query);
        terms.sort();
        terms.dedup();
        if terms.is_empty() {
            return Vec::new();
        }
        let mut scores = vec![0.0; self.passages.len()];
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for post in list {
                let tf = post.tf as f64;
                let len = self.lengths[post.ordinal as usize] as f64;
                let norm = K1 * (1.0 - B + B * len / self.avg_len);
                scores[post.ordinal as usize] += idf * tf * (K1 + 1.0) / (tf + norm);
            }
        }
        let mut order: Vec<usize> = (0..self.passages.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.passages[a].id.cmp(&self.passages[b].id))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| SearchHit {
                ordinal: i,
                passage: self.passages[i].clone(),
                score: scores[i],
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        // passages
        put_u32(&mut out, self.passages.len() as u32);
        for p in &self.passages {
            put_str(&mut out, &p.id);
            put_str(&mut out, &p.text);
            match &p.source_title {
                Some(t) => {
                    out.push(1);
                    put_str(&mut out, t);
                }
                None => out.push(0),
            }
        }
        // vocabulary
        put_u32(&mut out, self.postings.len() as u32);
        for term in self.postings.keys() {
            put_str(&mut out, term);
        }
        // postings, in vocabulary order
        for list in self.postings.values() {
            put_u32(&mut out, list.len() as u32);
            for post in list {
                put_u32(&mut out, post.ordinal);
                put_u32(&mut out, post.tf);
            }
        }
        // lengths
        put_u32(&mut out, self.lengths.len() as u32);
        for &l in &self.lengths {
            put_u32(&mut out, l);
        }
        out.extend_from_slice(&self.avg_len.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrieverError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(RetrieverError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(RetrieverError::Format(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut passages = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.string()?;
            let text = r.string()?;
            let source_title = match r.take(1)?[0] {
                0 => None,
                1 => Some(r.string()?),
                f => return Err(RetrieverError::Format(format!("bad title flag {f}"))),
            };
            passages.push(Passage { id, text, source_title });
        }
        let n_terms = r.u32()? as usize;
        let mut terms = Vec::with_capacity(n_terms);
        for _ in 0..n_terms {
            terms.push(r.string()?);
        }
        let mut postings = BTreeMap::new();
        for term in terms {
            let len = r.u32()? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let ordinal = r.u32()?;
                let tf = r.u32()?;
                if ordinal as usize >= n {
                    return Err(RetrieverError::Format(format!("posting ordinal {ordinal} out of range")));
                }
                list.push(Posting { ordinal, tf });
            }
            postings.insert(term, list);
        }
        let n_len = r.u32()? as usize;
        if n_len != n {
            return Err(RetrieverError::Format(format!("{n_len} lengths for {n} passages")));
        }
        let mut lengths = Vec::with_capacity(n);
        for _ in 0..n {
            lengths.push(r.u32()?);
        }
        let avg_len = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(RetrieverError::Format("trailing bytes".into()));
        }
        Ok(Self {
            passages,
            postings,
            lengths,
            avg_len,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrieverError> {
        fs::write(path, self.to_bytes()).map_err(|source| RetrieverError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrieverError> {
        let bytes = fs::read(path).map_err(|source| RetrieverError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrieverError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(RetrieverError::Format("truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrieverError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, RetrieverError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| RetrieverError::Format(e.to_string()))
    }
}

/// Reads a newline-delimited corpus of `{id, text, source_title?}` records.
pub fn load_corpus(path: &Path) -> Result<Vec<Passage>, RetrieverError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| RetrieverError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| RetrieverError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| RetrieverError::Record {
            path: display.clone(),
            line: i + 1,
            message,
        };
        let p: Passage = serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        if p.text.trim().is_empty() {
            return Err(record_err(format!("passage `{}` has empty text", p.id)));
        }
        if let Some(prev) = ids.insert(p.id.clone(), i + 1) {
            return Err(record_err(format!("duplicate passage id `{}` (first at line {prev})", p.id)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_corpus(passages: &[Passage], path: &Path) -> Result<(), RetrieverError> {
    let mut text = String::new();
    for p in passages {
        text.push_str(&serde_json::to_string(p).expect("passage serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| RetrieverError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(texts: &[&str]) -> Vec<Passage> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Passage::new(format!("p{i}"), *t))
            .collect()
    }

    #[test]
    fn postings_count_term_frequency() {
        let idx = InvertedIndex::build(&corpus(&["a b a"])).unwrap();
        assert_eq!(idx.postings("a").unwrap(), &[Posting { ordinal: 0, tf: 2 }]);
        assert_eq!(idx.postings("b").unwrap(), &[Posting { ordinal: 0, tf: 1 }]);
    }

    #[test]
    fn average_length() {
        let idx = InvertedIndex::build(&corpus(&["a b", "c d e f"])).unwrap();
        assert_eq!(idx.avg_len(), 3.0);
    }

    #[test]
    fn serialization_is_deterministic_and_round_trips() {
        let c = corpus(&["the red fox", "a lazy dog", "the dog sleeps"]);
        let a = InvertedIndex::build(&c).unwrap().to_bytes();
        let b = InvertedIndex::build(&c).unwrap().to_bytes();
        assert_eq!(a, b);
        let back = InvertedIndex::from_bytes(&a).unwrap();
        assert_eq!(back, InvertedIndex::build(&c).unwrap());
        assert!(InvertedIndex::from_bytes(&a[..a.len() - 3]).is_err());
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(InvertedIndex::from_bytes(&bad), Err(RetrieverError::Format(_))));
    }

    #[test]
    fn duplicate_id_is_named() {
        let mut c = corpus(&["a", "b"]);
        c[1].id = "p0".into();
        let err = InvertedIndex::build(&c).unwrap_err();
        assert!(err.to_string().contains("p0"));
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let idx = InvertedIndex::build(&corpus(&["a b", "b c", "c d"])).unwrap();
        let with = idx.search("b zzz", 3);
        let without = idx.search("b", 3);
        assert_eq!(with, without);
    }

    #[test]
    fn k_is_clamped_and_empty_query_returns_nothing() {
        let idx = InvertedIndex::build(&corpus(&["a b", "b c", "c d"])).unwrap();
        assert_eq!(idx.search("b", 50).len(), 3);
        assert!(idx.search("  ... ", 5).iter().all(|h| h.score >= 0.0));
        assert!(idx.search("", 5).is_empty());
    }

    #[test]
    fn ties_break_by_passage_id() {
        let c = vec![Passage::new("z", "apple"), Passage::new("m", "apple"), Passage::new("a", "pear")];
        let idx = InvertedIndex::build(&c).unwrap();
        let ids: Vec<_> = idx.search("apple", 3).into_iter().map(|h| h.passage.id).collect();
        assert_eq!(ids, vec!["m", "z", "a"]);
    }

    #[test]
    fn corpus_file_errors_cite_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"text\":\"x\"}\n\n{\"id\":\"b\"}\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        let c = corpus(&["one", "two"]);
        write_corpus(&c, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), c);
    }
}
