//! Document samples, sentence-level training tuples and dataset files.

mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synth::{content_words, generate_synthetic, SyntheticSet};

use crate::numerics::RngState;
use crate::retriever::Passage;
use crate::tokenizer::split_sentences;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid document: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A reference passage with the target sentences it supports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    pub text: String,
    /// Zero-based indices into the target's sentences.
    pub supports: Vec<usize>,
}

impl Reference {
    pub fn passage(&self) -> Passage {
        Passage::new(self.id.clone(), self.text.clone())
    }
}

/// A query, its target text and the annotated reference set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSample {
    pub query: String,
    pub target: String,
    pub references: Vec<Reference>,
}

impl DocumentSample {
    pub fn sentences(&self) -> Vec<String> {
        split_sentences(&self.target)
    }

    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(DataError::Invalid("document has no references".into()));
        }
        let n = self.sentences().len();
        let mut ids = BTreeSet::new();
        for r in &self.references {
            if !ids.insert(r.id.as_str()) {
                return Err(DataError::Invalid(format!("duplicate reference id `{}`", r.id)));
            }
            if let Some(&bad) = r.supports.iter().find(|&&s| s >= n) {
                return Err(DataError::Invalid(format!(
                    "reference `{}` supports sentence {bad}, but the target has {n} sentences",
                    r.id
                )));
            }
        }
        Ok(())
    }

    /// Ordinals of references supporting sentence `i`, sorted by id.
    pub fn supporting(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.references.len())
            .filter(|&j| self.references[j].supports.contains(&i))
            .collect();
        v.sort_by(|&a, &b| self.references[a].id.cmp(&self.references[b].id));
        v
    }
}

/// One sentence-level training tuple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub query: String,
    pub positive: Passage,
    pub negative: Passage,
    /// Target sentences before `index`, joined by spaces.
    pub context: String,
    pub sentence: String,
    pub index: usize,
}

/// Where negatives are drawn from.
#[derive(Debug, Clone, Copy)]
pub enum NegativeSource<'a> {
    /// Non-supporting references of the same document.
    Document,
    /// Any corpus passage that does not support the sentence.
    Global(&'a [Passage]),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOutcome {
    pub samples: Vec<TrainingSample>,
    /// Sentences without a supporting reference.
    pub unsupported: usize,
    /// Sentences with no eligible negative.
    pub no_negative: usize,
}

/// One tuple per supported target sentence. The positive is the first
/// supporting reference by id; the negative is drawn uniformly.
pub fn build_training_samples(doc: &DocumentSample, negatives: NegativeSource<'_>, rng: &mut RngState) -> Result<BuildOutcome> {
    doc.validate()?;
    let sentences = doc.sentences();
    let mut out = BuildOutcome::default();
    for (i, sentence) in sentences.iter().enumerate() {
        let support = doc.supporting(i);
        let Some(&pos) = support.first() else {
            out.unsupported += 1;
            continue;
        };
        let negative = match negatives {
            NegativeSource::Document => {
                let pool: Vec<usize> = (0..doc.references.len()).filter(|j| !support.contains(j)).collect();
                if pool.is_empty() {
                    None
                } else {
                    Some(doc.references[*rng.choose(&pool)].passage())
                }
            }
            NegativeSource::Global(corpus) => {
                let banned: BTreeSet<&str> = support.iter().map(|&j| doc.references[j].id.as_str()).collect();
                let pool: Vec<&Passage> = corpus.iter().filter(|p| !banned.contains(p.id.as_str())).collect();
                if pool.is_empty() {
                    None
                } else {
                    Some((*rng.choose(&pool)).clone())
                }
            }
        };
        let Some(negative) = negative else {
            out.no_negative += 1;
            continue;
        };
        out.samples.push(TrainingSample {
            query: doc.query.clone(),
            positive: doc.references[pos].passage(),
            negative,
            context: sentences[..i].join(" "),
            sentence: sentence.clone(),
            index: i,
        });
    }
    Ok(out)
}

/// Builds tuples for every document with one rng stream.
pub fn build_all(docs: &[DocumentSample], negatives: NegativeSource<'_>, rng: &mut RngState) -> Result<BuildOutcome> {
    let mut all = BuildOutcome::default();
    for doc in docs {
        let o = build_training_samples(doc, negatives, rng)?;
        all.samples.extend(o.samples);
        all.unsupported += o.unsupported;
        all.no_negative += o.no_negative;
    }
    Ok(all)
}

/// Reads newline-delimited document records; blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<DocumentSample>> {
    let display = path.display().to_string();
    let io = |source| DataError::Io {
        path: display.clone(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| DataError::Record {
            path: display.clone(),
            line: i + 1,
            message,
        };
        let doc: DocumentSample = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        doc.validate().map_err(|e| record(e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_dataset(docs: &[DocumentSample], path: &Path) -> Result<()> {
    let mut text = String::new();
    for d in docs {
        text.push_str(&serde_json::to_string(d).expect("document serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(id: &str, supports: &[usize]) -> Reference {
        Reference {
            id: id.into(),
            text: format!("text of {id}"),
            supports: supports.to_vec(),
        }
    }

    fn doc() -> DocumentSample {
        DocumentSample {
            query: "q".into(),
            target: "one a . two b . three c .".into(),
            references: vec![
                reference("r0", &[0]),
                reference("r1", &[1]),
                reference("r2", &[2]),
                reference("r3", &[]),
            ],
        }
    }

    #[test]
    fn one_sample_per_supported_sentence() {
        let out = build_training_samples(&doc(), NegativeSource::Document, &mut RngState::new(1)).unwrap();
        assert_eq!(out.samples.len(), 3);
        for (i, s) in out.samples.iter().enumerate() {
            assert_eq!(s.index, i);
            assert_eq!(split_sentences(&s.context).len(), i);
            assert_eq!(s.positive.id, format!("r{i}"));
            assert_ne!(s.positive, s.negative);
        }
        assert_eq!(out.samples[2].context, "one a . two b .");
    }

    #[test]
    fn unsupported_sentences_are_skipped() {
        let mut d = doc();
        d.references[1].supports.clear();
        let out = build_training_samples(&d, NegativeSource::Document, &mut RngState::new(1)).unwrap();
        assert_eq!(out.samples.len(), 2);
        assert_eq!(out.unsupported, 1);
        assert_eq!(out.samples[1].context, "one a . two b .");
    }

    #[test]
    fn first_supporting_by_id() {
        let mut d = doc();
        d.references[3].supports = vec![0];
        d.references.swap(0, 3);
        d.references[0].id = "r9".into();
        let out = build_training_samples(&d, NegativeSource::Document, &mut RngState::new(1)).unwrap();
        assert_eq!(out.samples[0].positive.id, "r0");
    }

    #[test]
    fn negatives_are_seeded() {
        let pick = |seed| {
            build_training_samples(&doc(), NegativeSource::Document, &mut RngState::new(seed))
                .unwrap()
                .samples
                .into_iter()
                .map(|s| s.negative.id)
                .collect::<Vec<_>>()
        };
        assert_eq!(pick(5), pick(5));
    }

    #[test]
    fn global_negatives_exclude_supporters() {
        let corpus: Vec<Passage> = (0..4).map(|i| Passage::new(format!("r{i}"), "x")).collect();
        let out = build_training_samples(&doc(), NegativeSource::Global(&corpus), &mut RngState::new(2)).unwrap();
        for s in out.samples {
            assert_ne!(s.negative.id, s.positive.id);
        }
    }

    #[test]
    fn invalid_support_index() {
        let mut d = doc();
        d.references[0].supports = vec![7];
        assert!(d.validate().is_err());
    }

    #[test]
    fn file_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&[doc(), doc()], &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), vec![doc(), doc()]);

        let good = serde_json::to_string(&doc()).unwrap();
        let mut lines = vec![good; 6];
        lines.push(r#"{"target":"a .","references":[]}"#.into());
        fs::write(&path, lines.join("\n")).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains(":7:") && err.contains("query"), "{err}");

        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }
}
