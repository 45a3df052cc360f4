//! Templated entity-attribute worlds for desk-scale runs.
//!
//! Each world is one invented place with a kind, a region and a handful of
//! attributes. A document's target opens with an introduction sentence and
//! then states each attribute as "the {kind} ...", so later sentences lean on
//! earlier ones for the kind. Every sentence paraphrases exactly one passage.

use std::collections::BTreeSet;

use super::{DocumentSample, Reference};
use crate::numerics::RngState;
use crate::retriever::Passage;
use crate::tokenizer::normalize_words;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "ri", "ven", "mar", "to", "sel", "dun", "bra", "fe", "li", "nor", "qua", "zi", "tham", "ol",
];
const KINDS: [&str; 5] = ["town", "city", "village", "port", "island"];
const REGIONS: [&str; 8] = ["north", "south", "east", "west", "highlands", "lowlands", "coast", "valley"];
const ADJECTIVES: [&str; 6] = ["small", "quiet", "busy", "old", "remote", "lively"];
const POPULATIONS: [&str; 8] = ["1200", "3400", "5600", "8100", "12000", "25000", "47000", "90000"];
const YEARS: [&str; 8] = ["1620", "1704", "1788", "1815", "1862", "1901", "1923", "1950"];
const INDUSTRIES: [&str; 8] = [
    "fishing", "mining", "textiles", "tourism", "farming", "shipbuilding", "pottery", "brewing",
];
const CLIMATES: [&str; 6] = ["mild", "humid", "dry", "cold", "windy", "rainy"];
const LANDMARKS: [&str; 6] = [
    "grey castle",
    "stone bridge",
    "red tower",
    "old abbey",
    "white lighthouse",
    "great market",
];
const STOPWORDS: [&str; 20] = [
    "the", "a", "an", "is", "in", "of", "to", "it", "its", "for", "on", "with", "has", "was", "and", "when", ".",
    ",", "this", "that",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Attribute {
    Population,
    Founded,
    River,
    Industry,
    Climate,
    Landmark,
    Twin,
}

const ATTRIBUTES: [Attribute; 7] = [
    Attribute::Population,
    Attribute::Founded,
    Attribute::River,
    Attribute::Industry,
    Attribute::Climate,
    Attribute::Landmark,
    Attribute::Twin,
];

impl Attribute {
    fn key(self) -> &'static str {
        match self {
            Attribute::Population => "population",
            Attribute::Founded => "founded",
            Attribute::River => "river",
            Attribute::Industry => "industry",
            Attribute::Climate => "climate",
            Attribute::Landmark => "landmark",
            Attribute::Twin => "twin",
        }
    }

    fn sentence(self, kind: &str, v: &str) -> String {
        match self {
            Attribute::Population => format!("the {kind} has {v} inhabitants ."),
            Attribute::Founded => format!("the {kind} was founded in {v} ."),
            Attribute::River => format!("the {kind} lies on the {v} river ."),
            Attribute::Industry => format!("the {kind} is known for its {v} industry ."),
            Attribute::Climate => format!("the {kind} enjoys a {v} climate ."),
            Attribute::Landmark => format!("the {kind} is famous for the {v} ."),
            Attribute::Twin => format!("the {kind} is twinned with {v} ."),
        }
    }

    fn passage(self, entity: &str, v: &str) -> String {
        match self {
            Attribute::Population => format!("{entity} counts {v} inhabitants in the latest census ."),
            Attribute::Founded => format!("{entity} dates back to {v} when settlers founded it ."),
            Attribute::River => format!("the {v} river flows through {entity} ."),
            Attribute::Industry => format!("{v} is the main industry of {entity} ."),
            Attribute::Climate => format!("{entity} has a {v} climate throughout the year ."),
            Attribute::Landmark => format!("visitors to {entity} often admire the {v} ."),
            Attribute::Twin => format!("{entity} is twinned with {v} abroad ."),
        }
    }
}

struct World {
    entity: String,
    /// Passages in target-sentence order.
    passages: Vec<Passage>,
    sentences: Vec<String>,
}

/// A generated corpus and the documents built over it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub corpus: Vec<Passage>,
    pub documents: Vec<DocumentSample>,
}

/// Lowercased non-stopword tokens.
pub fn content_words(text: &str) -> BTreeSet<String> {
    normalize_words(text)
        .into_iter()
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

fn fresh_name(rng: &mut RngState, used: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.between(2, 3);
        let name: String = (0..n).map(|_| *rng.choose(&SYLLABLES)).collect();
        if used.insert(name.clone()) {
            return name;
        }
    }
}

fn make_world(
    rng: &mut RngState,
    used: &mut BTreeSet<String>,
    rivers: &[String],
    twins: &[String],
) -> World {
    let entity = fresh_name(rng, used);
    let kind = *rng.choose(&KINDS);
    let region = *rng.choose(&REGIONS);
    let adj = *rng.choose(&ADJECTIVES);
    let mut passages = vec![Passage::new(
        format!("{entity}-intro"),
        format!("{entity} is a {adj} {kind} located in the {region} of the country ."),
    )];
    let mut sentences = vec![format!("{entity} is a {kind} in the {region} .")];

    let mut attrs = ATTRIBUTES.to_vec();
    rng.shuffle(&mut attrs);
    attrs.truncate(rng.between(2, 5));
    attrs.sort();
    for a in attrs {
        let value = match a {
            Attribute::Population => rng.choose(&POPULATIONS).to_string(),
            Attribute::Founded => rng.choose(&YEARS).to_string(),
            Attribute::River => rng.choose(rivers).clone(),
            Attribute::Industry => rng.choose(&INDUSTRIES).to_string(),
            Attribute::Climate => rng.choose(&CLIMATES).to_string(),
            Attribute::Landmark => rng.choose(&LANDMARKS).to_string(),
            Attribute::Twin => rng.choose(twins).clone(),
        };
        passages.push(Passage::new(format!("{entity}-{}", a.key()), a.passage(&entity, &value)));
        sentences.push(a.sentence(kind, &value));
    }
    World {
        entity,
        passages,
        sentences,
    }
}

fn attribute_key(id: &str) -> &str {
    id.rsplit_once('-').map_or(id, |(_, k)| k)
}

fn overlap(a: &BTreeSet<String>, b: &BTreeSet<String>) -> usize {
    a.intersection(b).count()
}

/// Generates `n_docs` documents plus background worlds that only supply
/// distractors. Every sentence has exactly one supporting passage, and no
/// distractor shares as many content words with a sentence as its own passage.
pub fn generate_synthetic(n_docs: usize, rng: &mut RngState) -> SyntheticSet {
    let mut used = BTreeSet::new();
    let rivers: Vec<String> = (0..8).map(|_| fresh_name(rng, &mut used)).collect();
    let twins: Vec<String> = (0..8).map(|_| fresh_name(rng, &mut used)).collect();
    let n_worlds = n_docs + 6;
    let worlds: Vec<World> = (0..n_worlds)
        .map(|_| make_world(rng, &mut used, &rivers, &twins))
        .collect();
    let corpus: Vec<Passage> = worlds.iter().flat_map(|w| w.passages.iter().cloned()).collect();

    let mut documents = Vec::with_capacity(n_docs);
    for (wi, world) in worlds.iter().take(n_docs).enumerate() {
        let sentence_words: Vec<BTreeSet<String>> = world.sentences.iter().map(|s| content_words(s)).collect();
        let own_overlap: Vec<usize> = sentence_words
            .iter()
            .zip(&world.passages)
            .map(|(s, p)| overlap(s, &content_words(&p.text)))
            .collect();
        let mut candidates: Vec<&Passage> = worlds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != wi)
            .flat_map(|(_, w)| w.passages.iter())
            .filter(|p| {
                let words = content_words(&p.text);
                !words.contains(&world.entity)
                    && sentence_words
                        .iter()
                        .zip(&own_overlap)
                        .all(|(s, &own)| overlap(s, &words) < own)
            })
            .collect();
        // Same-attribute passages about other entities come first: they are
        // the ones a selector can confuse with the document's own.
        let keys: BTreeSet<&str> = world.passages.iter().map(|p| attribute_key(&p.id)).collect();
        rng.shuffle(&mut candidates);
        candidates.sort_by_key(|p| !keys.contains(attribute_key(&p.id)));
        let n_distractors = rng.between(2, 10).min(candidates.len());

        let mut references: Vec<Reference> = world
            .passages
            .iter()
            .enumerate()
            .map(|(i, p)| Reference {
                id: p.id.clone(),
                text: p.text.clone(),
                supports: vec![i],
            })
            .collect();
        references.extend(candidates[..n_distractors].iter().map(|p| Reference {
            id: p.id.clone(),
            text: p.text.clone(),
            supports: Vec::new(),
        }));
        rng.shuffle(&mut references);
        documents.push(DocumentSample {
            query: world.entity.clone(),
            target: world.sentences.join(" "),
            references,
        });
    }
    SyntheticSet { corpus, documents }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_determinism() {
        let a = generate_synthetic(12, &mut RngState::new(4));
        let b = generate_synthetic(12, &mut RngState::new(4));
        assert_eq!(a, b);
        let c = generate_synthetic(12, &mut RngState::new(5));
        assert_ne!(a, c);
    }

    #[test]
    fn structure() {
        let set = generate_synthetic(30, &mut RngState::new(1));
        assert_eq!(set.documents.len(), 30);
        let ids: BTreeSet<&str> = set.corpus.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids.len(), set.corpus.len());
        for doc in &set.documents {
            doc.validate().unwrap();
            let n = doc.sentences().len();
            assert!((3..=6).contains(&n), "{n} sentences");
            for i in 0..n {
                assert_eq!(doc.supporting(i).len(), 1);
            }
            let distractors: Vec<&Reference> = doc.references.iter().filter(|r| r.supports.is_empty()).collect();
            assert!((2..=10).contains(&distractors.len()));
            for d in distractors {
                assert!(!content_words(&d.text).contains(&doc.query));
                assert!(ids.contains(d.id.as_str()));
            }
        }
    }

    #[test]
    fn word_overlap_oracle_finds_the_support() {
        let set = generate_synthetic(40, &mut RngState::new(2));
        for doc in &set.documents {
            for (i, s) in doc.sentences().iter().enumerate() {
                let words = content_words(s);
                let scores: Vec<usize> = doc
                    .references
                    .iter()
                    .map(|r| overlap(&words, &content_words(&r.text)))
                    .collect();
                let best = *scores.iter().max().unwrap();
                let winners: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] == best).collect();
                assert_eq!(winners, doc.supporting(i), "{s}");
            }
        }
    }
}
