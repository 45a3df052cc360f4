//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use dkgen::numerics::RngState;
use dkgen::retriever::Passage;
use dkgen::tokenizer::normalize_words;

/// Scores every passage by scanning the raw corpus: document frequency,
/// lengths and term counts are recomputed per query with no index.
pub fn brute_force_bm25(corpus: &[Passage], query: &str, k: usize) -> Vec<(String, f64)> {
    const K1: f64 = 1.2;
    const B: f64 = 0.75;
    let docs: Vec<Vec<String>> = corpus.iter().map(|p| normalize_words(&p.text)).collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut terms = normalize_words(query);
    terms.sort();
    terms.dedup();
    let mut scored: Vec<(String, f64)> = corpus
        .iter()
        .zip(&docs)
        .map(|(p, words)| {
            let mut s = 0.0;
            for t in &terms {
                let tf = words.iter().filter(|w| *w == t).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                s += idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * words.len() as f64 / avg));
            }
            (p.id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Passages of Zipf-ish random words over a `vocab`-word lexicon.
pub fn random_corpus(rng: &mut RngState, n: usize, vocab: usize) -> Vec<Passage> {
    (0..n)
        .map(|i| {
            let len = rng.between(3, 30);
            let words: Vec<String> = (0..len).map(|_| lexicon_word(rng, vocab)).collect();
            Passage::new(format!("doc{i:05}"), words.join(" "))
        })
        .collect()
}

pub fn lexicon_word(rng: &mut RngState, vocab: usize) -> String {
    // Squaring a uniform draw favors low ranks.
    let u = rng.uniform();
    format!("w{}", ((u * u) * vocab as f64) as usize)
}

pub fn random_query(rng: &mut RngState, vocab: usize) -> String {
    let len = rng.between(1, 4);
    (0..len).map(|_| lexicon_word(rng, vocab)).collect::<Vec<_>>().join(" ")
}

/// LCS length by enumerating every subsequence of the shorter sequence.
pub fn brute_force_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let ones = mask.count_ones() as usize;
        if ones <= best {
            continue;
        }
        let sub: Vec<u8> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
        let mut it = long.iter();
        if sub.iter().all(|c| it.any(|x| x == c)) {
            best = ones;
        }
    }
    best
}

/// Every sequence over `{0, 1, 2}` with length at most `max_len`.
pub fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}
