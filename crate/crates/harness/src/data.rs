//! Sentence-pair files and the synthetic lexical-overlap corpus.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use s2sent_core::numerics::rng;
use s2sent_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePairRecord {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold_score: f64,
}

/// Parsed pair file plus non-fatal notes (e.g. an empty file).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub records: Vec<SentencePairRecord>,
    pub warnings: Vec<String>,
}

/// Reads `sentence_a<TAB>sentence_b<TAB>score` lines, skipping blank ones.
pub fn load_pairs_tsv(path: &Path) -> Result<PairSet> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    parse_pairs_tsv(&text, &path.display().to_string())
}

pub fn parse_pairs_tsv(text: &str, source: &str) -> Result<PairSet> {
    let mut set = PairSet::default();
    for (k, line) in text.lines().enumerate() {
        let n = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Contract(format!(
                "{source}:{n}: expected 3 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let (a, b) = (cols[0].trim(), cols[1].trim());
        if a.is_empty() || b.is_empty() {
            return Err(Error::Contract(format!("{source}:{n}: empty sentence")));
        }
        let gold_score: f64 = cols[2].trim().parse().map_err(|_| {
            Error::Contract(format!("{source}:{n}: score {:?} is not a number", cols[2].trim()))
        })?;
        if !gold_score.is_finite() {
            return Err(Error::Contract(format!("{source}:{n}: score is not finite")));
        }
        set.records.push(SentencePairRecord {
            sentence_a: a.to_string(),
            sentence_b: b.to_string(),
            gold_score,
        });
    }
    if set.records.is_empty() {
        set.warnings.push(format!("{source}: no sentence pairs"));
    }
    Ok(set)
}

pub fn write_pairs_tsv(path: &Path, pairs: &[SentencePairRecord]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\n", p.sentence_a, p.sentence_b, p.gold_score));
    }
    fs::write(path, out)?;
    Ok(())
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tas", "vu", "pel", "dor", "si", "bam", "ne", "gu", "fa", "tor",
    "li", "mur", "zo", "he", "quin", "bra",
];

/// Function words sprinkled between content words; they carry no score.
pub const STOPWORDS: &[&str] = &["the", "a", "of", "and", "is", "on", "with", "in", "to", "by"];

const CORPUS_STREAM: u64 = 0xc0;
const SENTENCE_STREAM: u64 = 0x5e;

fn content_word(i: usize) -> String {
    let n = SYLLABLES.len();
    format!("{}{}", SYLLABLES[i / n % n], SYLLABLES[i % n])
}

fn vocabulary_size() -> usize {
    SYLLABLES.len() * SYLLABLES.len()
}

fn render<R: Rng>(content: &[String], rng: &mut R) -> String {
    let mut words: Vec<String> = Vec::with_capacity(content.len() * 2);
    for w in content {
        if rng.gen_bool(0.4) {
            words.push(STOPWORDS[rng.gen_range(0..STOPWORDS.len())].to_string());
        }
        words.push(w.clone());
    }
    words.join(" ")
}

fn draw_content<R: Rng>(k: usize, exclude: &BTreeSet<usize>, rng: &mut R) -> Vec<usize> {
    let mut picked = BTreeSet::new();
    let mut order = Vec::with_capacity(k);
    while order.len() < k {
        let w = rng.gen_range(0..vocabulary_size());
        if !exclude.contains(&w) && picked.insert(w) {
            order.push(w);
        }
    }
    order
}

fn content_set(sentence: &str) -> BTreeSet<&str> {
    sentence
        .split_whitespace()
        .filter(|w| !STOPWORDS.contains(w))
        .collect()
}

/// `5 · |A ∩ B| / |A ∪ B|` over the non-stopword tokens of the two sentences.
pub fn overlap_score(a: &str, b: &str) -> f64 {
    let (sa, sb) = (content_set(a), content_set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    5.0 * sa.intersection(&sb).count() as f64 / union as f64
}

/// Pairs with a uniformly drawn number of shared content words, scored by overlap.
pub fn synth_corpus(n_pairs: usize, seed: u64) -> Result<Vec<SentencePairRecord>> {
    if n_pairs == 0 {
        return Err(Error::Contract("synth_corpus needs at least one pair".into()));
    }
    let mut r = rng::stream(seed, &[CORPUS_STREAM]);
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let k = r.gen_range(4..=8);
        let a = draw_content(k, &BTreeSet::new(), &mut r);
        let shared = r.gen_range(0..=k);
        let mut b: Vec<usize> = a.choose_multiple(&mut r, shared).copied().collect();
        let kb = r.gen_range(shared.max(1)..=8);
        let exclude: BTreeSet<usize> = a.iter().copied().collect();
        b.extend(draw_content(kb - b.len(), &exclude, &mut r));
        b.shuffle(&mut r);
        let words = |ids: &[usize]| ids.iter().map(|&i| content_word(i)).collect::<Vec<_>>();
        let sentence_a = render(&words(&a), &mut r);
        let sentence_b = render(&words(&b), &mut r);
        let gold_score = overlap_score(&sentence_a, &sentence_b);
        out.push(SentencePairRecord {
            sentence_a,
            sentence_b,
            gold_score,
        });
    }
    Ok(out)
}

/// Unlabelled training sentences from the same generator.
pub fn synth_sentences(n: usize, seed: u64) -> Vec<String> {
    let mut r = rng::stream(seed, &[SENTENCE_STREAM]);
    (0..n)
        .map(|_| {
            let k = r.gen_range(4..=8);
            let ids = draw_content(k, &BTreeSet::new(), &mut r);
            let words: Vec<String> = ids.iter().map(|&i| content_word(i)).collect();
            render(&words, &mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows_parse_in_order() {
        let set = parse_pairs_tsv("a b\tc d\t4.2\n\nx\ty\t0\n", "t").unwrap();
        assert_eq!(set.records.len(), 2);
        assert_eq!(set.records[0].gold_score, 4.2);
        assert_eq!(set.records[1].sentence_a, "x");
        assert!(set.warnings.is_empty());
    }

    #[test]
    fn empty_file_warns() {
        let set = parse_pairs_tsv("", "t").unwrap();
        assert!(set.records.is_empty());
        assert_eq!(set.warnings.len(), 1);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let err = parse_pairs_tsv("a\tb\t1\na\tb\n", "f.tsv").unwrap_err().to_string();
        assert!(err.contains("f.tsv:2"), "{err}");
        let err = parse_pairs_tsv("a\tb\tfive\n", "f.tsv").unwrap_err().to_string();
        assert!(err.contains("f.tsv:1") && err.contains("five"), "{err}");
        assert!(parse_pairs_tsv(" \tb\t1\n", "f").is_err());
        assert!(parse_pairs_tsv("a\tb\tNaN\n", "f").is_err());
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(load_pairs_tsv(Path::new("/nonexistent/pairs.tsv")).is_err());
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let pairs = synth_corpus(20, 3).unwrap();
        write_pairs_tsv(&path, &pairs).unwrap();
        assert_eq!(load_pairs_tsv(&path).unwrap().records, pairs);
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_score("the kalo mi", "kalo a mi"), 5.0);
        assert_eq!(overlap_score("kalo", "mimi"), 0.0);
        assert_eq!(overlap_score("kalo mimi", "kalo tas"), 5.0 / 3.0);
        assert_eq!(overlap_score("the", "a"), 0.0);
    }

    #[test]
    fn corpus_scores_follow_overlap() {
        let pairs = synth_corpus(300, 1).unwrap();
        let mut groups = [0usize; 5];
        for p in &pairs {
            assert_eq!(p.gold_score, overlap_score(&p.sentence_a, &p.sentence_b));
            assert!((0.0..=5.0).contains(&p.gold_score));
            groups[(p.gold_score as usize).min(4)] += 1;
        }
        // The corpus spans every gold group.
        assert!(groups.iter().all(|&g| g > 10), "{groups:?}");
        assert!(pairs.iter().any(|p| p.gold_score == 5.0));
        assert!(pairs.iter().any(|p| p.gold_score == 0.0));
        assert!(synth_corpus(0, 1).is_err());
    }

    #[test]
    fn corpus_is_seeded() {
        assert_eq!(synth_corpus(50, 9).unwrap(), synth_corpus(50, 9).unwrap());
        assert_ne!(synth_corpus(50, 9).unwrap(), synth_corpus(50, 10).unwrap());
        assert_eq!(synth_sentences(10, 2), synth_sentences(10, 2));
    }
}
