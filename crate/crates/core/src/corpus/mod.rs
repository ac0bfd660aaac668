//! Parallel corpora, tokenisation, sampling and batch construction.

pub mod bpe;
pub mod synth;

use std::fmt;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
pub use bpe::{learn_bpe, BpeVocab, TokenId, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line count mismatch: {src_path} has {src_lines} lines, {tgt_path} has {tgt_lines}")]
    LineMismatch {
        src_path: String,
        src_lines: usize,
        tgt_path: String,
        tgt_lines: usize,
    },
    #[error("{path}: invalid UTF-8 on line {line}")]
    Utf8 { path: String, line: usize },
    #[error("corpus {0} is empty")]
    Empty(String),
    #[error("oversampling target {target} is below corpus size {size}")]
    OversampleBelowSize { target: usize, size: usize },
    #[error("pair {pair} has {size} examples, fewer than one batch of {batch}")]
    TooSmallForBatch { pair: String, size: usize, batch: usize },
    #[error("invalid split fraction {0}; expected 0 < f < 0.5")]
    BadFraction(f64),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("synthetic spec: {0}")]
    Synthetic(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceClass {
    High,
    Low,
}

impl fmt::Display for ResourceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceClass::High => "high",
            ResourceClass::Low => "low",
        })
    }
}

/// A translation direction, rendered `src-tgt`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub src: String,
    pub tgt: String,
}

impl PairKey {
    pub fn new(src: &str, tgt: &str) -> Self {
        PairKey {
            src: src.to_string(),
            tgt: tgt.to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once("->").or_else(|| s.split_once('-'))?;
        (!a.is_empty() && !b.is_empty()).then(|| PairKey::new(a, b))
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(String, String)>,
    pub resource: ResourceClass,
}

impl ParallelCorpus {
    pub fn key(&self) -> PairKey {
        PairKey::new(&self.src_lang, &self.tgt_lang)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn with_pairs(&self, pairs: Vec<(String, String)>) -> Self {
        ParallelCorpus {
            src_lang: self.src_lang.clone(),
            tgt_lang: self.tgt_lang.clone(),
            pairs,
            resource: self.resource,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub corpus: ParallelCorpus,
    /// Pairs dropped because one side was blank.
    pub dropped_blank: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = std::fs::read(path)?;
    let mut out = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        let s = std::str::from_utf8(line).map_err(|_| CorpusError::Utf8 {
            path: path.display().to_string(),
            line: i + 1,
        })?;
        out.push(s.to_string());
    }
    if bytes.ends_with(b"\n") {
        out.pop();
    }
    Ok(out)
}

/// Pairs line `i` of `src_path` with line `i` of `tgt_path`.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_lang: &str,
    tgt_lang: &str,
    resource: ResourceClass,
) -> Result<LoadReport, CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineMismatch {
            src_path: src_path.display().to_string(),
            src_lines: src.len(),
            tgt_path: tgt_path.display().to_string(),
            tgt_lines: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    let mut dropped = 0;
    for (s, t) in src.into_iter().zip(tgt) {
        let (s, t) = (s.trim(), t.trim());
        if s.is_empty() || t.is_empty() {
            dropped += 1;
        } else {
            pairs.push((s.to_string(), t.to_string()));
        }
    }
    if dropped > 0 {
        log::warn!("{src_lang}-{tgt_lang}: dropped {dropped} pairs with a blank side");
    }
    if pairs.is_empty() {
        return Err(CorpusError::Empty(format!("{src_lang}-{tgt_lang}")));
    }
    Ok(LoadReport {
        corpus: ParallelCorpus {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            pairs,
            resource,
        },
        dropped_blank: dropped,
    })
}

/// Writes `<stem>.<src>` and `<stem>.<tgt>` side files.
pub fn write_parallel(corpus: &ParallelCorpus, dir: &Path, stem: &str) -> Result<(), CorpusError> {
    let mut s = String::new();
    let mut t = String::new();
    for (a, b) in &corpus.pairs {
        s.push_str(a);
        s.push('\n');
        t.push_str(b);
        t.push('\n');
    }
    std::fs::write(dir.join(format!("{stem}.{}", corpus.src_lang)), s)?;
    std::fs::write(dir.join(format!("{stem}.{}", corpus.tgt_lang)), t)?;
    Ok(())
}

/// Drops pairs where either side has more than `limit` subword tokens
/// (BOS/EOS not counted).
pub fn filter_max_len(corpus: &ParallelCorpus, vocab: &BpeVocab, limit: usize) -> ParallelCorpus {
    let pairs = corpus
        .pairs
        .iter()
        .filter(|(s, t)| vocab.encode_plain(s).len() <= limit && vocab.encode_plain(t).len() <= limit)
        .cloned()
        .collect();
    corpus.with_pairs(pairs)
}

/// Whole copies of the corpus plus a seeded sample without replacement for
/// the remainder, reaching exactly `target_n` pairs.
pub fn oversample(corpus: &ParallelCorpus, target_n: usize, seed: u64) -> Result<ParallelCorpus, CorpusError> {
    let n = corpus.len();
    if n == 0 {
        return Err(CorpusError::Empty(corpus.key().to_string()));
    }
    if target_n < n {
        return Err(CorpusError::OversampleBelowSize {
            target: target_n,
            size: n,
        });
    }
    Ok(corpus.with_pairs(oversample_items(&corpus.pairs, target_n, seed)))
}

pub(crate) fn oversample_items<T: Clone>(items: &[T], target_n: usize, seed: u64) -> Vec<T> {
    let n = items.len();
    let mut out = Vec::with_capacity(target_n);
    for _ in 0..target_n / n {
        out.extend_from_slice(items);
    }
    let mut rng = rng_for(seed, "oversample");
    let mut extra: Vec<usize> = index::sample(&mut rng, n, target_n % n).into_vec();
    extra.sort_unstable();
    out.extend(extra.into_iter().map(|i| items[i].clone()));
    out
}

/// Seeded disjoint split; returns `(train, valid)`.
pub fn split_train_valid(
    corpus: &ParallelCorpus,
    valid_fraction: f64,
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus), CorpusError> {
    if !(valid_fraction > 0.0 && valid_fraction < 0.5) {
        return Err(CorpusError::BadFraction(valid_fraction));
    }
    let n = corpus.len();
    let n_valid = ((n as f64 * valid_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &format!("split/{}", corpus.key())));
    let (v, t) = idx.split_at(n_valid);
    let mut v = v.to_vec();
    let mut t = t.to_vec();
    v.sort_unstable();
    t.sort_unstable();
    let pick = |ix: &[usize]| ix.iter().map(|&i| corpus.pairs[i].clone()).collect();
    Ok((corpus.with_pairs(pick(&t)), corpus.with_pairs(pick(&v))))
}

/// One tokenised training example with its routing tag and loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub route: PairKey,
    pub weight: f64,
}

/// Tokenises every pair of `corpus`, tagging each example with the corpus
/// direction and `weight`.
pub fn tokenize(corpus: &ParallelCorpus, vocab: &BpeVocab, weight: f64) -> Vec<Example> {
    let route = corpus.key();
    corpus
        .pairs
        .iter()
        .map(|(s, t)| Example {
            src: vocab.encode(s),
            tgt: vocab.encode(t),
            route: route.clone(),
            weight,
        })
        .collect()
}

/// A labelled per-pair stream of examples for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStream {
    pub pair: PairKey,
    pub examples: Vec<Example>,
}

/// Step `t` holds the `t`-th full batch of every stream, in stream order.
pub type StepGroup = Vec<Vec<Example>>;

/// Shuffles every stream with its own seeded permutation, chunks it into full
/// batches (the trailing partial batch is dropped) and groups the `t`-th
/// batch of every stream into step `t`. The epoch has as many steps as the
/// shortest stream has full batches.
pub fn make_epoch_batches(streams: &[PairStream], batch_size: usize, seed: u64) -> Result<Vec<StepGroup>, CorpusError> {
    for s in streams {
        if s.examples.len() < batch_size {
            return Err(CorpusError::TooSmallForBatch {
                pair: s.pair.to_string(),
                size: s.examples.len(),
                batch: batch_size,
            });
        }
    }
    let shuffled: Vec<Vec<&Example>> = streams
        .iter()
        .map(|s| {
            let mut ex: Vec<&Example> = s.examples.iter().collect();
            ex.shuffle(&mut rng_for(seed, &format!("batches/{}", s.pair)));
            ex
        })
        .collect();
    let steps = shuffled.iter().map(|s| s.len() / batch_size).min().unwrap_or(0);
    Ok((0..steps)
        .map(|t| {
            shuffled
                .iter()
                .map(|s| {
                    s[t * batch_size..(t + 1) * batch_size]
                        .iter()
                        .map(|&e| e.clone())
                        .collect()
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn corpus(n: usize) -> ParallelCorpus {
        ParallelCorpus {
            src_lang: "az".into(),
            tgt_lang: "de".into(),
            pairs: (0..n).map(|i| (format!("s{i}"), format!("t{i}"))).collect(),
            resource: ResourceClass::Low,
        }
    }

    #[test]
    fn load_pairs_lines_and_reports_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
        std::fs::write(&a, "x y\nz\nw\n").unwrap();
        std::fs::write(&b, "1\n2\n3\n").unwrap();
        std::fs::write(&c, "1\n2\n").unwrap();
        let r = load_parallel(&a, &b, "az", "de", ResourceClass::Low).unwrap();
        assert_eq!(r.corpus.len(), 3);
        assert_eq!(r.corpus.pairs[0], ("x y".into(), "1".into()));
        let err = load_parallel(&a, &c, "az", "de", ResourceClass::Low).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 lines") && msg.contains("has 2"), "{msg}");
        std::fs::write(&c, "1\n\n3\n").unwrap();
        let r = load_parallel(&a, &c, "az", "de", ResourceClass::Low).unwrap();
        assert_eq!((r.corpus.len(), r.dropped_blank), (2, 1));
        std::fs::write(&c, b"1\n\xff\n3\n").unwrap();
        assert!(matches!(
            load_parallel(&a, &c, "az", "de", ResourceClass::Low),
            Err(CorpusError::Utf8 { line: 2, .. })
        ));
    }

    #[test]
    fn length_filter_boundaries() {
        let v = learn_bpe(&["a a a"], 1, &[]);
        assert_eq!(v.encode_plain("a a").len(), 2);
        let forty = vec!["a"; 40].join(" ");
        let forty_one = vec!["a"; 41].join(" ");
        let mut c = corpus(0);
        c.pairs = vec![
            ("a a".into(), "a".into()),
            (forty.clone(), forty),
            (forty_one.clone(), "a".into()),
            ("a".into(), forty_one),
        ];
        assert_eq!(filter_max_len(&c, &v, 40).len(), 2);
        assert_eq!(filter_max_len(&c, &v, 41).len(), 4);
        assert!(filter_max_len(&c, &v, 0).is_empty());
    }

    #[test]
    fn oversample_counts() {
        let c = corpus(110);
        assert_eq!(oversample(&c, 110, 1).unwrap(), c);
        let o = oversample(&c, 500, 1).unwrap();
        assert_eq!(o.len(), 500);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (s, _) in &o.pairs {
            *counts.entry(s.as_str()).or_default() += 1;
        }
        assert_eq!(counts.len(), 110);
        assert_eq!(counts.values().filter(|&&n| n == 5).count(), 60);
        assert_eq!(counts.values().filter(|&&n| n == 4).count(), 50);
        assert_eq!(o, oversample(&c, 500, 1).unwrap());
        assert!(oversample(&c, 100, 1).is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let c = corpus(200);
        let (t, v) = split_train_valid(&c, 0.1, 3).unwrap();
        assert_eq!(t.len() + v.len(), 200);
        assert_eq!(v.len(), 20);
        assert!(v.pairs.iter().all(|p| !t.pairs.contains(p)));
        assert_eq!(split_train_valid(&c, 0.1, 3).unwrap(), (t, v));
        assert!(split_train_valid(&c, 0.5, 3).is_err());
    }

    fn stream(src: &str, n: usize) -> PairStream {
        let pair = PairKey::new(src, "de");
        PairStream {
            examples: (0..n)
                .map(|i| Example {
                    src: vec![i as u32],
                    tgt: vec![],
                    route: pair.clone(),
                    weight: 1.0,
                })
                .collect(),
            pair,
        }
    }

    #[test]
    fn epoch_batches() {
        let steps = make_epoch_batches(&[stream("az", 256), stream("tr", 256)], 128, 9).unwrap();
        assert_eq!(steps.len(), 2);
        assert!(steps.iter().all(|g| g.len() == 2 && g.iter().all(|b| b.len() == 128)));
        let steps = make_epoch_batches(&[stream("az", 300)], 128, 9).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(make_epoch_batches(&[stream("az", 300)], 128, 9).unwrap(), steps);
        assert!(make_epoch_batches(&[stream("az", 100)], 128, 9).is_err());
    }

    #[test]
    fn pair_key_text() {
        let k = PairKey::new("az", "de");
        assert_eq!(k.to_string(), "az-de");
        assert_eq!(PairKey::parse("az-de"), Some(k));
        assert_eq!(PairKey::parse("azde"), None);
    }
}
