//! Corpus BLEU, model evaluation and bilingual-versus-multilingual reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use thiserror::Error;

use crate::corpus::{BpeVocab, PairKey, ResourceClass};
use crate::hier_model::NmtModel;
use crate::transformer::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    Empty,
    #[error("{candidates} candidates but {references} references")]
    CountMismatch { candidates: usize, references: usize },
    #[error("direction sets differ: {0}")]
    KeyMismatch(String),
    #[error("bad score table: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    /// Clipped n-gram precisions for n = 1..4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    /// In `[0, 100]`.
    pub score: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with one reference per candidate and no smoothing.
///
/// Orders for which the candidates contain no n-grams at all (every
/// candidate shorter than `n`) are left out of the geometric mean.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuScore, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for n in 1..=4 {
            let rc = ngram_counts(refr, n);
            for (g, k) in ngram_counts(cand, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let orders: Vec<f64> = (0..4).filter(|&n| total[n] > 0).map(|n| precisions[n]).collect();
    let score = if !orders.is_empty() && orders.iter().all(|&p| p > 0.0) {
        let log_mean = orders.iter().map(|p| p.ln()).sum::<f64>() / orders.len() as f64;
        (100.0 * brevity_penalty * log_mean.exp()).clamp(0.0, 100.0)
    } else {
        0.0
    };
    Ok(BleuScore {
        precisions,
        brevity_penalty,
        score,
        hyp_len: c,
        ref_len: r,
    })
}

pub fn whitespace_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Greedy output length limit: source length plus ten, at most fifty.
pub fn max_output_len(src_tokens: usize) -> usize {
    (src_tokens + 10).min(50)
}

/// Greedy-decodes `pairs` in batches and returns the detokenised outputs.
pub fn translate_sentences(
    model: &dyn NmtModel,
    vocab: &BpeVocab,
    dir: &PairKey,
    sources: &[&str],
    batch_size: usize,
) -> Result<Vec<String>, EvalError> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch_size.max(1)) {
        let ids: Vec<_> = chunk.iter().map(|s| vocab.encode(s)).collect();
        let limits: Vec<usize> = ids.iter().map(|s| max_output_len(s.len().saturating_sub(2))).collect();
        let max_len = limits.iter().copied().max().unwrap_or(1);
        let hyps = model.translate(&dir.src, &dir.tgt, &ids, max_len)?;
        for (mut h, lim) in hyps.into_iter().zip(limits) {
            h.truncate(lim);
            out.push(vocab.decode(&h));
        }
    }
    Ok(out)
}

/// BLEU of `model` on `pairs` (source, reference) for one direction.
pub fn evaluate_direction(
    model: &dyn NmtModel,
    vocab: &BpeVocab,
    dir: &PairKey,
    pairs: &[(String, String)],
    batch_size: usize,
) -> Result<BleuScore, EvalError> {
    let sources: Vec<&str> = pairs.iter().map(|(s, _)| s.as_str()).collect();
    let hyps = translate_sentences(model, vocab, dir, &sources, batch_size)?;
    let cands: Vec<Vec<String>> = hyps.iter().map(|h| whitespace_tokens(h)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| whitespace_tokens(r)).collect();
    corpus_bleu(&cands, &refs)
}

/// BLEU per direction over the given test sets.
pub fn evaluate_model(
    model: &dyn NmtModel,
    vocab: &BpeVocab,
    tests: &BTreeMap<PairKey, Vec<(String, String)>>,
    batch_size: usize,
) -> Result<BTreeMap<PairKey, BleuScore>, EvalError> {
    tests
        .iter()
        .map(|(k, pairs)| Ok((k.clone(), evaluate_direction(model, vocab, k, pairs, batch_size)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub direction: String,
    pub resource: ResourceClass,
    pub bilingual: f64,
    /// One score per model column.
    pub models: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Mean delta over all, high-resource and low-resource directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMeans {
    pub all: f64,
    pub high: Option<f64>,
    pub low: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub model_names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub means: Vec<GroupMeans>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn key_diff(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Vec<String> {
    a.keys()
        .filter(|k| !b.contains_key(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .cloned()
        .collect()
}

/// Per-direction `model − bilingual` deltas for every model column, with
/// group means.
pub fn comparison_report(
    bilingual: &BTreeMap<String, f64>,
    models: &[(String, BTreeMap<String, f64>)],
    resource: &BTreeMap<String, ResourceClass>,
) -> Result<ComparisonReport, EvalError> {
    if bilingual.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut offenders = Vec::new();
    for (name, m) in models {
        for k in key_diff(bilingual, m) {
            offenders.push(format!("{name}:{k}"));
        }
    }
    for k in bilingual.keys().filter(|k| !resource.contains_key(*k)) {
        offenders.push(format!("resource:{k}"));
    }
    if !offenders.is_empty() {
        return Err(EvalError::KeyMismatch(offenders.join(", ")));
    }
    let rows: Vec<ComparisonRow> = bilingual
        .iter()
        .map(|(dir, &b)| {
            let scores: Vec<f64> = models.iter().map(|(_, m)| m[dir]).collect();
            ComparisonRow {
                direction: dir.clone(),
                resource: resource[dir],
                bilingual: b,
                deltas: scores.iter().map(|s| s - b).collect(),
                models: scores,
            }
        })
        .collect();
    let means = (0..models.len())
        .map(|i| GroupMeans {
            all: mean(rows.iter().map(|r| r.deltas[i])).unwrap_or(0.0),
            high: mean(
                rows.iter()
                    .filter(|r| r.resource == ResourceClass::High)
                    .map(|r| r.deltas[i]),
            ),
            low: mean(
                rows.iter()
                    .filter(|r| r.resource == ResourceClass::Low)
                    .map(|r| r.deltas[i]),
            ),
        })
        .collect();
    Ok(ComparisonReport {
        model_names: models.iter().map(|(n, _)| n.clone()).collect(),
        rows,
        means,
    })
}

impl ComparisonReport {
    /// `direction,resource,bilingual,model,delta` for model column `i`.
    pub fn to_csv(&self, i: usize) -> String {
        let mut s = String::from("direction,resource,bilingual,model,delta\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4}",
                r.direction, r.resource, r.bilingual, r.models[i], r.deltas[i]
            );
        }
        s
    }

    /// Aligned text table: one delta column per model, then group means.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<12} {:<5} {:>9}", "direction", "res", "bilingual");
        for n in &self.model_names {
            let _ = write!(s, " {:>12}", n);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<12} {:<5} {:>9.2}",
                r.direction,
                r.resource.to_string(),
                r.bilingual
            );
            for d in &r.deltas {
                let _ = write!(s, " {:>+12.2}", d);
            }
            s.push('\n');
        }
        let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:+.2}"));
        for (label, pick) in [("mean all", 0usize), ("mean high", 1), ("mean low", 2)] {
            let _ = write!(s, "{:<28}", label);
            for m in &self.means {
                let v = match pick {
                    0 => Some(m.all),
                    1 => m.high,
                    _ => m.low,
                };
                let _ = write!(s, " {:>12}", fmt(v));
            }
            s.push('\n');
        }
        s
    }
}

/// Writes `direction,bleu` rows.
pub fn scores_to_csv(scores: &BTreeMap<String, f64>) -> String {
    let mut s = String::from("direction,bleu\n");
    for (k, v) in scores {
        let _ = writeln!(s, "{k},{v:.4}");
    }
    s
}

pub fn scores_from_csv(text: &str) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "direction,bleu" => {}
        other => return Err(EvalError::Parse(format!("unexpected header {other:?}"))),
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| EvalError::Parse(format!("line {}: {line}", i + 2)))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| EvalError::Parse(format!("line {}: bad score {v}", i + 2)))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        whitespace_tokens(s)
    }

    #[test]
    fn identity_is_hundred() {
        let c = vec![toks("a b c d e"), toks("x y z w")];
        let b = corpus_bleu(&c, &c).unwrap();
        assert_eq!(b.score, 100.0);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn unigram_clipping() {
        let c = vec![toks("the the the the the the the")];
        let r = vec![toks("the cat is on the mat")];
        let b = corpus_bleu(&c, &r).unwrap();
        assert_eq!(b.precisions[0], 2.0 / 7.0);
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn disjoint_is_zero_and_errors() {
        let b = corpus_bleu(&[toks("a b c d")], &[toks("e f g h")]).unwrap();
        assert_eq!(b.score, 0.0);
        assert!(corpus_bleu::<String>(&[], &[]).is_err());
        assert!(corpus_bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn brevity_penalty_applies() {
        let b = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e f g h")]).unwrap();
        assert!((b.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((b.score - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn report_means() {
        let bil: BTreeMap<String, f64> = [("tr-de".into(), 10.0), ("az-de".into(), 5.0)].into();
        let m: BTreeMap<String, f64> = [("tr-de".into(), 11.0), ("az-de".into(), 7.0)].into();
        let res: BTreeMap<String, ResourceClass> = [
            ("tr-de".into(), ResourceClass::High),
            ("az-de".into(), ResourceClass::Low),
        ]
        .into();
        let r = comparison_report(&bil, &[("hie".into(), m)], &res).unwrap();
        assert_eq!(r.means[0].all, 1.5);
        assert_eq!(r.means[0].high, Some(1.0));
        assert_eq!(r.means[0].low, Some(2.0));
        let same = comparison_report(&bil, &[("a".into(), bil.clone()), ("b".into(), bil.clone())], &res).unwrap();
        assert!(same.rows.iter().all(|r| r.deltas == vec![0.0, 0.0]));
        assert!(same.to_table().contains("mean low"));
        assert!(r
            .to_csv(0)
            .starts_with("direction,resource,bilingual,model,delta\naz-de,low,5.0000,7.0000,2.0000"));
        let short: BTreeMap<String, f64> = [("tr-de".into(), 1.0)].into();
        let err = comparison_report(&bil, &[("x".into(), short)], &res).unwrap_err();
        assert!(err.to_string().contains("x:az-de"));
    }

    #[test]
    fn score_csv_round_trip() {
        let m: BTreeMap<String, f64> = [("a-b".into(), 12.5), ("c-d".into(), 0.0)].into();
        assert_eq!(scores_from_csv(&scores_to_csv(&m)).unwrap(), m);
        assert!(scores_from_csv("bad\n").is_err());
    }

    proptest! {
        #[test]
        fn self_bleu_and_permutation(sents in prop::collection::vec(prop::collection::vec(0u8..6, 1..10), 1..8), rot in 0usize..8) {
            let b = corpus_bleu(&sents, &sents).unwrap();
            prop_assert_eq!(b.score, 100.0);
            let refs: Vec<Vec<u8>> = sents.iter().map(|s| s.iter().rev().copied().collect()).collect();
            let x = corpus_bleu(&sents, &refs).unwrap();
            prop_assert!((0.0..=100.0).contains(&x.score));
            let k = rot % sents.len();
            let mut c2 = sents.clone();
            let mut r2 = refs.clone();
            c2.rotate_left(k);
            r2.rotate_left(k);
            let y = corpus_bleu(&c2, &r2).unwrap();
            prop_assert_eq!(x.score, y.score);
        }
    }
}
