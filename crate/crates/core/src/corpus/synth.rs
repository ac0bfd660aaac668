//! Synthetic language families: a proto-language drifted along a tree.

use std::collections::{BTreeMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, ParallelCorpus, ResourceClass};
use crate::lang_tree::{parse_tree, LanguageTree, NodeId};
use crate::seed::rng_for;

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPair {
    pub src: String,
    pub tgt: String,
    pub size: usize,
    pub resource: ResourceClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFamilySpec {
    /// Family tree over every language that appears in `pairs`.
    pub tree: String,
    pub vocab_size: usize,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Divergence rate of the edge above each node, keyed by node id
    /// (`az+tr`, `de`). Edges not listed use `default_rate`.
    #[serde(default)]
    pub edge_rates: BTreeMap<String, f64>,
    #[serde(default)]
    pub default_rate: f64,
    #[serde(default)]
    pub suffixes: BTreeMap<String, String>,
    #[serde(default = "default_suffix_fraction")]
    pub suffix_fraction: f64,
    #[serde(default)]
    pub swap_prob: BTreeMap<String, f64>,
    pub pairs: Vec<SyntheticPair>,
}

fn default_zipf() -> f64 {
    1.0
}

fn default_suffix_fraction() -> f64 {
    0.3
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<LanguageTree, CorpusError> {
        let bad = |m: String| Err(CorpusError::Synthetic(m));
        let tree = parse_tree(&self.tree).map_err(|e| CorpusError::Synthetic(e.to_string()))?;
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad(format!("bad zipf exponent {}", self.zipf_exponent));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.default_rate) || !unit(self.suffix_fraction) {
            return bad("rates and fractions must lie in [0, 1]".into());
        }
        let ids: HashSet<String> = tree.traversal_schedule().order.iter().map(|n| n.to_string()).collect();
        for (k, r) in &self.edge_rates {
            if !unit(*r) {
                return bad(format!("edge rate {r} for {k} outside [0, 1]"));
            }
            if !ids.contains(k) {
                return bad(format!("edge {k} is not a tree node"));
            }
        }
        for (lang, p) in &self.swap_prob {
            if !unit(*p) {
                return bad(format!("swap probability {p} for {lang} outside [0, 1]"));
            }
        }
        for lang in self.suffixes.keys().chain(self.swap_prob.keys()) {
            if !tree.has_leaf(lang) {
                return bad(format!("unknown language {lang}"));
            }
        }
        if self.pairs.is_empty() {
            return bad("no pairs requested".into());
        }
        for p in &self.pairs {
            if p.size == 0 {
                return bad(format!("pair {}-{} has size 0", p.src, p.tgt));
            }
            for l in [&p.src, &p.tgt] {
                if !tree.has_leaf(l) {
                    return bad(format!("unknown language {l}"));
                }
            }
        }
        Ok(tree)
    }

    fn rate(&self, node: &NodeId) -> f64 {
        self.edge_rates
            .get(&node.to_string())
            .copied()
            .unwrap_or(self.default_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamily {
    pub corpora: Vec<ParallelCorpus>,
    /// Leaf lexicons, index-aligned with the proto-lexicon.
    pub lexicons: BTreeMap<String, Vec<String>>,
}

impl SyntheticFamily {
    /// Number of proto entries two languages spell identically.
    pub fn lexicon_overlap(&self, a: &str, b: &str) -> Option<usize> {
        let (la, lb) = (self.lexicons.get(a)?, self.lexicons.get(b)?);
        Some(la.iter().zip(lb).filter(|(x, y)| x == y).count())
    }
}

fn fresh_word<R: Rng>(rng: &mut R, used: &mut HashSet<String>) -> String {
    let mut syllables = 2;
    let mut tries = 0;
    loop {
        let w: String = (0..syllables)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.gen_range(0..CONSONANTS.len())],
                    VOWELS[rng.gen_range(0..VOWELS.len())],
                ]
            })
            .collect();
        if used.insert(w.clone()) {
            return w;
        }
        tries += 1;
        if tries % 32 == 0 {
            syllables += 1;
        }
    }
}

struct Language {
    lexicon: Vec<String>,
    marked: Vec<bool>,
    suffix: String,
    swap: f64,
}

impl Language {
    fn render<R: Rng>(&self, proto: &[usize], rng: &mut R) -> String {
        let mut words: Vec<String> = proto
            .iter()
            .map(|&i| {
                if self.marked[i] {
                    format!("{}{}", self.lexicon[i], self.suffix)
                } else {
                    self.lexicon[i].clone()
                }
            })
            .collect();
        let mut i = 0;
        while i + 1 < words.len() {
            if self.swap > 0.0 && rng.gen_bool(self.swap) {
                words.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        words.join(" ")
    }
}

pub fn generate_synthetic_family(spec: &SyntheticFamilySpec, seed: u64) -> Result<SyntheticFamily, CorpusError> {
    let tree = spec.validate()?;
    let v = spec.vocab_size;
    let mut used = HashSet::new();
    let mut rng = rng_for(seed, "synth/proto");
    let proto: Vec<String> = (0..v).map(|_| fresh_word(&mut rng, &mut used)).collect();

    let mut node_lex: BTreeMap<NodeId, Vec<String>> = BTreeMap::new();
    node_lex.insert(tree.root_id(), proto);
    let mut leaves = tree.leaves();
    leaves.sort();
    let mut lexicons = BTreeMap::new();
    for leaf in &leaves {
        let path = tree.path_to(leaf).map_err(|e| CorpusError::Synthetic(e.to_string()))?;
        for w in path.windows(2) {
            if node_lex.contains_key(&w[1]) {
                continue;
            }
            let mut lex = node_lex[&w[0]].clone();
            let mut rng = rng_for(seed, &format!("synth/edge/{}", w[1]));
            let n = (spec.rate(&w[1]) * v as f64).round() as usize;
            for i in index::sample(&mut rng, v, n.min(v)).into_vec() {
                lex[i] = fresh_word(&mut rng, &mut used);
            }
            node_lex.insert(w[1].clone(), lex);
        }
        lexicons.insert(leaf.clone(), node_lex[path.last().unwrap()].clone());
    }

    let languages: BTreeMap<String, Language> = leaves
        .iter()
        .map(|l| {
            let mut rng = rng_for(seed, &format!("synth/suffix/{l}"));
            let suffix = spec.suffixes.get(l).cloned().unwrap_or_default();
            let marked = (0..v)
                .map(|_| !suffix.is_empty() && rng.gen_bool(spec.suffix_fraction))
                .collect();
            let lang = Language {
                lexicon: lexicons[l].clone(),
                marked,
                suffix,
                swap: spec.swap_prob.get(l).copied().unwrap_or(0.0),
            };
            (l.clone(), lang)
        })
        .collect();

    let weights: Vec<f64> = (0..v).map(|k| ((k + 1) as f64).powf(-spec.zipf_exponent)).collect();
    let zipf = WeightedIndex::new(&weights).map_err(|e| CorpusError::Synthetic(e.to_string()))?;

    let mut corpora = Vec::with_capacity(spec.pairs.len());
    for p in &spec.pairs {
        let label = format!("synth/pair/{}-{}", p.src, p.tgt);
        let mut srng = rng_for(seed, &format!("{label}/sentences"));
        let mut arng = rng_for(seed, &format!("{label}/src"));
        let mut brng = rng_for(seed, &format!("{label}/tgt"));
        let (a, b) = (&languages[&p.src], &languages[&p.tgt]);
        let pairs = (0..p.size)
            .map(|_| {
                let len = srng.gen_range(spec.min_len..=spec.max_len);
                let proto: Vec<usize> = (0..len).map(|_| zipf.sample(&mut srng)).collect();
                (a.render(&proto, &mut arng), b.render(&proto, &mut brng))
            })
            .collect();
        corpora.push(ParallelCorpus {
            src_lang: p.src.clone(),
            tgt_lang: p.tgt.clone(),
            pairs,
            resource: p.resource,
        });
    }
    Ok(SyntheticFamily { corpora, lexicons })
}
