//! Experiment configuration files and the data/model pipeline shared by the
//! command-line tool and the acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::synth::{generate_synthetic_family, SyntheticFamilySpec, SyntheticPair};
use crate::corpus::{
    filter_max_len, learn_bpe, load_parallel, split_train_valid, BpeVocab, CorpusError, PairKey, ParallelCorpus,
    ResourceClass,
};
use crate::hier_model::{build_full_sharing, HierModel, NmtModel};
use crate::lang_tree::{allocate_layers, baseline_depths, parse_tree, LanguageTree, TreeError};
use crate::seed::{derive_seed, rng_for};
use crate::training::{PairData, RunConfig, TrainError};
use crate::transformer::{ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Hier,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    pub encoder: String,
    pub decoder: String,
    #[serde(default = "three")]
    pub d_enc: usize,
    #[serde(default = "three")]
    pub d_dec: usize,
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub merges: usize,
    /// Length filter limit in subword tokens.
    pub max_len: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            merges: 512,
            max_len: 40,
        }
    }
}

/// Synthetic family parameters; corpus sizes come from the pair entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub tree: String,
    pub vocab_size: usize,
    #[serde(default = "one")]
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub edge_rates: BTreeMap<String, f64>,
    #[serde(default)]
    pub default_rate: f64,
    #[serde(default)]
    pub suffixes: BTreeMap<String, String>,
    #[serde(default = "point_three")]
    pub suffix_fraction: f64,
    #[serde(default)]
    pub swap_prob: BTreeMap<String, f64>,
}

fn one() -> f64 {
    1.0
}

fn point_three() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub src: String,
    pub tgt: String,
    pub resource: ResourceClass,
    /// Corpus files; both or neither.
    pub src_path: Option<PathBuf>,
    pub tgt_path: Option<PathBuf>,
    /// Number of synthetic pairs to generate.
    pub size: Option<usize>,
}

impl PairConfig {
    pub fn key(&self) -> PairKey {
        PairKey::new(&self.src, &self.tgt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "one_u64")]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub architecture: Architecture,
    pub trees: TreeConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub run: RunConfig,
    pub pairs: Vec<PairConfig>,
    pub synthetic: Option<SyntheticConfig>,
}

fn default_name() -> String {
    "experiment".into()
}

fn one_u64() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative paths inside it resolve
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        for p in &mut cfg.pairs {
            p.src_path.as_mut().map(fix);
            p.tgt_path.as_mut().map(fix);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let et = parse_tree(&self.trees.encoder)?;
        let dt = parse_tree(&self.trees.decoder)?;
        self.model.validate()?;
        self.run.validate()?;
        if self.pairs.is_empty() {
            return bad("no pairs".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.pairs {
            if !seen.insert(p.key()) {
                return bad(format!("pair {} listed twice", p.key()));
            }
            if !et.has_leaf(&p.src) {
                return bad(format!("source {} is not in the encoder tree", p.src));
            }
            if !dt.has_leaf(&p.tgt) {
                return bad(format!("target {} is not in the decoder tree", p.tgt));
            }
            match (&p.src_path, &p.tgt_path, p.size) {
                (Some(_), Some(_), None) => {}
                (None, None, Some(n)) if n > 0 => {
                    let Some(s) = &self.synthetic else {
                        return bad(format!(
                            "pair {} has a size but there is no [synthetic] section",
                            p.key()
                        ));
                    };
                    let family = parse_tree(&s.tree)?;
                    for l in [&p.src, &p.tgt] {
                        if !family.has_leaf(l) {
                            return bad(format!("{l} is not in the synthetic family tree"));
                        }
                    }
                }
                _ => {
                    return bad(format!(
                        "pair {} needs exactly one source: src_path+tgt_path or size",
                        p.key()
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn enc_tree(&self) -> LanguageTree {
        parse_tree(&self.trees.encoder).expect("validated")
    }

    pub fn dec_tree(&self) -> LanguageTree {
        parse_tree(&self.trees.decoder).expect("validated")
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            d_enc: self.trees.d_enc,
            d_dec: self.trees.d_dec,
            ..self.run.clone()
        }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticFamilySpec> {
        let s = self.synthetic.as_ref()?;
        let pairs: Vec<SyntheticPair> = self
            .pairs
            .iter()
            .filter_map(|p| {
                p.size.map(|size| SyntheticPair {
                    src: p.src.clone(),
                    tgt: p.tgt.clone(),
                    size,
                    resource: p.resource,
                })
            })
            .collect();
        if pairs.is_empty() {
            return None;
        }
        Some(SyntheticFamilySpec {
            tree: s.tree.clone(),
            vocab_size: s.vocab_size,
            zipf_exponent: s.zipf_exponent,
            min_len: s.min_len,
            max_len: s.max_len,
            edge_rates: s.edge_rates.clone(),
            default_rate: s.default_rate,
            suffixes: s.suffixes.clone(),
            suffix_fraction: s.suffix_fraction,
            swap_prob: s.swap_prob.clone(),
            pairs,
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.output_dir.join("vocab.txt")
    }

    pub fn resources(&self) -> BTreeMap<String, ResourceClass> {
        self.pairs.iter().map(|p| (p.key().to_string(), p.resource)).collect()
    }
}

/// Generates every synthetic pair of the config in memory.
pub fn synthesize(cfg: &ExperimentConfig) -> Result<Vec<ParallelCorpus>, ConfigError> {
    match cfg.synthetic_spec() {
        Some(spec) => Ok(generate_synthetic_family(&spec, derive_seed(cfg.seed, "synthetic"))?.corpora),
        None => Ok(Vec::new()),
    }
}

/// Corpus of every configured pair, in config order. Synthetic pairs are
/// read from `data_dir` when present there, generated otherwise.
pub fn load_corpora(cfg: &ExperimentConfig) -> Result<Vec<ParallelCorpus>, ConfigError> {
    let mut synth: Option<Vec<ParallelCorpus>> = None;
    let mut out = Vec::with_capacity(cfg.pairs.len());
    for p in &cfg.pairs {
        let corpus = match (&p.src_path, &p.tgt_path) {
            (Some(s), Some(t)) => load_parallel(s, t, &p.src, &p.tgt, p.resource)?.corpus,
            _ => {
                let (s, t) = synthetic_paths(&cfg.data_dir(), &p.key());
                if s.exists() && t.exists() {
                    load_parallel(&s, &t, &p.src, &p.tgt, p.resource)?.corpus
                } else {
                    if synth.is_none() {
                        synth = Some(synthesize(cfg)?);
                    }
                    synth
                        .as_ref()
                        .and_then(|v| v.iter().find(|c| c.key() == p.key()))
                        .cloned()
                        .ok_or_else(|| ConfigError::Invalid(format!("no synthetic data for {}", p.key())))?
                }
            }
        };
        out.push(corpus);
    }
    Ok(out)
}

pub fn synthetic_paths(dir: &Path, key: &PairKey) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{key}.{}", key.src)),
        dir.join(format!("{key}.{}", key.tgt)),
    )
}

/// Shared vocabulary over both sides of every corpus, with a tag per
/// decoder-tree leaf.
pub fn learn_vocab(cfg: &ExperimentConfig, corpora: &[ParallelCorpus]) -> BpeVocab {
    let texts: Vec<&str> = corpora
        .iter()
        .flat_map(|c| c.pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]))
        .collect();
    learn_bpe(&texts, cfg.vocab.merges, &cfg.dec_tree().leaves())
}

/// Length-filters and splits every corpus and tokenises the result.
pub fn prepare_pairs(
    cfg: &ExperimentConfig,
    corpora: &[ParallelCorpus],
    vocab: &BpeVocab,
) -> Result<Vec<PairData>, ConfigError> {
    corpora
        .iter()
        .map(|c| {
            let filtered = filter_max_len(c, vocab, cfg.vocab.max_len);
            if filtered.len() < 2 {
                return Err(ConfigError::Invalid(format!(
                    "{} has fewer than 2 pairs after filtering",
                    c.key()
                )));
            }
            let (train, valid) = split_train_valid(&filtered, cfg.run.valid_fraction, derive_seed(cfg.seed, "split"))?;
            Ok(PairData::new(&train, &valid, vocab))
        })
        .collect()
}

/// Allocation table lines and the matching full-sharing depths.
pub fn tree_report(cfg: &ExperimentConfig) -> Result<(String, (usize, usize)), ConfigError> {
    let et = cfg.enc_tree();
    let dt = cfg.dec_tree();
    let ea = allocate_layers(&et, cfg.trees.d_enc)?;
    let da = allocate_layers(&dt, cfg.trees.d_dec)?;
    let mut s = String::new();
    for (side, tree, alloc) in [("encoder", &et, &ea), ("decoder", &dt, &da)] {
        s.push_str(&format!("{side} {} (budget {})\n", tree.render(), alloc.depth_budget));
        for id in tree.traversal_schedule().order {
            s.push_str(&format!("  {:<20} {}\n", id.to_string(), alloc.get(&id).unwrap_or(0)));
        }
    }
    let depths = baseline_depths(&ea, &da);
    s.push_str(&format!(
        "full-sharing baseline: {} encoder + {} decoder layers\n",
        depths.0, depths.1
    ));
    Ok((s, depths))
}

/// Freshly initialised model of the configured architecture.
pub fn build_model<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    vocab: &BpeVocab,
    rng: &mut R,
) -> Result<Box<dyn NmtModel>, ConfigError> {
    let et = cfg.enc_tree();
    let dt = cfg.dec_tree();
    Ok(match cfg.architecture {
        Architecture::Hier => Box::new(HierModel::from_trees(
            et,
            dt,
            cfg.trees.d_enc,
            cfg.trees.d_dec,
            cfg.model,
            vocab.len(),
            rng,
        )?),
        Architecture::Full => {
            let ea = allocate_layers(&et, cfg.trees.d_enc)?;
            let da = allocate_layers(&dt, cfg.trees.d_dec)?;
            let (e, d) = baseline_depths(&ea, &da);
            Box::new(build_full_sharing(cfg.model, e, d, vocab, &dt.leaves(), rng)?)
        }
    })
}

pub fn model_rng(cfg: &ExperimentConfig) -> rand_chacha::ChaCha8Rng {
    rng_for(cfg.seed, "init")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_SOURCE: &str = r#"
name = "two-source"
seed = 3
output_dir = "out"

[trees]
encoder = "(az,tr)"
decoder = "de"

[model]
d_model = 16
dff = 32
num_heads = 2
dropout_rate = 0.1

[run]
max_epochs = 2
batch_size = 8
strategy = "downweight"

[synthetic]
tree = "((az,tr),de)"
vocab_size = 50
min_len = 2
max_len = 5
default_rate = 0.2

[[pairs]]
src = "tr"
tgt = "de"
resource = "high"
size = 100

[[pairs]]
src = "az"
tgt = "de"
resource = "low"
size = 20
"#;

    #[test]
    fn parses_and_reports() {
        let cfg = ExperimentConfig::from_toml(TWO_SOURCE).unwrap();
        assert_eq!(cfg.run.strategy, crate::training::TrainingStrategy::Downweight);
        assert_eq!(cfg.run.valid_fraction, 0.02);
        let (table, depths) = tree_report(&cfg).unwrap();
        assert_eq!(depths, (4, 3));
        assert!(table.contains("az+tr"));
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let c = TWO_SOURCE.replace("src = \"az\"", "src = \"pl\"");
        assert!(matches!(ExperimentConfig::from_toml(&c), Err(ConfigError::Invalid(_))));
        let c = TWO_SOURCE.replace("size = 20", "size = 20\nsrc_path = \"x\"");
        assert!(ExperimentConfig::from_toml(&c).is_err());
        let c = TWO_SOURCE.replace("num_heads = 2", "num_heads = 3");
        assert!(ExperimentConfig::from_toml(&c).is_err());
        let c = TWO_SOURCE.replace("[run]", "[run]\nbogus = 1");
        assert!(matches!(ExperimentConfig::from_toml(&c), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn pipeline_builds_data_and_model() {
        let cfg = ExperimentConfig::from_toml(TWO_SOURCE).unwrap();
        let corpora = load_corpora(&cfg).unwrap();
        assert_eq!(corpora.len(), 2);
        assert_eq!(corpora[0].len(), 100);
        let vocab = learn_vocab(&cfg, &corpora);
        assert!(vocab.tag_id("de").is_some());
        let data = prepare_pairs(&cfg, &corpora, &vocab).unwrap();
        assert_eq!(data[0].train.len() + data[0].valid_text.len(), 100);
        let m = build_model(&cfg, &vocab, &mut model_rng(&cfg)).unwrap();
        assert!(m.num_params() > 0);
    }
}
