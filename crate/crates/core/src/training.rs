//! Training strategies, epoch plans, the optimisation loop and overfitting
//! diagnosis.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    make_epoch_batches, tokenize, BpeVocab, CorpusError, Example, PairKey, PairStream, ParallelCorpus, ResourceClass,
};
use crate::evaluation::{evaluate_direction, EvalError};
use crate::hier_model::NmtModel;
use crate::lang_tree::LanguageTree;
use crate::numerics::{AdamState, NumericsError, ParamStore, Tape};
use crate::seed::{derive_seed, rng_for};
use crate::transformer::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, value: f64 },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("history: {0}")]
    History(String),
    #[error("need at least {needed} epochs of history, have {have}")]
    TooFewEpochs { needed: usize, have: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingStrategy {
    /// Oversampling only.
    Baseline,
    /// Oversampling plus low-resource loss weights.
    Downweight,
    /// No oversampling; low-resource streams are topped up with downweighted
    /// high-resource rows.
    Regularize,
}

impl fmt::Display for TrainingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingStrategy::Baseline => "baseline",
            TrainingStrategy::Downweight => "downweight",
            TrainingStrategy::Regularize => "regularize",
        })
    }
}

impl FromStr for TrainingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(TrainingStrategy::Baseline),
            "downweight" => Ok(TrainingStrategy::Downweight),
            "regularize" => Ok(TrainingStrategy::Regularize),
            _ => Err(format!("unknown strategy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverfitThresholds {
    /// Latest relative epoch position of the validation-loss minimum.
    pub min_position: f64,
    /// Minimum final/min validation-loss ratio.
    pub rebound: f64,
}

impl Default for OverfitThresholds {
    fn default() -> Self {
        OverfitThresholds {
            min_position: 0.6,
            rebound: 1.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear learning-rate warm-up length in steps (0 = none).
    pub warmup_steps: usize,
    pub seed: u64,
    pub d_enc: usize,
    pub d_dec: usize,
    pub strategy: TrainingStrategy,
    pub valid_fraction: f64,
    /// Epochs without a validation-BLEU improvement before stopping.
    pub patience: Option<usize>,
    /// Cap on validation sentences decoded for BLEU each epoch.
    pub valid_bleu_sentences: Option<usize>,
    pub eval_batch_size: usize,
    pub overfit: OverfitThresholds,
    /// Route borrowed Regularize rows through the low-resource pair's own
    /// path instead of the high-resource pair's.
    pub borrow_via_low_path: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_epochs: 50,
            batch_size: 128,
            learning_rate: 5e-4,
            warmup_steps: 0,
            seed: 1,
            d_enc: 3,
            d_dec: 3,
            strategy: TrainingStrategy::Baseline,
            valid_fraction: 0.02,
            patience: Some(10),
            valid_bleu_sentences: None,
            eval_batch_size: 64,
            overfit: OverfitThresholds::default(),
            borrow_via_low_path: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 0.5) {
            return bad("valid_fraction must lie in (0, 0.5)");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Training and validation data of one direction.
#[derive(Debug, Clone)]
pub struct PairData {
    pub key: PairKey,
    pub resource: ResourceClass,
    pub train: Vec<Example>,
    pub valid_examples: Vec<Example>,
    pub valid_text: Vec<(String, String)>,
}

impl PairData {
    pub fn new(train: &ParallelCorpus, valid: &ParallelCorpus, vocab: &BpeVocab) -> Self {
        PairData {
            key: train.key(),
            resource: train.resource,
            train: tokenize(train, vocab, 1.0),
            valid_examples: tokenize(valid, vocab, 1.0),
            valid_text: valid.pairs.clone(),
        }
    }

    pub fn size(&self) -> usize {
        self.train.len()
    }
}

/// Size and resource class of a direction, as seen by the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInfo {
    pub key: PairKey,
    pub resource: ResourceClass,
    pub size: usize,
}

impl From<&PairData> for PairInfo {
    fn from(p: &PairData) -> Self {
        PairInfo {
            key: p.key.clone(),
            resource: p.resource,
            size: p.size(),
        }
    }
}

fn shared(tree: &LanguageTree, a: &str, b: &str) -> usize {
    tree.shared_nodes(a, b).unwrap_or(0)
}

/// The high-resource direction sharing the most tree nodes with `low`
/// (source-side plus target-side), then the larger corpus, then the smaller
/// pair name.
pub fn closest_high_resource<'a>(
    enc_tree: &LanguageTree,
    dec_tree: &LanguageTree,
    low: &PairKey,
    pairs: &'a [PairInfo],
) -> Option<&'a PairInfo> {
    pairs
        .iter()
        .filter(|p| p.resource == ResourceClass::High && &p.key != low)
        .max_by(|a, b| {
            let score = |p: &PairInfo| shared(enc_tree, &low.src, &p.key.src) + shared(dec_tree, &low.tgt, &p.key.tgt);
            score(a)
                .cmp(&score(b))
                .then(a.size.cmp(&b.size))
                .then_with(|| b.key.to_string().cmp(&a.key.to_string()))
        })
}

/// Loss weight of `pair`'s own rows (and, under Regularize, the weight of
/// the borrowed rows on its behalf).
pub fn pair_weight(
    strategy: TrainingStrategy,
    pair: &PairKey,
    pairs: &[PairInfo],
    enc_tree: &LanguageTree,
    dec_tree: &LanguageTree,
) -> f64 {
    let Some(me) = pairs.iter().find(|p| &p.key == pair) else {
        return 1.0;
    };
    if strategy != TrainingStrategy::Downweight || me.resource == ResourceClass::High {
        return 1.0;
    }
    disbalance(me, pairs, enc_tree, dec_tree).unwrap_or(1.0)
}

/// `own size / closest high-resource size` for a low-resource pair.
pub fn disbalance(me: &PairInfo, pairs: &[PairInfo], enc_tree: &LanguageTree, dec_tree: &LanguageTree) -> Option<f64> {
    let high = closest_high_resource(enc_tree, dec_tree, &me.key, pairs);
    if high.is_none() {
        log::warn!("no high-resource pair for {}; weights stay 1.0", me.key);
    }
    high.map(|h| me.size as f64 / h.size as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub streams: Vec<PairStream>,
}

/// Per-pair data streams of one epoch.
pub fn build_epoch_plan(
    strategy: TrainingStrategy,
    data: &[PairData],
    enc_tree: &LanguageTree,
    dec_tree: &LanguageTree,
    borrow_via_low_path: bool,
    seed: u64,
) -> EpochPlan {
    let infos: Vec<PairInfo> = data.iter().map(PairInfo::from).collect();
    let streams = data
        .iter()
        .zip(&infos)
        .map(|(pd, me)| {
            let label = format!("plan/{}", pd.key);
            let high = (me.resource == ResourceClass::Low)
                .then(|| closest_high_resource(enc_tree, dec_tree, &pd.key, &infos))
                .flatten();
            let examples = match (strategy, high) {
                (_, None) => pd.train.clone(),
                (TrainingStrategy::Baseline | TrainingStrategy::Downweight, Some(h)) => {
                    let w = pair_weight(strategy, &pd.key, &infos, enc_tree, dec_tree);
                    let target = h.size.max(pd.size());
                    crate::corpus::oversample_items(&pd.train, target, derive_seed(seed, &label))
                        .into_iter()
                        .map(|e| Example { weight: w, ..e })
                        .collect()
                }
                (TrainingStrategy::Regularize, Some(h)) => {
                    let ratio = me.size as f64 / h.size as f64;
                    let donor = data.iter().find(|d| d.key == h.key).expect("high pair present");
                    let need = h.size.saturating_sub(pd.size());
                    let mut pool: Vec<&Example> = donor.train.iter().collect();
                    pool.shuffle(&mut rng_for(seed, &format!("{label}/borrow")));
                    let mut out = pd.train.clone();
                    out.extend(pool.iter().cycle().take(need).map(|e| Example {
                        weight: ratio,
                        route: if borrow_via_low_path {
                            pd.key.clone()
                        } else {
                            e.route.clone()
                        },
                        ..(*e).clone()
                    }));
                    out
                }
            };
            PairStream {
                pair: pd.key.clone(),
                examples,
            }
        })
        .collect();
    EpochPlan { streams }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Loss,
    Bleu,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }
}

impl Metric {
    fn as_str(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::Bleu => "bleu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub pair: String,
    pub split: Split,
    pub metric: Metric,
    pub value: f64,
}

/// Per-epoch, per-pair training curves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn push(&mut self, epoch: usize, pair: &str, split: Split, metric: Metric, value: f64) {
        if let Some(last) = self.records.last() {
            debug_assert!(last.epoch <= epoch);
        }
        self.records.push(HistoryRecord {
            epoch,
            pair: pair.to_string(),
            split,
            metric,
            value,
        });
    }

    /// Values of one curve in epoch order.
    pub fn series(&self, pair: &str, split: Split, metric: Metric) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.pair == pair && r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn pairs(&self) -> Vec<String> {
        let mut v: Vec<String> = self.records.iter().map(|r| r.pair.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn epochs(&self) -> usize {
        self.records.iter().map(|r| r.epoch).max().unwrap_or(0)
    }

    /// `(epoch, bleu)` of the best validation BLEU; the earliest on ties.
    pub fn best_bleu(&self, pair: &str) -> Option<(usize, f64)> {
        self.series(pair, Split::Valid, Metric::Bleu)
            .into_iter()
            .fold(None, |best, (e, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((e, v)),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,pair,split,metric,value\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                r.pair,
                r.split.as_str(),
                r.metric.as_str(),
                r.value
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("epoch,pair,split,metric,value") {
            return Err(TrainError::History("missing header".into()));
        }
        let mut h = History::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || TrainError::History(format!("line {}: {line}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let split = match f[2] {
                "train" => Split::Train,
                "valid" => Split::Valid,
                _ => return Err(bad()),
            };
            let metric = match f[3] {
                "loss" => Metric::Loss,
                "bleu" => Metric::Bleu,
                _ => return Err(bad()),
            };
            h.push(
                f[0].parse().map_err(|_| bad())?,
                f[1],
                split,
                metric,
                f[4].parse().map_err(|_| bad())?,
            );
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    pub min_valid_epoch: usize,
    pub epochs: usize,
    /// Final validation loss over its minimum.
    pub rebound: f64,
    pub train_still_decreasing: bool,
    pub flagged: bool,
}

/// Flags the validation-loss minimum occurring early (relative position at
/// most `min_position`) followed by a rebound of at least `rebound` while
/// training loss keeps falling.
pub fn detect_overfitting(history: &History, pair: &str, th: &OverfitThresholds) -> Result<OverfitReport, TrainError> {
    let valid = history.series(pair, Split::Valid, Metric::Loss);
    let train = history.series(pair, Split::Train, Metric::Loss);
    if valid.len() < 3 || train.len() != valid.len() {
        return Err(TrainError::TooFewEpochs {
            needed: 3,
            have: valid.len().min(train.len()),
        });
    }
    let n = valid.len();
    let (mi, &(min_epoch, vmin)) = valid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty");
    let rebound = valid[n - 1].1 / vmin;
    let train_still_decreasing = train[n - 1].1 < train[mi].1;
    let position = (mi + 1) as f64 / n as f64;
    Ok(OverfitReport {
        min_valid_epoch: min_epoch,
        epochs: n,
        rebound,
        train_still_decreasing,
        flagged: position <= th.min_position && rebound >= th.rebound && train_still_decreasing,
    })
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub bleu: f64,
    pub params: ParamStore,
}

/// What one finished epoch looked like; handed to the progress callback.
#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: BTreeMap<PairKey, f64>,
    pub valid_loss: BTreeMap<PairKey, f64>,
    pub valid_bleu: BTreeMap<PairKey, f64>,
    /// History records added this epoch.
    pub records: Vec<HistoryRecord>,
    pub global_step: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    pub best: BTreeMap<PairKey, BestCheckpoint>,
    /// Combined loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Evaluation-mode token-mean loss of `examples` as one stream.
pub fn validation_loss(model: &dyn NmtModel, examples: &[Example], batch_size: usize) -> Result<f64, TrainError> {
    let (mut sum, mut tokens) = (0.0, 0usize);
    for chunk in examples.chunks(batch_size) {
        let batch: Vec<Example> = chunk
            .iter()
            .map(|e| Example {
                weight: 1.0,
                ..e.clone()
            })
            .collect();
        let mut tape = Tape::new().with_finite_checks(false);
        let out = model.forward_loss(&mut tape, &[batch], None)?;
        sum += out.stream_losses[0] * out.stream_tokens[0] as f64;
        tokens += out.stream_tokens[0];
    }
    Ok(if tokens == 0 { 0.0 } else { sum / tokens as f64 })
}

/// Where a continued run picks up: the next epoch number and the history so
/// far. Optimiser moments start fresh.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub next_epoch: usize,
    pub global_step: usize,
    pub history: History,
}

impl Default for ResumeState {
    fn default() -> Self {
        ResumeState {
            next_epoch: 1,
            global_step: 0,
            history: History::default(),
        }
    }
}

/// Runs the epoch loop: stacked batch groups, weighted loss, backward pass
/// and Adam update; validation loss and greedy BLEU per pair after every
/// epoch; best-BLEU parameters retained per pair.
pub fn train(
    model: &mut dyn NmtModel,
    data: &[PairData],
    enc_tree: &LanguageTree,
    dec_tree: &LanguageTree,
    vocab: &BpeVocab,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary, &dyn NmtModel),
) -> Result<TrainOutcome, TrainError> {
    train_from(
        model,
        data,
        enc_tree,
        dec_tree,
        vocab,
        cfg,
        ResumeState::default(),
        on_epoch,
    )
}

/// [`train`] continuing from `resume`. `best` only holds pairs whose BLEU
/// beat everything already in the resumed history.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    model: &mut dyn NmtModel,
    data: &[PairData],
    enc_tree: &LanguageTree,
    dec_tree: &LanguageTree,
    vocab: &BpeVocab,
    cfg: &RunConfig,
    resume: ResumeState,
    on_epoch: &mut dyn FnMut(&EpochSummary, &dyn NmtModel),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("no training pairs".into()));
    }
    let mut adam = AdamState::new(model.store());
    let start = resume.next_epoch.max(1);
    let mut dropout_rng = if start == 1 {
        rng_for(cfg.seed, "dropout")
    } else {
        rng_for(cfg.seed, &format!("dropout{start}"))
    };
    let mut prior_best: BTreeMap<String, f64> = BTreeMap::new();
    for p in resume.history.pairs() {
        if let Some((_, b)) = resume.history.best_bleu(&p) {
            prior_best.insert(p, b);
        }
    }
    let mut history = resume.history;
    let mut best: BTreeMap<PairKey, BestCheckpoint> = BTreeMap::new();
    let mut step_losses = Vec::new();
    let mut global_step = resume.global_step;
    let mut last_improvement = start - 1;
    let mut stopped_early = false;
    let mut epochs_run = start - 1;

    for epoch in start..=cfg.max_epochs {
        let plan = build_epoch_plan(
            cfg.strategy,
            data,
            enc_tree,
            dec_tree,
            cfg.borrow_via_low_path,
            derive_seed(cfg.seed, &format!("epoch{epoch}")),
        );
        let steps = make_epoch_batches(
            &plan.streams,
            cfg.batch_size,
            derive_seed(cfg.seed, &format!("batches{epoch}")),
        )?;
        let mut sums = vec![0.0; data.len()];
        for (i, group) in steps.iter().enumerate() {
            let mut tape = Tape::new().with_finite_checks(false);
            let out = model.forward_loss(&mut tape, group, Some(&mut dropout_rng))?;
            let value = tape.value(out.loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, step: i, value });
            }
            let grads = tape.backward(out.loss)?;
            drop(tape);
            adam.step(model.store_mut(), &grads, cfg.lr_at(global_step));
            global_step += 1;
            step_losses.push(value);
            for (s, l) in sums.iter_mut().zip(&out.stream_losses) {
                *s += l;
            }
        }
        let mut summary = EpochSummary {
            epoch,
            steps: steps.len(),
            train_loss: BTreeMap::new(),
            valid_loss: BTreeMap::new(),
            valid_bleu: BTreeMap::new(),
            records: Vec::new(),
            global_step,
        };
        let first_record = history.records.len();
        let mut improved = false;
        for (pd, s) in data.iter().zip(&sums) {
            let name = pd.key.to_string();
            let train_loss = s / steps.len().max(1) as f64;
            let vloss = validation_loss(&*model, &pd.valid_examples, cfg.eval_batch_size)?;
            let n = cfg.valid_bleu_sentences.unwrap_or(usize::MAX).min(pd.valid_text.len());
            let bleu = evaluate_direction(&*model, vocab, &pd.key, &pd.valid_text[..n], cfg.eval_batch_size)?.score;
            history.push(epoch, &name, Split::Train, Metric::Loss, train_loss);
            history.push(epoch, &name, Split::Valid, Metric::Loss, vloss);
            history.push(epoch, &name, Split::Valid, Metric::Bleu, bleu);
            let bar = best
                .get(&pd.key)
                .map(|b| b.bleu)
                .or_else(|| prior_best.get(&name).copied());
            if bar.is_none_or(|b| bleu > b) {
                improved |= bar.is_some() || epoch == 1;
                best.insert(
                    pd.key.clone(),
                    BestCheckpoint {
                        epoch,
                        bleu,
                        params: model.store().clone(),
                    },
                );
            }
            summary.train_loss.insert(pd.key.clone(), train_loss);
            summary.valid_loss.insert(pd.key.clone(), vloss);
            summary.valid_bleu.insert(pd.key.clone(), bleu);
        }
        summary.records = history.records[first_record..].to_vec();
        on_epoch(&summary, &*model);
        epochs_run = epoch;
        if improved {
            last_improvement = epoch;
        }
        if let Some(p) = cfg.patience {
            if epoch - last_improvement >= p && epoch < cfg.max_epochs {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        history,
        best,
        step_losses,
        epochs_run,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang_tree::parse_tree;

    fn info(src: &str, tgt: &str, r: ResourceClass, size: usize) -> PairInfo {
        PairInfo {
            key: PairKey::new(src, tgt),
            resource: r,
            size,
        }
    }

    #[test]
    fn downweight_ratio() {
        let et = parse_tree("(az,tr)").unwrap();
        let dt = parse_tree("de").unwrap();
        let pairs = [
            info("az", "de", ResourceClass::Low, 100_000),
            info("tr", "de", ResourceClass::High, 500_000),
        ];
        let low = PairKey::new("az", "de");
        let high = PairKey::new("tr", "de");
        assert_eq!(pair_weight(TrainingStrategy::Downweight, &low, &pairs, &et, &dt), 0.2);
        assert_eq!(pair_weight(TrainingStrategy::Downweight, &high, &pairs, &et, &dt), 1.0);
        assert_eq!(pair_weight(TrainingStrategy::Baseline, &low, &pairs, &et, &dt), 1.0);
        assert_eq!(pair_weight(TrainingStrategy::Regularize, &low, &pairs, &et, &dt), 1.0);
        let only_low = [pairs[0].clone()];
        assert_eq!(
            pair_weight(TrainingStrategy::Downweight, &low, &only_low, &et, &dt),
            1.0
        );
    }

    #[test]
    fn closest_high_uses_tree_sharing() {
        let et = parse_tree("((az,tr),en,de)").unwrap();
        let dt = parse_tree("(de,pl)").unwrap();
        let pairs = [
            info("az", "de", ResourceClass::Low, 10),
            info("tr", "de", ResourceClass::High, 50),
            info("en", "de", ResourceClass::High, 90),
            info("de", "pl", ResourceClass::Low, 10),
            info("en", "pl", ResourceClass::High, 40),
        ];
        let c = |s, t| {
            closest_high_resource(&et, &dt, &PairKey::new(s, t), &pairs)
                .unwrap()
                .key
                .to_string()
        };
        assert_eq!(c("az", "de"), "tr-de");
        assert_eq!(c("de", "pl"), "en-pl");
        let one = [pairs[0].clone(), pairs[2].clone()];
        assert_eq!(
            closest_high_resource(&et, &dt, &PairKey::new("az", "de"), &one)
                .unwrap()
                .key
                .to_string(),
            "en-de"
        );
    }

    fn hist(train: &[f64], valid: &[f64]) -> History {
        let mut h = History::default();
        for (e, (t, v)) in train.iter().zip(valid).enumerate() {
            h.push(e + 1, "az-de", Split::Train, Metric::Loss, *t);
            h.push(e + 1, "az-de", Split::Valid, Metric::Loss, *v);
        }
        h
    }

    #[test]
    fn overfitting_rule() {
        let th = OverfitThresholds::default();
        let dec: Vec<f64> = (0..20).map(|i| 5.0 - 0.1 * i as f64).collect();
        assert!(!detect_overfitting(&hist(&dec, &dec), "az-de", &th).unwrap().flagged);

        let train: Vec<f64> = (0..50).map(|i| 5.0 - 0.05 * i as f64).collect();
        let valid: Vec<f64> = (0..50)
            .map(|i| {
                if i < 10 {
                    5.0 - 0.2 * i as f64
                } else {
                    3.2 + 0.0333 * (i - 9) as f64
                }
            })
            .collect();
        let r = detect_overfitting(&hist(&train, &valid), "az-de", &th).unwrap();
        assert_eq!(r.min_valid_epoch, 10);
        assert!(r.flagged && r.rebound > 1.3);

        let flat = vec![2.0; 10];
        assert!(!detect_overfitting(&hist(&flat, &flat), "az-de", &th).unwrap().flagged);
        assert!(detect_overfitting(&hist(&[1.0, 1.0], &[1.0, 1.0]), "az-de", &th).is_err());
    }

    #[test]
    fn history_csv_round_trip() {
        let mut h = hist(&[1.5, 0.1 + 0.2], &[2.0, 1.0 / 3.0]);
        h.push(2, "az-de", Split::Valid, Metric::Bleu, 12.25);
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,pair,split,metric,value\n1,az-de,train,loss,1.5\n"));
        assert_eq!(History::from_csv(&csv).unwrap(), h);
        assert_eq!(h.best_bleu("az-de"), Some((2, 12.25)));
        assert!(History::from_csv("nope").is_err());
    }

    #[test]
    fn strategy_names() {
        for s in [
            TrainingStrategy::Baseline,
            TrainingStrategy::Downweight,
            TrainingStrategy::Regularize,
        ] {
            assert_eq!(s.to_string().parse::<TrainingStrategy>().unwrap(), s);
        }
        assert!("x".parse::<TrainingStrategy>().is_err());
    }
}
