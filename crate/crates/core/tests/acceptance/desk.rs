//! Desk-scale runs on a synthetic family: bilingual, hierarchical under
//! Baseline and Downweight, and a zero-divergence copy control.
//!
//! `HIERNMT_DESK_SEEDS=1,2,3` picks the seeds.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use hiernmt::corpus::PairKey;
use hiernmt::experiment::{build_model, learn_vocab, load_corpora, model_rng, prepare_pairs, ExperimentConfig};
use hiernmt::training::{detect_overfitting, train, OverfitReport, TrainingStrategy};

use super::{ensure, Suite};

const BUDGET: Duration = Duration::from_secs(45 * 60);
const BILINGUAL_MAX_EPOCHS: usize = 50;
const BILINGUAL_PATIENCE: usize = 10;

pub fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

struct RunResult {
    best_low_bleu: f64,
    overfit: Option<OverfitReport>,
    secs: f64,
}

fn low_key(cfg: &ExperimentConfig) -> PairKey {
    cfg.pairs
        .iter()
        .find(|p| p.resource == hiernmt::corpus::ResourceClass::Low)
        .expect("desk config has a low-resource pair")
        .key()
}

fn execute(cfg: &ExperimentConfig) -> Result<RunResult, String> {
    let t0 = Instant::now();
    let corpora = load_corpora(cfg).map_err(|e| e.to_string())?;
    let vocab = learn_vocab(cfg, &corpora);
    let data = prepare_pairs(cfg, &corpora, &vocab).map_err(|e| e.to_string())?;
    let mut model = build_model(cfg, &vocab, &mut model_rng(cfg)).map_err(|e| e.to_string())?;
    let run = cfg.run_config();
    let out = train(
        model.as_mut(),
        &data,
        &cfg.enc_tree(),
        &cfg.dec_tree(),
        &vocab,
        &run,
        &mut |_, _| {},
    )
    .map_err(|e| e.to_string())?;
    let low = low_key(cfg);
    let best_low_bleu = out.best.get(&low).map_or(0.0, |b| b.bleu);
    let overfit = detect_overfitting(&out.history, &low.to_string(), &run.overfit).ok();
    Ok(RunResult {
        best_low_bleu,
        overfit,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn hierarchical(base: &ExperimentConfig, strategy: TrainingStrategy) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.run.strategy = strategy;
    cfg
}

/// The low-resource pair alone on a plain 3+3 model with its own vocabulary,
/// trained until validation BLEU stalls.
fn bilingual(base: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.run.max_epochs = BILINGUAL_MAX_EPOCHS;
    cfg.run.patience = Some(BILINGUAL_PATIENCE);
    let low = low_key(base);
    cfg.pairs.retain(|p| p.key() == low);
    cfg.trees.encoder = low.src.clone();
    cfg.trees.decoder = low.tgt.clone();
    cfg
}

fn copy_task(base: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = bilingual(base);
    if let Some(s) = cfg.synthetic.as_mut() {
        s.default_rate = 0.0;
        s.edge_rates.clear();
        s.suffixes.clear();
        s.swap_prob.clear();
    }
    cfg
}

struct SeedRuns {
    seed: u64,
    bilingual: RunResult,
    baseline: RunResult,
    downweight: RunResult,
    copy: RunResult,
}

fn describe(r: &Option<OverfitReport>) -> String {
    match r {
        Some(o) => format!(
            "min@{}/{} rebound {:.3}{}",
            o.min_valid_epoch,
            o.epochs,
            o.rebound,
            if o.flagged { " flagged" } else { "" }
        ),
        None => "too few epochs".into(),
    }
}

pub fn run(suite: &mut Suite) {
    let t0 = Instant::now();
    let base = match ExperimentConfig::load(&config_path()) {
        Ok(c) => c,
        Err(e) => {
            suite.report(
                "6",
                "desk-scale reproduction",
                t0.elapsed(),
                Err(format!("config: {e}")),
            );
            return;
        }
    };
    let seeds: Vec<u64> = std::env::var("HIERNMT_DESK_SEEDS")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_else(|| vec![1, 2, 3]);
    let mut runs = Vec::new();
    for &seed in &seeds {
        let scratch = match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => {
                suite.report(
                    "6",
                    "desk-scale reproduction",
                    t0.elapsed(),
                    Err(format!("tempdir: {e}")),
                );
                return;
            }
        };
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.output_dir = scratch.path().to_path_buf();
        let res = (|| -> Result<SeedRuns, String> {
            let bilingual = execute(&bilingual(&cfg))?;
            let baseline = execute(&hierarchical(&cfg, TrainingStrategy::Baseline))?;
            let downweight = execute(&hierarchical(&cfg, TrainingStrategy::Downweight))?;
            let copy = execute(&copy_task(&cfg))?;
            Ok(SeedRuns {
                seed,
                bilingual,
                baseline,
                downweight,
                copy,
            })
        })();
        match res {
            Ok(r) => {
                println!(
                    "      seed {}: bilingual {:.2} ({:.0}s) | hier baseline {:.2} {} ({:.0}s) | hier downweight {:.2} {} ({:.0}s) | copy {:.2} ({:.0}s)",
                    r.seed,
                    r.bilingual.best_low_bleu,
                    r.bilingual.secs,
                    r.baseline.best_low_bleu,
                    describe(&r.baseline.overfit),
                    r.baseline.secs,
                    r.downweight.best_low_bleu,
                    describe(&r.downweight.overfit),
                    r.downweight.secs,
                    r.copy.best_low_bleu,
                    r.copy.secs,
                );
                runs.push(r);
            }
            Err(e) => {
                suite.report(
                    "6",
                    "desk-scale reproduction",
                    t0.elapsed(),
                    Err(format!("seed {seed}: {e}")),
                );
                return;
            }
        }
    }
    let elapsed = t0.elapsed();
    let n = runs.len() as f64;
    let majority = (runs.len() * 2).div_ceil(3);

    let hier_mean = runs.iter().map(|r| r.baseline.best_low_bleu).sum::<f64>() / n;
    let bi_mean = runs.iter().map(|r| r.bilingual.best_low_bleu).sum::<f64>() / n;
    let a = ensure(hier_mean > bi_mean, || {
        format!("hierarchical {hier_mean:.2} vs bilingual {bi_mean:.2}")
    })
    .map(|_| {
        format!(
            "low-resource BLEU hierarchical {hier_mean:.2} > bilingual {bi_mean:.2} (mean of {} seeds)",
            runs.len()
        )
    });
    suite.report(
        "6a",
        "hierarchical beats bilingual on the low-resource pair",
        elapsed,
        a,
    );

    let flagged = runs
        .iter()
        .filter(|r| r.baseline.overfit.as_ref().is_some_and(|o| o.flagged))
        .count();
    let b = ensure(flagged >= majority, || {
        format!("flagged in {flagged} of {} seeds", runs.len())
    })
    .map(|_| format!("Baseline overfitting flagged in {flagged} of {} seeds", runs.len()));
    suite.report("6b", "Baseline strategy overfits the low-resource pair", elapsed, b);

    let cleared = runs
        .iter()
        .filter(|r| {
            r.downweight
                .overfit
                .as_ref()
                .is_some_and(|o| !o.flagged || o.rebound < 1.05)
        })
        .count();
    let dw_mean = runs.iter().map(|r| r.downweight.best_low_bleu).sum::<f64>() / n;
    let c = ensure(cleared >= majority, || format!("cleared in {cleared} of {} seeds", runs.len()))
        .and_then(|_| {
            ensure(dw_mean >= hier_mean, || format!("Downweight BLEU {dw_mean:.2} < Baseline {hier_mean:.2}"))
        })
        .map(|_| {
            format!(
                "flag cleared or rebound < 5% in {cleared} of {} seeds; low-resource BLEU {dw_mean:.2} >= Baseline {hier_mean:.2}",
                runs.len()
            )
        });
    suite.report("6c", "Downweight removes the overfitting", elapsed, c);

    let worst_copy = runs.iter().map(|r| r.copy.best_low_bleu).fold(f64::INFINITY, f64::min);
    let d = ensure(worst_copy > 90.0, || format!("copy BLEU {worst_copy:.2}"))
        .map(|_| format!("copy-task BLEU > 90 in every seed (lowest {worst_copy:.2})"));
    suite.report("6d", "copy-task capacity control", elapsed, d);

    let per_seed: Vec<f64> = runs
        .iter()
        .map(|r| r.bilingual.secs + r.baseline.secs + r.downweight.secs + r.copy.secs)
        .collect();
    let slowest = per_seed.iter().copied().fold(0.0, f64::max);
    let e = ensure(slowest < BUDGET.as_secs_f64(), || {
        format!("four runs took {slowest:.0}s")
    })
    .map(|_| {
        format!(
            "four runs per seed within 45 min (slowest seed {:.1} min)",
            slowest / 60.0
        )
    });
    suite.report("6e", "desk-scale budget", elapsed, e);
}
