use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use mimalloc::MiMalloc;
use serde::Serialize;

use hiernmt::corpus::{write_parallel, BpeVocab, PairKey, ResourceClass};
use hiernmt::evaluation::{comparison_report, evaluate_direction, scores_from_csv, scores_to_csv, EvalError};
use hiernmt::experiment::{
    build_model, learn_vocab, load_corpora, model_rng, prepare_pairs, synthesize, synthetic_paths, tree_report,
    ConfigError, ExperimentConfig,
};
use hiernmt::hier_model::{model_from_checkpoint, ModelMeta};
use hiernmt::numerics::Checkpoint;
use hiernmt::training::{detect_overfitting, train_from, History, ResumeState, TrainError, TrainingStrategy};
use hiernmt::transformer::ModelError;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

const LOCK_FILE: &str = ".hiernmt.lock";
const VOCAB_HASH: &str = "vocab_hash";

#[derive(Parser)]
#[command(name = "hiernmt", version, about = "Hierarchical multilingual NMT toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Language tree commands
    #[command(subcommand)]
    Tree(TreeCommand),
    /// Corpus commands
    #[command(subcommand)]
    Data(DataCommand),
    /// Vocabulary commands
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Train the configured model
    Train(TrainArgs),
    /// Score a checkpoint on the validation split of every supported pair
    Evaluate(EvaluateArgs),
    /// Compare model scores against bilingual scores
    Compare(CompareArgs),
}

#[derive(Subcommand)]
enum TreeCommand {
    /// Print the layer allocation and the full-sharing depths
    Check(ConfigArg),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write the synthetic corpora of the config to <output_dir>/data
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum VocabCommand {
    /// Learn the shared subword vocabulary
    Learn {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        merges: Option<usize>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config file
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    strategy: Option<TrainingStrategy>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Continue from <output_dir>/checkpoints/last.ckpt
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Restrict to these directions (`src-tgt`)
    #[arg(long)]
    direction: Vec<String>,
    /// Scores CSV path; defaults to <output_dir>/scores-<checkpoint>.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Config supplying the resource class of every direction
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    bilingual: PathBuf,
    /// `name=scores.csv`, repeatable
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// Report directory; defaults to <output_dir>/compare
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Train(t) => t.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                let _ = fs::write(&path, std::process::id().to_string());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Invalid(format!(
                "{} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn load_config(arg: &ConfigArg) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::load(&arg.config)?)
}

fn load_vocab(cfg: &ExperimentConfig) -> Result<BpeVocab, CliError> {
    let path = cfg.vocab_path();
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Invalid(format!("{}: {e} (run `hiernmt vocab learn` first)", path.display())))?;
    BpeVocab::from_file_string(&text).map_err(|e| CliError::Invalid(e.to_string()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Invalid(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn tree_check(arg: &ConfigArg) -> Result<(), CliError> {
    let cfg = load_config(arg)?;
    let (table, _) = tree_report(&cfg)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    pairs: Vec<ManifestPair>,
}

#[derive(Serialize)]
struct ManifestPair {
    src: String,
    tgt: String,
    resource: ResourceClass,
    size: usize,
    src_file: String,
    tgt_file: String,
}

fn data_synth(arg: &ConfigArg, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_config(arg)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpora = synthesize(&cfg)?;
    if corpora.is_empty() {
        return Err(CliError::Invalid("the config has no synthetic pairs".into()));
    }
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut manifest = Manifest {
        seed: cfg.seed,
        pairs: Vec::new(),
    };
    for c in &corpora {
        let key = c.key();
        write_parallel(c, &dir, &key.to_string()).map_err(|e| CliError::Io(e.to_string()))?;
        let (s, t) = synthetic_paths(&dir, &key);
        let name = |p: &Path| p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        manifest.pairs.push(ManifestPair {
            src: key.src.clone(),
            tgt: key.tgt.clone(),
            resource: c.resource,
            size: c.len(),
            src_file: name(&s),
            tgt_file: name(&t),
        });
        println!("{key}: {} pairs ({})", c.len(), c.resource);
    }
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write(&dir.join("manifest.toml"), text)
}

fn vocab_learn(arg: &ConfigArg, merges: Option<usize>) -> Result<(), CliError> {
    let mut cfg = load_config(arg)?;
    if let Some(m) = merges {
        cfg.vocab.merges = m;
    }
    let corpora = load_corpora(&cfg)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let vocab = learn_vocab(&cfg, &corpora);
    write(&cfg.vocab_path(), vocab.to_file_string())?;
    println!(
        "vocabulary: {} tokens, {} merges, hash {}",
        vocab.len(),
        vocab.merges().len(),
        vocab.hash()
    );
    Ok(())
}

fn checkpoint_meta(vocab: &BpeVocab, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert(VOCAB_HASH.to_string(), vocab.hash());
    for (k, v) in extra {
        m.insert(k.to_string(), v.clone());
    }
    m
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.strategy {
        cfg.run.strategy = s;
    }
    if let Some(e) = args.max_epochs {
        cfg.run.max_epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = args.batch_size {
        cfg.run.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.run.learning_rate = lr;
    }
    cfg.validate()?;
    let vocab = load_vocab(&cfg)?;
    let corpora = load_corpora(&cfg)?;
    let data = prepare_pairs(&cfg, &corpora, &vocab)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    let last_path = ckpt_dir.join("last.ckpt");
    let history_path = cfg.output_dir.join("history.csv");

    let mut model = build_model(&cfg, &vocab, &mut model_rng(&cfg))?;
    let mut resume = ResumeState::default();
    if args.resume {
        let ckpt = load_checkpoint(&last_path)?;
        match ckpt.metadata.get(VOCAB_HASH) {
            Some(h) if *h == vocab.hash() => {}
            _ => {
                return Err(CliError::Invalid(format!(
                    "cannot resume: {} was trained with a different vocabulary",
                    last_path.display()
                )))
            }
        }
        model
            .store_mut()
            .load_from(&ckpt.params)
            .map_err(|e| CliError::Invalid(format!("cannot resume: {e}")))?;
        let field = |k: &str| -> Result<usize, CliError> {
            ckpt.metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Invalid(format!("cannot resume: checkpoint lacks {k}")))
        };
        let text = fs::read_to_string(&history_path).map_err(io_err(&history_path))?;
        resume = ResumeState {
            next_epoch: field("epoch")? + 1,
            global_step: field("global_step")?,
            history: History::from_csv(&text)?,
        };
        info!("resuming at epoch {}", resume.next_epoch);
    }
    write(&cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    info!(
        "{} model, {} parameters, strategy {}",
        match cfg.architecture {
            hiernmt::experiment::Architecture::Hier => "hierarchical",
            hiernmt::experiment::Architecture::Full => "full-sharing",
        },
        model.num_params(),
        cfg.run.strategy
    );

    let mut history = resume.history.clone();
    let mut save_err: Option<CliError> = None;
    let mut on_epoch = |s: &hiernmt::training::EpochSummary, m: &dyn hiernmt::hier_model::NmtModel| {
        for (k, b) in &s.valid_bleu {
            info!(
                "epoch {} {k}: train loss {:.4} valid loss {:.4} bleu {:.2}",
                s.epoch, s.train_loss[k], s.valid_loss[k], b
            );
        }
        history.records.extend(s.records.iter().cloned());
        let meta = checkpoint_meta(
            &vocab,
            &[
                ("epoch", s.epoch.to_string()),
                ("global_step", s.global_step.to_string()),
            ],
        );
        let res = write(&history_path, history.to_csv()).and_then(|_| {
            fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
            m.to_checkpoint(meta)
                .save(&last_path)
                .map_err(|e| CliError::Io(e.to_string()))
        });
        if let Err(e) = res {
            save_err.get_or_insert(e);
        }
    };
    let outcome = train_from(
        model.as_mut(),
        &data,
        &cfg.enc_tree(),
        &cfg.dec_tree(),
        &vocab,
        &cfg.run_config(),
        resume,
        &mut on_epoch,
    )?;
    if let Some(e) = save_err {
        return Err(e);
    }
    write(&history_path, outcome.history.to_csv())?;
    for (key, best) in &outcome.best {
        let mut snapshot = build_model(&cfg, &vocab, &mut model_rng(&cfg))?;
        snapshot
            .store_mut()
            .load_from(&best.params)
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        let meta = checkpoint_meta(
            &vocab,
            &[
                ("pair", key.to_string()),
                ("epoch", best.epoch.to_string()),
                ("bleu", format!("{:.4}", best.bleu)),
            ],
        );
        let path = ckpt_dir.join(format!("best-{key}.ckpt"));
        snapshot
            .to_checkpoint(meta)
            .save(&path)
            .map_err(|e| CliError::Io(e.to_string()))?;
        println!(
            "{key}: best BLEU {:.2} at epoch {} -> {}",
            best.bleu,
            best.epoch,
            path.display()
        );
    }
    let mut report = String::from("pair,min_valid_epoch,epochs,rebound,train_still_decreasing,flagged\n");
    for pair in outcome.history.pairs() {
        match detect_overfitting(&outcome.history, &pair, &cfg.run.overfit) {
            Ok(r) => {
                report.push_str(&format!(
                    "{pair},{},{},{:.4},{},{}\n",
                    r.min_valid_epoch, r.epochs, r.rebound, r.train_still_decreasing, r.flagged
                ));
                if r.flagged {
                    println!(
                        "{pair}: overfitting (validation minimum at epoch {}, rebound {:.3})",
                        r.min_valid_epoch, r.rebound
                    );
                }
            }
            Err(e) => info!("{pair}: no overfitting verdict: {e}"),
        }
    }
    write(&cfg.output_dir.join("overfitting.csv"), report)?;
    println!(
        "trained {} epochs{}",
        outcome.epochs_run,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab = load_vocab(&cfg)?;
    if ckpt.metadata.get(VOCAB_HASH).is_some_and(|h| *h != vocab.hash()) {
        return Err(CliError::Invalid(
            "checkpoint was trained with a different vocabulary".into(),
        ));
    }
    let model = model_from_checkpoint(&ckpt)?;
    if model.meta().vocab_size != vocab.len() {
        return Err(CliError::Invalid(format!(
            "model vocabulary size {} differs from {}",
            model.meta().vocab_size,
            vocab.len()
        )));
    }
    let wanted: Vec<PairKey> = args
        .direction
        .iter()
        .map(|d| PairKey::parse(d).ok_or_else(|| CliError::Invalid(format!("bad direction {d}"))))
        .collect::<Result<_, _>>()?;
    let corpora = load_corpora(&cfg)?;
    let data = prepare_pairs(&cfg, &corpora, &vocab)?;
    let meta: ModelMeta = model.meta();
    let mut scores = BTreeMap::new();
    for pd in &data {
        if !meta.supports(&pd.key.src, &pd.key.tgt) || (!wanted.is_empty() && !wanted.contains(&pd.key)) {
            continue;
        }
        let b = evaluate_direction(model.as_ref(), &vocab, &pd.key, &pd.valid_text, cfg.run.eval_batch_size)?;
        println!("{}: BLEU {:.2}", pd.key, b.score);
        scores.insert(pd.key.to_string(), b.score);
    }
    if scores.is_empty() {
        return Err(CliError::Invalid(
            "the checkpoint supports none of the requested directions".into(),
        ));
    }
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args
            .checkpoint
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        cfg.output_dir.join(format!("scores-{stem}.csv"))
    });
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    write(&out, scores_to_csv(&scores))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    scores_from_csv(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let bilingual = read_scores(&args.bilingual)?;
    let mut models = Vec::new();
    for m in &args.models {
        let (name, path) = m
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("--model expects name=path, got {m}")))?;
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(CliError::Invalid(format!("bad model name {name:?}")));
        }
        models.push((name.to_string(), read_scores(Path::new(path))?));
    }
    let report = comparison_report(&bilingual, &models, &cfg.resources())?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("compare"));
    let _lock = DirLock::acquire(&dir)?;
    for (i, name) in report.model_names.iter().enumerate() {
        write(&dir.join(format!("comparison-{name}.csv")), report.to_csv(i))?;
    }
    let table = report.to_table();
    write(&dir.join("comparison.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Tree(TreeCommand::Check(c)) => tree_check(&c),
        Command::Data(DataCommand::Synth { config, seed }) => data_synth(&config, seed),
        Command::Vocab(VocabCommand::Learn { config, merges }) => vocab_learn(&config, merges),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
