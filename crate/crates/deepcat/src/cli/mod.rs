//! Command-line driver: gen-data, train, eval, predict, ablate, report.
//!
//! Every artifact embeds the resolved config and seeds that produced it,
//! so any output can be reproduced from its own echo block. On failure the
//! partially written outputs of the current command are removed.

pub mod pipeline;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    encode_query, generate_synthetic_corpus, split_corpus, write_corpus, GeneratorConfig,
    SplitConfig,
};
use crate::eval::EvalReport;
use crate::loss::{CmMode, LossConfig};
use crate::model::Ablation;
use crate::train::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Example, TrainConfig,
    CHECKPOINT_VERSION,
};
use pipeline::{
    evaluate_params, load_corpus_file, load_taxonomy_file, train_pipeline, train_statistics,
};

#[derive(Parser)]
#[command(name = "deepcat", version, about = "Query-to-category model: data generation, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic imbalanced corpus and taxonomy
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus training log
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out test split
    Eval(EvalArgs),
    /// Rank categories for queries from a file or standard input
    Predict(PredictArgs),
    /// Run the three ablation configurations and the lambda1 sweep
    Ablate(AblateArgs),
    /// Render JSON reports as aligned plain-text tables
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    WordOnly,
    Joint,
    JointPlusCm,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Ablation {
        match a {
            AblationArg::WordOnly => Ablation::WordOnly,
            AblationArg::Joint => Ablation::Joint,
            AblationArg::JointPlusCm => Ablation::JointPlusCm,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CmModeArg {
    Literal,
    Shifted,
}

impl From<CmModeArg> for CmMode {
    fn from(m: CmModeArg) -> CmMode {
        match m {
            CmModeArg::Literal => CmMode::Literal,
            CmModeArg::Shifted => CmMode::Shifted,
        }
    }
}

/// Removes registered output paths unless disarmed, so failed commands
/// leave no partial artifacts behind.
struct OutputGuard {
    paths: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        OutputGuard {
            paths: Vec::new(),
            armed: true,
        }
    }

    fn track(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    fn disarm(mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

pub fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Report(args) => run_report(args),
    }
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Directory for corpus.jsonl and taxonomy.json
    #[arg(long)]
    out_dir: PathBuf,
    /// Root seed; all randomness derives from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    num_queries: usize,
    #[arg(long, default_value_t = 33)]
    num_l1: usize,
    #[arg(long, default_value_t = 200)]
    num_leaves: usize,
    #[arg(long, default_value_t = 2000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1.2)]
    zipf_exponent: f64,
    /// Probability that extra labels come from the primary label's L1 group
    #[arg(long, default_value_t = 0.6)]
    correlation: f64,
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        num_l1: args.num_l1,
        num_leaves: args.num_leaves,
        vocab_size: args.vocab_size,
        num_queries: args.num_queries,
        zipf_exponent: args.zipf_exponent,
        correlation_strength: args.correlation,
        seed: args.seed,
    };
    let (records, taxonomy) = generate_synthetic_corpus(&cfg)?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let corpus_path = args.out_dir.join("corpus.jsonl");
    let taxonomy_path = args.out_dir.join("taxonomy.json");
    let mut guard = OutputGuard::new();
    guard.track(&corpus_path);
    guard.track(&taxonomy_path);

    let f = fs::File::create(&corpus_path)?;
    write_corpus(BufWriter::new(f), &records, Some(serde_json::to_value(&cfg)?))?;
    fs::write(&taxonomy_path, taxonomy.to_json()?)?;
    guard.disarm();

    println!(
        "wrote {} queries over {} leaf categories to {}",
        records.len(),
        taxonomy.num_leaves(),
        args.out_dir.display()
    );
    Ok(())
}

/// Optional config-file counterpart of the train flags. Flags win over the
/// file; the file wins over built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    seed: Option<u64>,
    ablation: Option<Ablation>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    cm_mode: Option<CmMode>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    dropout: Option<f64>,
    min_freq: Option<u64>,
    test_per_bucket: Option<usize>,
    valid_frac: Option<f64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Training log path [default: <out>.log.jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation mode [default: joint-plus-cm]
    #[arg(long)]
    ablation: Option<AblationArg>,
    /// Weight of the CM loss [default: 0.1]
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the classification loss [default: 1.0]
    #[arg(long)]
    lambda2: Option<f64>,
    /// CM loss sign convention [default: shifted]
    #[arg(long)]
    cm_mode: Option<CmModeArg>,
    /// Training epochs [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Mini-batch size [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Dropout rate [default: 0.5]
    #[arg(long)]
    dropout: Option<f64>,
    /// Vocabulary frequency floor [default: 2]
    #[arg(long)]
    min_freq: Option<u64>,
    /// Test queries per traffic bucket [default: 200]
    #[arg(long)]
    test_per_bucket: Option<usize>,
    /// Validation fraction of the non-test pool [default: 0.25]
    #[arg(long)]
    valid_frac: Option<f64>,
    /// Word/category embedding width
    #[arg(long, default_value_t = 100)]
    emb_dim: usize,
    /// Attention working width (must be divisible by the 10 heads)
    #[arg(long, default_value_t = 100)]
    d_model: usize,
}

struct ResolvedTrain {
    train_cfg: TrainConfig,
    split_cfg: SplitConfig,
}

fn resolve_train_flags(args: &TrainArgs) -> Result<ResolvedTrain> {
    let file: TrainFileConfig = match &args.config {
        Some(path) => {
            let s = fs::read_to_string(path)
                .with_context(|| format!("opening config {}", path.display()))?;
            serde_json::from_str(&s)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainFileConfig::default(),
    };
    let defaults = TrainConfig::with_defaults(0, Ablation::JointPlusCm);
    let split_defaults = SplitConfig::default();
    let train_cfg = TrainConfig {
        learning_rate: args
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(defaults.learning_rate),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        dropout: args.dropout.or(file.dropout).unwrap_or(defaults.dropout),
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        loss_cfg: LossConfig {
            lambda1: args.lambda1.or(file.lambda1).unwrap_or(defaults.loss_cfg.lambda1),
            lambda2: args.lambda2.or(file.lambda2).unwrap_or(defaults.loss_cfg.lambda2),
            cm_mode: args
                .cm_mode
                .map(CmMode::from)
                .or(file.cm_mode)
                .unwrap_or(defaults.loss_cfg.cm_mode),
        },
        ablation: args
            .ablation
            .map(Ablation::from)
            .or(file.ablation)
            .unwrap_or(defaults.ablation),
    };
    let split_cfg = SplitConfig {
        test_per_bucket: args
            .test_per_bucket
            .or(file.test_per_bucket)
            .unwrap_or(split_defaults.test_per_bucket),
        valid_frac: args.valid_frac.or(file.valid_frac).unwrap_or(split_defaults.valid_frac),
        min_freq: args.min_freq.or(file.min_freq).unwrap_or(split_defaults.min_freq),
    };
    Ok(ResolvedTrain { train_cfg, split_cfg })
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config: &'a TrainConfig,
    split: &'a SplitConfig,
    vocab_hash: &'a str,
    taxonomy_hash: &'a str,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let ResolvedTrain { train_cfg, split_cfg } = resolve_train_flags(&args)?;
    train_cfg.validate()?;
    let records = load_corpus_file(&args.corpus)?;
    let taxonomy = load_taxonomy_file(&args.taxonomy)?;
    let splits = split_corpus(&records, train_cfg.seed, &split_cfg)?;
    let dims = pipeline::ModelDims {
        emb_dim: args.emb_dim,
        d_model: args.d_model,
    };
    let outcome = train_pipeline(&splits, &taxonomy, &train_cfg, split_cfg.min_freq, dims)?;

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    let mut guard = OutputGuard::new();
    guard.track(&args.out);
    guard.track(&log_path);

    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        train_cfg: train_cfg.clone(),
        model_cfg: outcome.model_cfg.clone(),
        split: split_cfg,
        vocab_hash: outcome.stats.vocab.hash(),
        taxonomy_hash: taxonomy.hash(),
        best_epoch: outcome.fit.best_epoch,
        valid_micro_f1: outcome.fit.best_valid_micro_f1,
    };
    let ckpt = Checkpoint::new(&outcome.fit.params, meta, &outcome.stats.vocab);
    save_checkpoint(&args.out, &ckpt)?;

    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let header = LogHeader {
        config: &train_cfg,
        split: &split_cfg,
        vocab_hash: &ckpt.meta.vocab_hash,
        taxonomy_hash: &ckpt.meta.taxonomy_hash,
    };
    writeln!(log, "{}", serde_json::to_string(&header)?)?;
    for entry in &outcome.fit.log {
        writeln!(log, "{}", serde_json::to_string(entry)?)?;
    }
    log.flush()?;
    guard.disarm();

    println!(
        "trained {} for {} epochs; best epoch {} with validation micro-F1 {:.4}",
        train_cfg.ablation.label(),
        train_cfg.epochs,
        outcome.fit.best_epoch,
        outcome.fit.best_valid_micro_f1
    );
    println!("checkpoint: {}", args.out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    /// JSON report output path
    #[arg(long)]
    out: PathBuf,
    /// CSV companion path [default: <out>.csv]
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Sigmoid decision threshold for set-valued F1
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Number of least-frequent classes in the minority report
    #[arg(long, default_value_t = 8)]
    minority_m: usize,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    config: CheckpointMeta,
    report: EvalReport,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let records = load_corpus_file(&args.corpus)?;
    let taxonomy = load_taxonomy_file(&args.taxonomy)?;

    // rebuild the exact training-time splits and statistics from the
    // checkpoint's embedded seeds, then verify the hashes match
    let splits = split_corpus(&records, ckpt.meta.train_cfg.seed, &ckpt.meta.split)?;
    let stats = train_statistics(
        &splits.train,
        taxonomy.num_leaves(),
        ckpt.meta.split.min_freq,
    )?;
    ckpt.verify_hashes(&stats.vocab.hash(), &taxonomy.hash())?;
    let params = ckpt.params()?;

    let report = evaluate_params(
        &params,
        ckpt.meta.train_cfg.ablation,
        &splits.test,
        &stats.vocab,
        &stats.class_freqs,
        args.threshold,
        args.minority_m,
    )?;

    let csv_path = args.csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut guard = OutputGuard::new();
    guard.track(&args.out);
    guard.track(&csv_path);
    let file = ReportFile {
        config: ckpt.meta.clone(),
        report: report.clone(),
    };
    fs::write(&args.out, serde_json::to_string_pretty(&file)?)?;
    fs::write(&csv_path, report.to_csv())?;
    guard.disarm();

    println!("{}", render_report(&report));
    println!("report: {}", args.out.display());
    Ok(())
}

#[derive(clap::Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    /// Query file, one query per line [default: standard input]
    #[arg(long)]
    input: Option<PathBuf>,
    /// Ranked categories printed per query
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let taxonomy = load_taxonomy_file(&args.taxonomy)?;
    if ckpt.meta.taxonomy_hash != taxonomy.hash() {
        bail!("checkpoint was trained against a different taxonomy");
    }
    let params = ckpt.params()?;
    let ablation = ckpt.meta.train_cfg.ablation;

    let queries: Vec<String> = match &args.input {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("opening {}", path.display()))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => std::io::stdin()
            .lock()
            .lines()
            .collect::<Result<_, _>>()?,
    };

    for query in queries.iter().filter(|q| !q.trim().is_empty()) {
        let tokens = encode_query(query, &ckpt.vocab)?;
        let example = Example {
            tokens,
            targets: vec![0.0; params.cfg.num_categories],
            gold: BTreeSet::new(),
        };
        let preds = crate::train::score_examples(&params, ablation, &[example])?;
        let pred = &preds[0];
        for (rank, &cat) in pred.ranked.iter().take(args.top_k).enumerate() {
            let name = taxonomy.leaf_name(cat).unwrap_or("?");
            println!("{query}\t{}\t{name}\t{:.6}", rank + 1, pred.scores[cat]);
        }
    }
    Ok(())
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    /// Directory for ablate.json
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training epochs per configuration
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Weight of the CM loss in the joint-plus-cm row [default: 0.1]
    #[arg(long, default_value_t = 0.1)]
    lambda1: f64,
    /// Weight of the classification loss
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    /// CM loss sign convention
    #[arg(long, value_enum, default_value_t = CmModeArg::Shifted)]
    cm_mode: CmModeArg,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Sigmoid decision threshold for set-valued F1
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 8)]
    minority_m: usize,
    #[arg(long, default_value_t = 2)]
    min_freq: u64,
    #[arg(long, default_value_t = 200)]
    test_per_bucket: usize,
    #[arg(long, default_value_t = 0.25)]
    valid_frac: f64,
    /// Word/category embedding width
    #[arg(long, default_value_t = 100)]
    emb_dim: usize,
    /// Attention working width (must be divisible by the 10 heads)
    #[arg(long, default_value_t = 100)]
    d_model: usize,
}

#[derive(Serialize, Deserialize)]
struct AblateRow {
    label: String,
    ablation: Ablation,
    lambda1: f64,
    best_epoch: usize,
    valid_micro_f1: f64,
    report: EvalReport,
}

#[derive(Serialize, Deserialize)]
struct AblateFile {
    seed: u64,
    epochs: usize,
    split: SplitConfig,
    /// the three ablation configurations
    rows: Vec<AblateRow>,
    /// the lambda1 sweep, all joint_plus_cm
    sweep: Vec<AblateRow>,
    /// whether the lambda1 = 0 sweep row reproduced the joint row exactly
    lambda0_matches_joint: bool,
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let records = load_corpus_file(&args.corpus)?;
    let taxonomy = load_taxonomy_file(&args.taxonomy)?;
    let split_cfg = SplitConfig {
        test_per_bucket: args.test_per_bucket,
        valid_frac: args.valid_frac,
        min_freq: args.min_freq,
    };
    let splits = split_corpus(&records, args.seed, &split_cfg)?;

    let base_cfg = |ablation: Ablation, lambda1: f64| TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        dropout: args.dropout,
        epochs: args.epochs,
        seed: args.seed,
        loss_cfg: LossConfig {
            lambda1,
            lambda2: args.lambda2,
            cm_mode: args.cm_mode.into(),
        },
        ablation,
    };

    let dims = pipeline::ModelDims {
        emb_dim: args.emb_dim,
        d_model: args.d_model,
    };
    let run_one = |label: &str, cfg: &TrainConfig| -> Result<AblateRow> {
        let outcome = train_pipeline(&splits, &taxonomy, cfg, split_cfg.min_freq, dims)?;
        let report = evaluate_params(
            &outcome.fit.params,
            cfg.ablation,
            &splits.test,
            &outcome.stats.vocab,
            &outcome.stats.class_freqs,
            args.threshold,
            args.minority_m,
        )?;
        eprintln!(
            "{label}: best epoch {} valid micro-F1 {:.4}",
            outcome.fit.best_epoch, outcome.fit.best_valid_micro_f1
        );
        Ok(AblateRow {
            label: label.to_string(),
            ablation: cfg.ablation,
            lambda1: cfg.loss_cfg.lambda1,
            best_epoch: outcome.fit.best_epoch,
            valid_micro_f1: outcome.fit.best_valid_micro_f1,
            report,
        })
    };

    let mut rows = Vec::new();
    for ablation in [Ablation::WordOnly, Ablation::Joint, Ablation::JointPlusCm] {
        let lambda1 = if ablation.uses_cm_loss() { args.lambda1 } else { 0.0 };
        rows.push(run_one(ablation.label(), &base_cfg(ablation, lambda1))?);
    }

    let mut sweep = Vec::new();
    for lambda1 in [0.0, 0.01, 0.1, 1.0] {
        let label = format!("lambda1={lambda1}");
        sweep.push(run_one(&label, &base_cfg(Ablation::JointPlusCm, lambda1))?);
    }

    let joint = serde_json::to_string(&rows[1].report)?;
    let lambda0 = serde_json::to_string(&sweep[0].report)?;
    let lambda0_matches_joint = joint == lambda0;

    fs::create_dir_all(&args.out_dir)?;
    let out_path = args.out_dir.join("ablate.json");
    let mut guard = OutputGuard::new();
    guard.track(&out_path);
    let file = AblateFile {
        seed: args.seed,
        epochs: args.epochs,
        split: split_cfg,
        rows,
        sweep,
        lambda0_matches_joint,
    };
    fs::write(&out_path, serde_json::to_string_pretty(&file)?)?;
    guard.disarm();

    println!("{}", render_ablate(&file));
    println!("details: {}", out_path.display());
    Ok(())
}

#[derive(clap::Args)]
struct ReportArgs {
    /// One or more report or ablate JSON files
    inputs: Vec<PathBuf>,
}

fn run_report(args: ReportArgs) -> Result<()> {
    if args.inputs.is_empty() {
        bail!("no input files given");
    }
    for path in &args.inputs {
        let s = fs::read_to_string(path)
            .with_context(|| format!("opening {}", path.display()))?;
        println!("== {} ==", path.display());
        if let Ok(ablate) = serde_json::from_str::<AblateFile>(&s) {
            println!("{}", render_ablate(&ablate));
        } else if let Ok(report) = serde_json::from_str::<ReportFile>(&s) {
            println!("{}", render_report(&report.report));
        } else {
            bail!("{} is neither an evaluation report nor an ablate file", path.display());
        }
    }
    Ok(())
}

fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>10} {:>10}\n",
        "metric@K", "precision", "recall", "f1", "map"
    ));
    for m in &report.at_k {
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            format!("@{}", m.k),
            m.precision,
            m.recall,
            m.f1,
            m.map
        ));
    }
    out.push_str(&format!(
        "macro-F1 {:.4}  micro-F1 {:.4}  minority macro-F1 {:.4}\n",
        report.macro_f1, report.micro_f1, report.minority_macro_f1
    ));
    let buckets: Vec<String> = report
        .bucket_f1_at_3
        .iter()
        .map(|(b, v)| format!("{b} {v:.4}"))
        .collect();
    out.push_str(&format!("F1@3 by bucket: {}", buckets.join("  ")));
    out
}

fn ablate_table_rows(rows: &[AblateRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let map5 = r
            .report
            .at_k
            .iter()
            .find(|m| m.k == 5)
            .map(|m| m.map)
            .unwrap_or(0.0);
        let tail = r.report.bucket_f1_at_3.get("tail").copied().unwrap_or(0.0);
        out.push_str(&format!(
            "{:<16} {:>8} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
            r.label,
            r.lambda1,
            r.report.macro_f1,
            r.report.micro_f1,
            map5,
            tail,
            r.report.minority_macro_f1
        ));
    }
    out
}

fn render_ablate(file: &AblateFile) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "configuration", "lambda1", "macro-F1", "micro-F1", "MAP@5", "tailF1@3", "minority"
    ));
    out.push_str(&ablate_table_rows(&file.rows));
    out.push_str("lambda1 sweep (joint_plus_cm):\n");
    out.push_str(&ablate_table_rows(&file.sweep));
    out.push_str(&format!(
        "lambda1=0 reproduces joint exactly: {}",
        file.lambda0_matches_joint
    ));
    out
}
