//! End-to-end plumbing shared by the CLI subcommands and the integration
//! suite: corpus files -> splits -> training statistics -> fit -> report.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{Context, Result};

use crate::baseline::{
    build_idf, predict_margins, tfidf_vectorize, train_ovr_linear, OvrConfig, TfidfModel,
};
use crate::corpus::{
    build_category_cooccurrence, build_vocab, cosine_normalize, read_corpus, tokenize,
    QueryRecord, Splits, Taxonomy, Vocabulary,
};
use crate::eval::{evaluate_predictions, EvalReport, Prediction};
use crate::model::{Ablation, ModelConfig, ModelParams};
use crate::train::{fit, prepare_examples, score_examples, FitResult, TrainConfig};
use crate::numerics::Tensor;

pub fn load_corpus_file(path: &Path) -> Result<Vec<QueryRecord>> {
    let f = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    let records = read_corpus(BufReader::new(f))
        .with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(records)
}

pub fn load_taxonomy_file(path: &Path) -> Result<Taxonomy> {
    let json = std::fs::read_to_string(path)
        .with_context(|| format!("opening taxonomy {}", path.display()))?;
    let taxonomy = Taxonomy::from_json(&json)
        .with_context(|| format!("parsing taxonomy {}", path.display()))?;
    taxonomy.validate()?;
    Ok(taxonomy)
}

/// Everything derived from the training split alone.
pub struct TrainStats {
    pub vocab: Vocabulary,
    /// per-class query counts over the training split
    pub class_freqs: Vec<u64>,
    /// cosine-normalized co-occurrence target
    pub cm: Tensor,
}

pub fn train_statistics(
    train: &[QueryRecord],
    num_categories: usize,
    min_freq: u64,
) -> Result<TrainStats> {
    let vocab = build_vocab(train, min_freq)?;
    let mut class_freqs = vec![0u64; num_categories];
    for r in train {
        for &c in &r.categories {
            class_freqs[c] += 1;
        }
    }
    let counts = build_category_cooccurrence(train, num_categories)?;
    let cm = cosine_normalize(&counts, num_categories)?.normalized_tensor();
    Ok(TrainStats {
        vocab,
        class_freqs,
        cm,
    })
}

pub struct TrainOutcome {
    pub fit: FitResult,
    pub stats: TrainStats,
    pub model_cfg: ModelConfig,
}

/// Width overrides for the model; the paper defaults are 100/100.
#[derive(Debug, Clone, Copy)]
pub struct ModelDims {
    pub emb_dim: usize,
    pub d_model: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            emb_dim: 100,
            d_model: 100,
        }
    }
}

/// Fit the model on prepared splits with statistics from the train split.
pub fn train_pipeline(
    splits: &Splits,
    taxonomy: &Taxonomy,
    train_cfg: &TrainConfig,
    min_freq: u64,
    dims: ModelDims,
) -> Result<TrainOutcome> {
    let num_categories = taxonomy.num_leaves();
    let stats = train_statistics(&splits.train, num_categories, min_freq)?;
    let mut model_cfg = ModelConfig::with_defaults(stats.vocab.len(), num_categories);
    model_cfg.emb_dim = dims.emb_dim;
    model_cfg.d_model = dims.d_model;
    let cm = if train_cfg.ablation.uses_cm_loss() {
        Some(&stats.cm)
    } else {
        None
    };
    let fit_result = fit(
        &splits.train,
        &splits.valid,
        &stats.vocab,
        &model_cfg,
        train_cfg,
        cm,
    )?;
    Ok(TrainOutcome {
        fit: fit_result,
        stats,
        model_cfg,
    })
}

/// Score the test split with a trained model and assemble the report.
pub fn evaluate_params(
    params: &ModelParams,
    ablation: Ablation,
    test: &[QueryRecord],
    vocab: &Vocabulary,
    class_freqs: &[u64],
    threshold: f64,
    minority_m: usize,
) -> Result<EvalReport> {
    let num_categories = params.cfg.num_categories;
    let examples = prepare_examples(test, vocab, num_categories)?;
    let preds = score_examples(params, ablation, &examples)?;
    let gold: Vec<BTreeSet<usize>> = examples.into_iter().map(|e| e.gold).collect();
    let buckets: Vec<_> = test.iter().map(|r| r.bucket()).collect();
    let report = evaluate_predictions(
        &preds,
        &gold,
        &buckets,
        class_freqs,
        num_categories,
        threshold,
        minority_m,
    )?;
    Ok(report)
}

/// Train and evaluate the TF-IDF one-vs-rest baseline on the same splits
/// and vocabulary.
pub fn baseline_pipeline(
    splits: &Splits,
    vocab: &Vocabulary,
    num_categories: usize,
    class_freqs: &[u64],
    seed: u64,
    threshold: f64,
    minority_m: usize,
) -> Result<(TfidfModel, EvalReport)> {
    let idf = build_idf(&splits.train, vocab);
    let vectors = splits
        .train
        .iter()
        .map(|r| tfidf_vectorize(&tokenize(&r.raw_text), vocab, &idf))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<BTreeSet<usize>> = splits.train.iter().map(|r| r.categories.clone()).collect();
    let cfg = OvrConfig::with_defaults(seed);
    let model = train_ovr_linear(&vectors, &labels, num_categories, vocab.len(), idf, &cfg)?;

    let preds = splits
        .test
        .iter()
        .map(|r| {
            let x = tfidf_vectorize(&tokenize(&r.raw_text), vocab, &model.idf)?;
            Ok(Prediction::from_scores(predict_margins(&model, &x)))
        })
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<BTreeSet<usize>> = splits.test.iter().map(|r| r.categories.clone()).collect();
    let buckets: Vec<_> = splits.test.iter().map(|r| r.bucket()).collect();
    let report = evaluate_predictions(
        &preds,
        &gold,
        &buckets,
        class_freqs,
        num_categories,
        threshold,
        minority_m,
    )?;
    Ok((model, report))
}
