//! TF-IDF one-vs-rest linear baseline: per-class hinge-loss SGD over
//! L2-normalized TF-IDF vectors.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, QueryRecord, Vocabulary, PAD_ID, UNK_ID};
use crate::numerics::rng::{derive_seed, rng_from_seed, stream};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("cannot vectorize an empty token list")]
    EmptyQuery,
    #[error("label {label} outside the {num_classes}-class taxonomy")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("vector/label counts differ: {vectors} vs {labels}")]
    LengthMismatch { vectors: usize, labels: usize },
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
}

/// Sparse TF-IDF feature vector: (vocab id, weight), ids strictly
/// increasing.
pub type SparseVec = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvrConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub reg: f64,
    pub seed: u64,
}

impl OvrConfig {
    pub fn with_defaults(seed: u64) -> Self {
        OvrConfig {
            epochs: 10,
            learning_rate: 0.1,
            reg: 1e-4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.epochs == 0 || self.learning_rate <= 0.0 || self.reg < 0.0 {
            return Err(BaselineError::InvalidConfig(
                "epochs >= 1, learning_rate > 0, reg >= 0 required".into(),
            ));
        }
        Ok(())
    }
}

/// The trained baseline: IDF table plus |C| linear classifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfidfModel {
    /// indexed by vocabulary id; PAD/UNK rows present but unused
    pub idf: Vec<f64>,
    /// per-class weight vectors over the vocabulary
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// classes that had no positive training example (trained all-negative)
    pub zero_positive_classes: Vec<usize>,
}

/// IDF from training records only: ln((1+N)/(1+df)) + 1 per vocabulary
/// token, with df the number of records containing the token.
pub fn build_idf(records: &[QueryRecord], vocab: &Vocabulary) -> Vec<f64> {
    let n = records.len() as f64;
    let mut df: HashMap<usize, u64> = HashMap::new();
    for r in records {
        let ids: BTreeSet<usize> = tokenize(&r.raw_text)
            .iter()
            .map(|t| vocab.id_of(t))
            .filter(|&id| id != UNK_ID && id != PAD_ID)
            .collect();
        for id in ids {
            *df.entry(id).or_insert(0) += 1;
        }
    }
    (0..vocab.len())
        .map(|id| {
            let d = df.get(&id).copied().unwrap_or(0) as f64;
            ((1.0 + n) / (1.0 + d)).ln() + 1.0
        })
        .collect()
}

/// TF-IDF vector for one token list. tf = raw count / query length; tokens
/// outside the vocabulary contribute nothing; the result is L2-normalized.
pub fn tfidf_vectorize(
    tokens: &[String],
    vocab: &Vocabulary,
    idf: &[f64],
) -> Result<SparseVec, BaselineError> {
    if tokens.is_empty() {
        return Err(BaselineError::EmptyQuery);
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for t in tokens {
        let id = vocab.id_of(t);
        if id != UNK_ID && id != PAD_ID {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    let len = tokens.len() as f64;
    let mut features: SparseVec = counts
        .into_iter()
        .map(|(id, c)| (id, (c as f64 / len) * idf[id]))
        .collect();
    features.sort_by_key(|&(id, _)| id);
    let norm = features.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for f in &mut features {
            f.1 /= norm;
        }
    }
    Ok(features)
}

pub fn vectorize_records(
    records: &[QueryRecord],
    vocab: &Vocabulary,
    idf: &[f64],
) -> Result<Vec<SparseVec>, BaselineError> {
    records
        .iter()
        .map(|r| tfidf_vectorize(&tokenize(&r.raw_text), vocab, idf))
        .collect()
}

fn margin(w: &[f64], b: f64, x: &SparseVec) -> f64 {
    b + x.iter().map(|&(id, v)| w[id] * v).sum::<f64>()
}

/// Regularized hinge objective of one classifier on one example, and its
/// subgradient with respect to (w restricted to x's support, b). Exposed
/// for finite-difference verification.
pub fn hinge_loss_grad(
    w: &[f64],
    b: f64,
    x: &SparseVec,
    y: f64,
    reg: f64,
) -> (f64, Vec<(usize, f64)>, f64) {
    let m = y * margin(w, b, x);
    let hinge = (1.0 - m).max(0.0);
    let loss = hinge + 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>();
    let active = if m < 1.0 { 1.0 } else { 0.0 };
    let grad_w = x
        .iter()
        .map(|&(id, v)| (id, reg * w[id] - active * y * v))
        .collect();
    let grad_b = -active * y;
    (loss, grad_w, grad_b)
}

/// Train |C| independent binary hinge classifiers with seeded SGD. Each
/// class derives its own seed, so classes can train in parallel without
/// affecting determinism.
pub fn train_ovr_linear(
    vectors: &[SparseVec],
    labels: &[BTreeSet<usize>],
    num_classes: usize,
    vocab_size: usize,
    idf: Vec<f64>,
    cfg: &OvrConfig,
) -> Result<TfidfModel, BaselineError> {
    cfg.validate()?;
    if vectors.len() != labels.len() {
        return Err(BaselineError::LengthMismatch {
            vectors: vectors.len(),
            labels: labels.len(),
        });
    }
    for l in labels {
        if let Some(&bad) = l.iter().find(|&&c| c >= num_classes) {
            return Err(BaselineError::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
    }
    let root = derive_seed(cfg.seed, stream::BASELINE);

    let per_class: Vec<(Vec<f64>, f64, bool)> = (0..num_classes)
        .into_par_iter()
        .map(|class| {
            let mut w = vec![0.0; vocab_size];
            let mut b = 0.0;
            let mut rng = rng_from_seed(derive_seed(root, class as u64));
            let has_positive = labels.iter().any(|l| l.contains(&class));
            let mut order: Vec<usize> = (0..vectors.len()).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for &i in &order {
                    let y = if labels[i].contains(&class) { 1.0 } else { -1.0 };
                    let x = &vectors[i];
                    let m = y * margin(&w, b, x);
                    // L2 decay on the full vector, hinge term on the support
                    for v in &mut w {
                        *v *= 1.0 - cfg.learning_rate * cfg.reg;
                    }
                    if m < 1.0 {
                        for &(id, v) in x {
                            w[id] += cfg.learning_rate * y * v;
                        }
                        b += cfg.learning_rate * y;
                    }
                }
            }
            (w, b, has_positive)
        })
        .collect();

    let mut weights = Vec::with_capacity(num_classes);
    let mut bias = Vec::with_capacity(num_classes);
    let mut zero_positive_classes = Vec::new();
    for (class, (w, b, has_positive)) in per_class.into_iter().enumerate() {
        weights.push(w);
        bias.push(b);
        if !has_positive {
            zero_positive_classes.push(class);
        }
    }
    Ok(TfidfModel {
        idf,
        weights,
        bias,
        zero_positive_classes,
    })
}

/// Raw margins for one vector, one per class.
pub fn predict_margins(model: &TfidfModel, x: &SparseVec) -> Vec<f64> {
    model
        .weights
        .iter()
        .zip(&model.bias)
        .map(|(w, &b)| margin(w, b, x))
        .collect()
}
