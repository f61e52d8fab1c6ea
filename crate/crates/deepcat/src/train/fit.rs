//! The training loop: seeded shuffling, mini-batch gradient accumulation
//! (parallel over examples, reduced in fixed order), the per-step CM term,
//! per-epoch validation, and best-checkpoint selection.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::{TrainConfig, TrainError};
use crate::corpus::{encode_query, QueryRecord, Vocabulary};
use crate::eval::{macro_micro_f1, Prediction};
use crate::loss::{matrix_approx_loss, sigmoid_cross_entropy};
use crate::model::{
    estimate_category_cm, forward_query, ModelConfig, ModelParams, ParamNodes,
};
use crate::numerics::rng::{derive_seed, rng_from_seed, stream};
use crate::numerics::{Tape, Tensor};

/// Examples are processed in parallel chunks of this fixed size so that
/// gradient reduction order never depends on the thread count.
const GRAD_CHUNK: usize = 8;

/// One encoded training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<f64>,
    pub gold: BTreeSet<usize>,
}

/// Encode queries against a fixed vocabulary and category count.
pub fn prepare_examples(
    records: &[QueryRecord],
    vocab: &Vocabulary,
    num_categories: usize,
) -> Result<Vec<Example>, TrainError> {
    records
        .iter()
        .map(|r| {
            let tokens = encode_query(&r.raw_text, vocab)?;
            let mut targets = vec![0.0; num_categories];
            for &c in &r.categories {
                if c >= num_categories {
                    return Err(TrainError::InvalidConfig(format!(
                        "label {c} outside the {num_categories}-category taxonomy"
                    )));
                }
                targets[c] = 1.0;
            }
            Ok(Example {
                tokens,
                targets,
                gold: r.categories.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_micro_f1: f64,
    pub valid_macro_f1: f64,
}

pub struct FitResult {
    /// parameters of the epoch with the best validation Micro-F1
    pub params: ModelParams,
    /// parameters after the final epoch
    pub final_params: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_micro_f1: f64,
}

fn zero_grads(params: &ModelParams) -> Vec<Vec<f64>> {
    params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect()
}

/// Forward + backward of the classification loss for one example; returns
/// the loss value and per-parameter gradients.
fn example_grads(
    params: &ModelParams,
    cfg: &TrainConfig,
    ex: &Example,
    dropout_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let mut rng = rng_from_seed(dropout_seed);
    let trace = forward_query(
        &mut tape,
        &nodes,
        &params.cfg,
        &ex.tokens,
        cfg.ablation,
        true,
        cfg.dropout,
        &mut rng,
    )?;
    let loss = sigmoid_cross_entropy(&mut tape, trace.logits, &ex.targets)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads = nodes
        .ids
        .iter()
        .zip(params.named())
        .map(|(&id, (_, t))| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();
    Ok((value, grads))
}

/// Gradient of lambda1 * L_CM with respect to the category embeddings,
/// computed once per step from the current parameters.
fn cm_grads(
    params: &ModelParams,
    cfg: &TrainConfig,
    cm: &Tensor,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let cm_hat = estimate_category_cm(&mut tape, &nodes, &params.cfg, &params.cat_emb)?;
    let l_cm = matrix_approx_loss(&mut tape, cm_hat, cm, cfg.loss_cfg.cm_mode)?;
    let value = tape.value(l_cm).item()?;
    let scaled = tape.scale(l_cm, cfg.loss_cfg.lambda1)?;
    tape.backward(scaled)?;
    let grads = nodes
        .ids
        .iter()
        .zip(params.named())
        .map(|(&id, (_, t))| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();
    Ok((value, grads))
}

/// Inference-mode logits for a set of examples, in order.
pub fn score_examples(
    params: &ModelParams,
    ablation: crate::model::Ablation,
    examples: &[Example],
) -> Result<Vec<Prediction>, TrainError> {
    examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let nodes = ParamNodes::register(&mut tape, params);
            let mut rng = rng_from_seed(0); // unused: dropout is off
            let trace = forward_query(
                &mut tape,
                &nodes,
                &params.cfg,
                &ex.tokens,
                ablation,
                false,
                0.0,
                &mut rng,
            )?;
            Ok(Prediction::from_scores(tape.value(trace.logits).data().to_vec()))
        })
        .collect()
}

/// Train on `train`, selecting the checkpoint with the best validation
/// Micro-F1. `cm` is the normalized co-occurrence target; it is required
/// exactly when the ablation enables the CM loss and lambda1 > 0.
pub fn fit(
    train: &[QueryRecord],
    valid: &[QueryRecord],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    cm: Option<&Tensor>,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    let use_cm = cfg.ablation.uses_cm_loss() && cfg.loss_cfg.lambda1 > 0.0;
    if use_cm && cm.is_none() {
        return Err(TrainError::InvalidConfig(
            "joint_plus_cm with lambda1 > 0 needs a co-occurrence target".into(),
        ));
    }

    let c = model_cfg.num_categories;
    let train_ex = prepare_examples(train, vocab, c)?;
    let valid_ex = prepare_examples(valid, vocab, c)?;
    let valid_gold: Vec<BTreeSet<usize>> = valid_ex.iter().map(|e| e.gold.clone()).collect();

    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, stream::INIT));
    let mut params = ModelParams::init(model_cfg, &mut init_rng)?;
    let mut state = AdamState::new(&params);

    let shuffle_root = derive_seed(cfg.seed, stream::SHUFFLE);
    let dropout_root = derive_seed(cfg.seed, stream::DROPOUT);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        let mut shuffle_rng = rng_from_seed(derive_seed(shuffle_root, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let epoch_dropout = derive_seed(dropout_root, epoch as u64);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            // parallel over fixed-size chunks; each chunk accumulates in
            // example order and chunks reduce in order, so results do not
            // depend on the thread count
            let chunk_results: Vec<Result<(f64, Vec<Vec<f64>>), TrainError>> = batch
                .par_chunks(GRAD_CHUNK)
                .enumerate()
                .map(|(ci, chunk)| {
                    let mut acc = zero_grads(&params);
                    let mut ce = 0.0;
                    for (off, &idx) in chunk.iter().enumerate() {
                        let pos = (ci * GRAD_CHUNK + off) as u64;
                        let seed =
                            derive_seed(epoch_dropout, (step as u64) << 20 | pos);
                        let (v, g) = example_grads(&params, cfg, &train_ex[idx], seed)?;
                        ce += v;
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                    }
                    Ok((ce, acc))
                })
                .collect();

            let b = batch.len() as f64;
            let ce_scale = cfg.loss_cfg.lambda2 / b;
            let mut grads = zero_grads(&params);
            let mut ce_sum = 0.0;
            for r in chunk_results {
                let (ce, acc) = r?;
                ce_sum += ce;
                for (g, a) in grads.iter_mut().zip(&acc) {
                    for (x, y) in g.iter_mut().zip(a) {
                        *x += ce_scale * y;
                    }
                }
            }
            let mut step_loss = cfg.loss_cfg.lambda2 * ce_sum / b;

            if use_cm {
                let target = cm.expect("checked above");
                let (l_cm, g_cm) = cm_grads(&params, cfg, target)?;
                step_loss += cfg.loss_cfg.lambda1 * l_cm;
                for (g, a) in grads.iter_mut().zip(&g_cm) {
                    for (x, y) in g.iter_mut().zip(a) {
                        *x += y;
                    }
                }
            }

            if !step_loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            adam_step(&mut params, &grads, &mut state, cfg.learning_rate)?;
            loss_sum += step_loss;
            steps += 1;
        }

        let preds = score_examples(&params, cfg.ablation, &valid_ex)?;
        let (macro_f1, micro_f1) = macro_micro_f1(&preds, &valid_gold, c, 0.5)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / steps as f64,
            valid_micro_f1: micro_f1,
            valid_macro_f1: macro_f1,
        });
        let better = match &best {
            None => true,
            Some((_, best_f1, _)) => micro_f1 > *best_f1,
        };
        if better {
            best = Some((epoch, micro_f1, params.clone()));
        }
    }

    let (best_epoch, best_valid_micro_f1, best_params) = best.expect("epochs >= 1");
    Ok(FitResult {
        params: best_params,
        final_params: params,
        log,
        best_epoch,
        best_valid_micro_f1,
    })
}
