//! Bias-corrected Adam over the model's named parameter list.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment buffers aligned to [`ModelParams::named`] order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One Adam update. `grads` is aligned to the named-parameter order; the
/// PAD row of the word-embedding table is excluded from the update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    let emb_dim = params.cfg.emb_dim;
    let named = params.named_mut();
    assert_eq!(named.len(), grads.len(), "gradient list misaligned");
    assert_eq!(named.len(), state.m.len(), "optimizer state misaligned");

    for ((name, _), g) in named.iter().zip(grads) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);

    for (i, (name, tensor)) in named.into_iter().enumerate() {
        let g = &grads[i];
        assert_eq!(g.len(), tensor.len(), "gradient shape misaligned for {name}");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        // untouched parameters (zero grad, zero moments) need no write;
        // this also keeps gated-off parameters bit-identical
        if g.iter().all(|&x| x == 0.0)
            && m.iter().all(|&x| x == 0.0)
            && v.iter().all(|&x| x == 0.0)
        {
            continue;
        }
        let skip = if name == "word_emb" { emb_dim } else { 0 };
        let data = Arc::make_mut(tensor).data_mut();
        for j in skip..g.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
