//! Training objectives: sigmoid cross-entropy for category classification,
//! the matrix-approximation loss between estimated and empirical category
//! co-occurrence, and their weighted combination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NodeId, NumericsError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("loss weights must satisfy lambda1 + lambda2 > 0")]
    ZeroWeights,
    #[error("co-occurrence target entries must lie in [0, 1]")]
    TargetOutOfRange,
}

/// Sign convention for the matrix-approximation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmMode {
    /// mean of log(1 + exp(cm_hat * cm)), the printed form
    Literal,
    /// mean of log(1 + exp(-cm_hat * (2 cm - 1))): a logistic surrogate
    /// that rewards estimated similarity where co-occurrence is high and
    /// dissimilarity where it is low
    Shifted,
}

impl CmMode {
    pub fn label(self) -> &'static str {
        match self {
            CmMode::Literal => "literal",
            CmMode::Shifted => "shifted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// weight of the matrix-approximation loss
    pub lambda1: f64,
    /// weight of the classification loss
    pub lambda2: f64,
    pub cm_mode: CmMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.1,
            lambda2: 1.0,
            cm_mode: CmMode::Shifted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(LossError::ZeroWeights);
        }
        Ok(())
    }
}

/// Summed sigmoid cross-entropy of a logit vector against binary targets.
pub fn sigmoid_cross_entropy(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[f64],
) -> Result<NodeId, LossError> {
    Ok(tape.sigmoid_cross_entropy(logits, targets, false)?)
}

/// The printed single-term form, kept behind a diagnostic entry point.
pub fn sigmoid_cross_entropy_positive_only(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[f64],
) -> Result<NodeId, LossError> {
    Ok(tape.sigmoid_cross_entropy(logits, targets, true)?)
}

/// Matrix-approximation loss between the estimated matrix node and the
/// empirical normalized co-occurrence matrix.
pub fn matrix_approx_loss(
    tape: &mut Tape,
    cm_hat: NodeId,
    cm: &Tensor,
    mode: CmMode,
) -> Result<NodeId, LossError> {
    if tape.value(cm_hat).shape() != cm.shape() {
        return Err(LossError::Numerics(NumericsError::ShapeMismatch {
            op: "matrix_approx_loss".into(),
            detail: format!("{:?} vs {:?}", tape.value(cm_hat).shape(), cm.shape()),
        }));
    }
    if cm.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(LossError::TargetOutOfRange);
    }
    let target = match mode {
        CmMode::Literal => cm.clone(),
        CmMode::Shifted => {
            // -(2 cm - 1): folds the sign flip into the constant factor
            let data = cm.data().iter().map(|&v| -(2.0 * v - 1.0)).collect();
            Tensor::new(cm.shape().to_vec(), data)?
        }
    };
    let target = tape.constant(target);
    let prod = tape.mul(cm_hat, target)?;
    let sp = tape.softplus(prod)?;
    Ok(tape.mean(sp)?)
}

/// lambda1 * l_cm + lambda2 * l_pc. `l_cm` is absent when the
/// category-category loss is gated off.
pub fn overall_loss(
    tape: &mut Tape,
    l_pc: NodeId,
    l_cm: Option<NodeId>,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let pc = tape.scale(l_pc, cfg.lambda2)?;
    match l_cm {
        Some(cm) => {
            let cm = tape.scale(cm, cfg.lambda1)?;
            Ok(tape.add(pc, cm)?)
        }
        None => Ok(pc),
    }
}
