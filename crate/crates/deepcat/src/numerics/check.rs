//! Finite-difference verification of reverse-mode gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::NumericsError;

/// Builds a scalar-valued graph from a single differentiable input leaf.
pub trait ScalarFn {
    fn build(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId, NumericsError>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, NumericsError>,
{
    fn build(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId, NumericsError> {
        self(tape, input)
    }
}

fn eval<F: ScalarFn + ?Sized>(f: &F, point: &Tensor) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f.build(&mut tape, x)?;
    tape.value(out).item()
}

/// Compare the analytic gradient of `f` at `point` against central finite
/// differences. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must be deterministic; this is verified by evaluating it twice and
/// demanding bit-identical results.
pub fn finite_diff_check<F: ScalarFn + ?Sized>(
    f: &F,
    point: &Tensor,
    eps: f64,
) -> Result<f64, NumericsError> {
    if eps <= 0.0 {
        return Err(NumericsError::InvalidShape(format!(
            "finite_diff_check requires eps > 0, got {eps}"
        )));
    }
    let v1 = eval(f, point)?;
    let v2 = eval(f, point)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(NumericsError::NonDeterministic);
    }

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f.build(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .ok_or(NumericsError::EmptyGraph)?
        .to_vec();

    let mut max_rel = 0.0f64;
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + eps;
        let plus = eval(f, &Tensor::new(point.shape().to_vec(), data.clone())?)?;
        data[i] = orig - eps;
        let minus = eval(f, &Tensor::new(point.shape().to_vec(), data.clone())?)?;
        data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
