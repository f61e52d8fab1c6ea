//! Finite-difference verification of every primitive, every loss, and the
//! fully composed model on a tiny configuration. Failures are report
//! entries, not errors, so the suite can also host negative controls.

use serde::Serialize;

use super::TrainError;
use crate::loss::{matrix_approx_loss, overall_loss, CmMode, LossConfig};
use crate::model::{
    estimate_category_cm, forward_query, Ablation, ModelConfig, ModelParams, ParamNodes,
};
use crate::numerics::rng::rng_from_seed;
use crate::numerics::{finite_diff_check, NodeId, NumericsError, Tape, Tensor};

const PRIMITIVE_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub component: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failed_components(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.component.as_str())
            .collect()
    }

    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn rand_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::rand_uniform(shape, lo, hi, &mut rng)
}

/// A tensor bounded away from zero, for kinked ops (ReLU, max).
fn kink_free_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut t = rand_tensor(shape, seed, -1.0, 1.0);
    for x in t.data_mut() {
        if x.abs() < 0.05 {
            *x += if *x >= 0.0 { 0.1 } else { -0.1 };
        }
    }
    t
}

fn push_entry<F>(entries: &mut Vec<CheckEntry>, name: &str, tol: f64, point: &Tensor, f: F)
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, NumericsError>,
{
    let entry = match finite_diff_check(&f, point, EPS) {
        Ok(err) => CheckEntry {
            component: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
            passed: err < tol,
        },
        Err(_) => CheckEntry {
            component: name.to_string(),
            max_rel_err: f64::INFINITY,
            tolerance: tol,
            passed: false,
        },
    };
    entries.push(entry);
}

fn primitive_entries(entries: &mut Vec<CheckEntry>, inject_bug: bool) {
    let w = rand_tensor(vec![4, 3], 100, -1.0, 1.0);
    let point = rand_tensor(vec![2, 4], 101, -1.0, 1.0);
    push_entry(entries, "matmul", PRIMITIVE_TOL, &point, move |tape, x| {
        let w = tape.constant(w.clone());
        let y = tape.matmul(x, w)?;
        tape.sum(y)
    });

    let w = rand_tensor(vec![3, 4], 102, -1.0, 1.0);
    let point = rand_tensor(vec![2, 4], 103, -1.0, 1.0);
    push_entry(entries, "matmul_trans_b", PRIMITIVE_TOL, &point, move |tape, x| {
        let w = tape.constant(w.clone());
        let y = tape.matmul_trans_b(x, w)?;
        tape.sum(y)
    });

    let w = rand_tensor(vec![3, 4, 5], 104, -0.5, 0.5);
    let b = rand_tensor(vec![1, 5], 105, -0.5, 0.5);
    let point = rand_tensor(vec![6, 4], 106, -1.0, 1.0);
    push_entry(entries, "conv1d_same(x)", PRIMITIVE_TOL, &point, move |tape, x| {
        let w = tape.constant(w.clone());
        let b = tape.constant(b.clone());
        let y = tape.conv1d_same(x, w, b)?;
        tape.sum(y)
    });

    let x = rand_tensor(vec![6, 4], 107, -1.0, 1.0);
    let b = rand_tensor(vec![1, 5], 108, -0.5, 0.5);
    let point = rand_tensor(vec![3, 4, 5], 109, -0.5, 0.5);
    push_entry(entries, "conv1d_same(w)", PRIMITIVE_TOL, &point, move |tape, wt| {
        let x = tape.constant(x.clone());
        let b = tape.constant(b.clone());
        let y = tape.conv1d_same(x, wt, b)?;
        tape.sum(y)
    });

    // ReLU is checked only away from its kink
    let point = kink_free_tensor(vec![3, 5], 110);
    push_entry(entries, "relu", PRIMITIVE_TOL, &point, move |tape, x| {
        let mut y = tape.relu(x)?;
        if inject_bug {
            // deliberate 1.5x gradient corruption; the suite must flag it
            y = tape.grad_scale(y, 1.5)?;
        }
        tape.sum(y)
    });

    for (name, op) in [
        ("sigmoid", 0usize),
        ("softplus", 1),
    ] {
        let point = rand_tensor(vec![3, 5], 111 + op as u64, -2.0, 2.0);
        push_entry(entries, name, PRIMITIVE_TOL, &point, move |tape, x| {
            let y = match op {
                0 => tape.sigmoid(x)?,
                _ => tape.softplus(x)?,
            };
            tape.sum(y)
        });
    }

    // softmax composed with a constant weighting so the gradient is nonzero
    let w = rand_tensor(vec![3, 5], 113, -1.0, 1.0);
    let point = rand_tensor(vec![3, 5], 114, -2.0, 2.0);
    push_entry(entries, "row_softmax", PRIMITIVE_TOL, &point, move |tape, x| {
        let s = tape.row_softmax(x)?;
        let w = tape.constant(w.clone());
        let y = tape.mul(s, w)?;
        tape.sum(y)
    });

    let w = rand_tensor(vec![3, 5], 115, -1.0, 1.0);
    let point = rand_tensor(vec![3, 5], 116, -2.0, 2.0);
    let valid = [true, true, false, true, false];
    push_entry(entries, "row_softmax_masked", PRIMITIVE_TOL, &point, move |tape, x| {
        let s = tape.row_softmax_masked(x, &valid)?;
        let w = tape.constant(w.clone());
        let y = tape.mul(s, w)?;
        tape.sum(y)
    });

    let w = rand_tensor(vec![3, 4], 117, -1.0, 1.0);
    let point = rand_tensor(vec![3, 4], 118, 0.3, 2.0);
    push_entry(entries, "row_l2_norm", PRIMITIVE_TOL, &point, move |tape, x| {
        let n = tape.row_l2_norm(x)?;
        let w = tape.constant(w.clone());
        let y = tape.mul(n, w)?;
        tape.sum(y)
    });

    for axis in [0usize, 1] {
        let point = kink_free_tensor(vec![4, 5], 119 + axis as u64);
        push_entry(
            entries,
            &format!("max_axis({axis})"),
            PRIMITIVE_TOL,
            &point,
            move |tape, x| {
                let m = tape.max_axis(x, axis)?;
                tape.sum(m)
            },
        );
    }

    let other = rand_tensor(vec![3, 2], 121, -1.0, 1.0);
    let point = rand_tensor(vec![3, 4], 122, -1.0, 1.0);
    push_entry(entries, "concat_cols", PRIMITIVE_TOL, &point, move |tape, x| {
        let o = tape.constant(other.clone());
        let y = tape.concat_cols(&[x, o])?;
        let z = tape.mul(y, y)?;
        tape.sum(z)
    });

    let point = rand_tensor(vec![3, 6], 123, -1.0, 1.0);
    push_entry(entries, "slice_cols", PRIMITIVE_TOL, &point, move |tape, x| {
        let y = tape.slice_cols(x, 1, 3)?;
        let z = tape.mul(y, y)?;
        tape.sum(z)
    });

    let point = rand_tensor(vec![2, 6], 124, -1.0, 1.0);
    push_entry(entries, "reshape", PRIMITIVE_TOL, &point, move |tape, x| {
        let y = tape.reshape(x, vec![3, 4])?;
        let z = tape.mul(y, y)?;
        tape.sum(z)
    });

    let other = rand_tensor(vec![3, 4], 125, -1.0, 1.0);
    let point = rand_tensor(vec![3, 4], 126, -1.0, 1.0);
    for (name, which) in [("add", 0usize), ("sub", 1), ("mul", 2)] {
        let other = other.clone();
        push_entry(entries, name, PRIMITIVE_TOL, &point, move |tape, x| {
            let o = tape.constant(other.clone());
            let y = match which {
                0 => tape.add(x, o)?,
                1 => tape.sub(x, o)?,
                _ => tape.mul(x, o)?,
            };
            let z = tape.mul(y, y)?;
            tape.sum(z)
        });
    }

    let row = rand_tensor(vec![1, 4], 127, -1.0, 1.0);
    let point = rand_tensor(vec![3, 4], 128, -1.0, 1.0);
    push_entry(entries, "add_row", PRIMITIVE_TOL, &point, move |tape, x| {
        let r = tape.constant(row.clone());
        let y = tape.add_row(x, r)?;
        let z = tape.mul(y, y)?;
        tape.sum(z)
    });

    let point = rand_tensor(vec![3, 4], 129, -1.0, 1.0);
    push_entry(entries, "scale", PRIMITIVE_TOL, &point, move |tape, x| {
        let y = tape.scale(x, -2.5)?;
        let z = tape.mul(y, y)?;
        tape.sum(z)
    });

    let point = rand_tensor(vec![3, 4], 130, -1.0, 1.0);
    push_entry(entries, "mean", PRIMITIVE_TOL, &point, move |tape, x| {
        let y = tape.mul(x, x)?;
        tape.mean(y)
    });

    let ids = [2usize, 0, 3, 2];
    let point = rand_tensor(vec![4, 3], 131, -1.0, 1.0);
    push_entry(entries, "gather", PRIMITIVE_TOL, &point, move |tape, x| {
        let y = tape.gather(x, &ids)?;
        let z = tape.mul(y, y)?;
        tape.sum(z)
    });

    let point = rand_tensor(vec![4, 3], 132, -1.0, 1.0);
    push_entry(entries, "dropout", PRIMITIVE_TOL, &point, move |tape, x| {
        let mut rng = rng_from_seed(77);
        let y = tape.dropout(x, 0.4, true, &mut rng)?;
        let z = tape.mul(y, y)?;
        tape.sum(z)
    });

    let targets = [1.0, 0.0, 1.0, 0.0, 1.0];
    let point = rand_tensor(vec![1, 5], 133, -3.0, 3.0);
    push_entry(entries, "sigmoid_cross_entropy", PRIMITIVE_TOL, &point, move |tape, x| {
        tape.sigmoid_cross_entropy(x, &targets, false)
    });
}

fn loss_entries(entries: &mut Vec<CheckEntry>) {
    for mode in [CmMode::Literal, CmMode::Shifted] {
        let c = 4;
        let mut cm = rand_tensor(vec![c, c], 140, 0.0, 1.0);
        for i in 0..c {
            for j in 0..i {
                let v = cm.at2(i, j);
                cm.data_mut()[j * c + i] = v;
            }
            cm.data_mut()[i * c + i] = 1.0;
        }
        let point = rand_tensor(vec![c, c], 141, -0.9, 0.9);
        push_entry(
            entries,
            &format!("matrix_approx_loss({})", mode.label()),
            PRIMITIVE_TOL,
            &point,
            move |tape, x| {
                matrix_approx_loss(tape, x, &cm, mode).map_err(|_| NumericsError::EmptyGraph)
            },
        );
    }
}

/// Differentiate the overall loss of the composed model with respect to
/// one named parameter, all others held constant.
fn model_entry(
    entries: &mut Vec<CheckEntry>,
    params: &ModelParams,
    cm: &Tensor,
    name: &str,
) {
    let cfg = params.cfg.clone();
    let tokens = [2usize, 5, 7, 3, 0, 0, 0, 0, 0, 0];
    let targets: Vec<f64> = (0..cfg.num_categories)
        .map(|c| if c % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    let loss_cfg = LossConfig::default();
    let named = params.named();
    let point = (*named.iter().find(|(n, _)| n == name).unwrap().1).clone();
    let params = params.clone();
    let cm = cm.clone();
    let target_name = name.to_string();
    push_entry(
        entries,
        &format!("model.{name}"),
        MODEL_TOL,
        &point,
        move |tape, x| {
            let mut ids = Vec::new();
            let mut names = Vec::new();
            for (n, t) in params.named() {
                if n == target_name {
                    ids.push(x);
                } else {
                    ids.push(tape.constant((*t).clone()));
                }
                names.push(n);
            }
            let nodes = ParamNodes { ids, names };
            let mut rng = rng_from_seed(0);
            let trace = forward_query(
                tape,
                &nodes,
                &cfg,
                &tokens,
                Ablation::JointPlusCm,
                false,
                0.0,
                &mut rng,
            )
            .map_err(|_| NumericsError::EmptyGraph)?;
            let l_pc = tape.sigmoid_cross_entropy(trace.logits, &targets, false)?;
            let cat_value = if target_name == "cat_emb" {
                tape.value(x).clone()
            } else {
                (*params.cat_emb).clone()
            };
            let cm_hat = estimate_category_cm(tape, &nodes, &cfg, &cat_value)
                .map_err(|_| NumericsError::EmptyGraph)?;
            let l_cm = matrix_approx_loss(tape, cm_hat, &cm, loss_cfg.cm_mode)
                .map_err(|_| NumericsError::EmptyGraph)?;
            overall_loss(tape, l_pc, Some(l_cm), &loss_cfg)
                .map_err(|_| NumericsError::EmptyGraph)
        },
    );
}

/// Run the full verification suite on the tiny configuration.
pub fn gradient_check_suite(inject_bug: bool) -> Result<CheckReport, TrainError> {
    let mut entries = Vec::new();
    primitive_entries(&mut entries, inject_bug);
    loss_entries(&mut entries);

    let cfg = ModelConfig::tiny();
    let mut rng = rng_from_seed(55);
    let mut params = ModelParams::init(&cfg, &mut rng)?;
    // zero-initialized biases put ReLU pre-activations exactly on the kink
    // (PAD positions see bias alone), where finite differences are invalid;
    // check at a generic point instead
    for (i, (_, slot)) in params.named_mut().into_iter().enumerate() {
        let shape = slot.shape().to_vec();
        *slot = std::sync::Arc::new(rand_tensor(shape, 200 + i as u64, -0.3, 0.3));
    }
    let c = cfg.num_categories;
    let mut cm_data = vec![0.2; c * c];
    for i in 0..c {
        cm_data[i * c + i] = 1.0;
    }
    let cm = Tensor::new(vec![c, c], cm_data)?;
    for (name, _) in params.named() {
        model_entry(&mut entries, &params, &cm, &name);
    }
    Ok(CheckReport { entries })
}
