//! Reverse-mode differentiation over a per-step operation tape.
//!
//! A [`Tape`] records every forward primitive as a node. `backward` walks the
//! nodes in reverse insertion order (which is a topological order by
//! construction) and accumulates gradients into every node that requires
//! them. Parameters enter the tape as shared leaves so that many tapes can
//! reference the same parameter storage without copying.

use std::sync::Arc;

use rand::Rng;

use super::tensor::Tensor;
use super::NumericsError;

pub type NodeId = usize;

/// Sigmoid with the usual numerically safe split.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

/// Operation record. Attributes computed during the forward pass (argmax
/// indices, dropout masks) are stored here for the backward pass.
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulTransB(NodeId, NodeId),
    /// x: [n, c_in], w: [k, c_in, c_out], b: [1, c_out]; zero same-padding.
    Conv1dSame {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    /// Row softmax over columns flagged valid; invalid columns emit 0 and
    /// are excluded from the normalization.
    RowSoftmax {
        x: NodeId,
        valid: Vec<bool>,
    },
    RowL2Norm(NodeId),
    /// axis 0: column-wise max -> [1, c]; axis 1: row-wise max -> [r, 1].
    /// Gradient routes to the first maximizing index.
    MaxAxis {
        x: NodeId,
        axis: usize,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    /// a: [r, c] plus b: [1, c] broadcast over rows.
    AddRow {
        a: NodeId,
        b: NodeId,
    },
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum(NodeId),
    Mean(NodeId),
    Dropout {
        x: NodeId,
        keep_mask: Vec<bool>,
        keep: f64,
    },
    /// Row gather from an embedding table.
    Gather {
        x: NodeId,
        ids: Vec<usize>,
    },
    /// Summed sigmoid cross-entropy against fixed binary targets.
    /// `positive_only` keeps only the -t·log σ(s) term (diagnostic mode).
    SigmoidCe {
        logits: NodeId,
        targets: Vec<f64>,
        positive_only: bool,
    },
    /// Identity forward, gradient multiplied by `factor`. A factor other
    /// than 1 deliberately corrupts the gradient; used as the negative
    /// control in the gradient-check suite.
    GradScale {
        x: NodeId,
        factor: f64,
    },
}

struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id].value.tensor()
    }

    /// Gradient buffer of a node after `backward`, if it required one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Register an owned leaf that participates in differentiation.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push_node(Op::Leaf, Value::Owned(t), true)
    }

    /// Register a shared parameter leaf (differentiated, not copied).
    pub fn param(&mut self, t: Arc<Tensor>) -> NodeId {
        self.push_node(Op::Leaf, Value::Shared(t), true)
    }

    /// Register a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_node(Op::Leaf, Value::Owned(t), false)
    }

    fn push_node(&mut self, op: Op, value: Value, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn push_op(&mut self, op: Op, out: Tensor, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(op, Value::Owned(out), rg)
    }

    fn want_matrix(&self, id: NodeId, ctx: &str) -> Result<&Tensor, NumericsError> {
        let t = self.value(id);
        if !t.is_matrix() {
            return Err(NumericsError::ShapeMismatch {
                op: ctx.to_string(),
                detail: format!("expected rank-2 tensor, got shape {:?}", t.shape()),
            });
        }
        Ok(t)
    }

    // ---- forward primitives -------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.want_matrix(a, "matmul")?, self.want_matrix(b, "matmul")?);
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::from_op(vec![m, n], out)?;
        Ok(self.push_op(Op::MatMul(a, b), out, &[a, b]))
    }

    /// a · bᵀ with a: [m, k], b: [n, k].
    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (
            self.want_matrix(a, "matmul_trans_b")?,
            self.want_matrix(b, "matmul_trans_b")?,
        );
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_trans_b", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ra = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let rb = &db[j * k..(j + 1) * k];
                out[i * n + j] = dot(ra, rb);
            }
        }
        let out = Tensor::from_op(vec![m, n], out)?;
        Ok(self.push_op(Op::MatMulTransB(a, b), out, &[a, b]))
    }

    /// 1-D convolution over the row axis with zero same-padding.
    /// x: [n, c_in], w: [k, c_in, c_out] (k odd), b: [1, c_out].
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let tx = self.want_matrix(x, "conv1d_same")?;
        let tw = self.value(w);
        let tb = self.want_matrix(b, "conv1d_same")?;
        if tw.shape().len() != 3 || tw.shape()[0] % 2 == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "conv1d_same".into(),
                detail: format!("kernel must be [k, c_in, c_out] with odd k, got {:?}", tw.shape()),
            });
        }
        let (n, cin) = (tx.rows(), tx.cols());
        let (k, wcin, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wcin != cin || tb.rows() != 1 || tb.cols() != cout {
            return Err(NumericsError::ShapeMismatch {
                op: "conv1d_same".into(),
                detail: format!(
                    "x {:?}, w {:?}, b {:?}",
                    tx.shape(),
                    tw.shape(),
                    tb.shape()
                ),
            });
        }
        let half = k / 2;
        let (dx, dw, db) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; n * cout];
        for t in 0..n {
            let row = &mut out[t * cout..(t + 1) * cout];
            row.copy_from_slice(db);
            for dk in 0..k {
                let src = t as isize + dk as isize - half as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let xr = &dx[src as usize * cin..(src as usize + 1) * cin];
                let wk = &dw[dk * cin * cout..(dk + 1) * cin * cout];
                for (i, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wr = &wk[i * cout..(i + 1) * cout];
                    for (o, &wv) in wr.iter().enumerate() {
                        row[o] += xv * wv;
                    }
                }
            }
        }
        let out = Tensor::from_op(vec![n, cout], out)?;
        Ok(self.push_op(Op::Conv1dSame { x, w, b }, out, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_op(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Relu(x), out, &[x]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::from_op(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Sigmoid(x), out, &[x]))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| softplus(v)).collect();
        let out = Tensor::from_op(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Softplus(x), out, &[x]))
    }

    /// Row softmax over all columns.
    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let cols = self.want_matrix(x, "row_softmax")?.cols();
        self.row_softmax_masked(x, &vec![true; cols])
    }

    /// Row softmax restricted to columns flagged valid.
    pub fn row_softmax_masked(&mut self, x: NodeId, valid: &[bool]) -> Result<NodeId, NumericsError> {
        let t = self.want_matrix(x, "row_softmax")?;
        let (r, c) = (t.rows(), t.cols());
        if valid.len() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "row_softmax".into(),
                detail: format!("mask of length {} for {} columns", valid.len(), c),
            });
        }
        if !valid.iter().any(|&v| v) {
            return Err(NumericsError::EmptySoftmax);
        }
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let m = row
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                if valid[j] {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let out = Tensor::from_op(vec![r, c], out)?;
        Ok(self.push_op(
            Op::RowSoftmax {
                x,
                valid: valid.to_vec(),
            },
            out,
            &[x],
        ))
    }

    /// Row-wise L2 normalization; all-zero rows map to all-zero rows.
    pub fn row_l2_norm(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.want_matrix(x, "row_l2_norm")?;
        let (r, c) = (t.rows(), t.cols());
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                for j in 0..c {
                    out[i * c + j] = row[j] / n;
                }
            }
        }
        let out = Tensor::from_op(vec![r, c], out)?;
        Ok(self.push_op(Op::RowL2Norm(x), out, &[x]))
    }

    /// Max over an axis of a rank-2 tensor. Ties go to the lowest index.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let t = self.want_matrix(x, "max_axis")?;
        let (r, c) = (t.rows(), t.cols());
        let d = t.data();
        let (out, argmax, shape) = match axis {
            0 => {
                let mut out = vec![f64::NEG_INFINITY; c];
                let mut arg = vec![0usize; c];
                for i in 0..r {
                    for j in 0..c {
                        let v = d[i * c + j];
                        if v > out[j] {
                            out[j] = v;
                            arg[j] = i;
                        }
                    }
                }
                (out, arg, vec![1, c])
            }
            1 => {
                let mut out = vec![f64::NEG_INFINITY; r];
                let mut arg = vec![0usize; r];
                for i in 0..r {
                    for j in 0..c {
                        let v = d[i * c + j];
                        if v > out[i] {
                            out[i] = v;
                            arg[i] = j;
                        }
                    }
                }
                (out, arg, vec![r, 1])
            }
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op: "max_axis".into(),
                    detail: format!("axis {axis} out of range for rank-2 tensor"),
                })
            }
        };
        let out = Tensor::from_op(shape, out)?;
        Ok(self.push_op(Op::MaxAxis { x, axis, argmax }, out, &[x]))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols".into(),
                detail: "no inputs".into(),
            });
        }
        let r = self.want_matrix(inputs[0], "concat_cols")?.rows();
        let mut total = 0;
        for &id in inputs {
            let t = self.want_matrix(id, "concat_cols")?;
            if t.rows() != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols".into(),
                    detail: format!("row counts differ: {} vs {}", r, t.rows()),
                });
            }
            total += t.cols();
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &id in inputs {
            let t = self.value(id);
            let c = t.cols();
            for i in 0..r {
                out[i * total + off..i * total + off + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let out = Tensor::from_op(vec![r, total], out)?;
        Ok(self.push_op(Op::ConcatCols(inputs.to_vec()), out, inputs))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let t = self.want_matrix(x, "slice_cols")?;
        let (r, c) = (t.rows(), t.cols());
        if start + len > c {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols".into(),
                detail: format!("slice {start}..{} of {c} columns", start + len),
            });
        }
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_op(vec![r, len], out)?;
        Ok(self.push_op(Op::SliceCols { x, start, len }, out, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        let want: usize = shape.iter().product();
        if want != t.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape".into(),
                detail: format!("{:?} -> {:?}", t.shape(), shape),
            });
        }
        let out = Tensor::from_op(shape, t.data().to_vec())?;
        Ok(self.push_op(Op::Reshape(x), out, &[x]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let out = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(Op::Mul(a, b), out, &[a, b]))
    }

    fn elementwise(
        &self,
        op: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_op(ta.shape().to_vec(), data)
    }

    /// a: [r, c] plus a [1, c] row bias.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.want_matrix(a, "add_row")?, self.want_matrix(b, "add_row")?);
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = da[i * c + j] + db[j];
            }
        }
        let out = Tensor::from_op(vec![r, c], out)?;
        Ok(self.push_op(Op::AddRow { a, b }, out, &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::from_op(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Scale { x, factor }, out, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        let out = Tensor::from_op(vec![1, 1], vec![t.data().iter().sum()])?;
        Ok(self.push_op(Op::Sum(x), out, &[x]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        let out = Tensor::from_op(vec![1, 1], vec![s / t.len() as f64])?;
        Ok(self.push_op(Op::Mean(x), out, &[x]))
    }

    /// Inverted dropout. In inference mode (`training == false`) or at rate
    /// zero this is the identity and records no node.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidDropoutRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let t = self.value(x);
        let keep_mask: Vec<bool> = (0..t.len()).map(|_| rng.gen::<f64>() < keep).collect();
        let data = t
            .data()
            .iter()
            .zip(&keep_mask)
            .map(|(&v, &k)| if k { v / keep } else { 0.0 })
            .collect();
        let out = Tensor::from_op(t.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Dropout { x, keep_mask, keep }, out, &[x]))
    }

    /// Gather rows of an embedding table. Gradient scatter-adds back.
    pub fn gather(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let t = self.want_matrix(x, "gather")?;
        let (r, c) = (t.rows(), t.cols());
        for &id in ids {
            if id >= r {
                return Err(NumericsError::IndexOutOfRange { index: id, size: r });
            }
        }
        let mut out = vec![0.0; ids.len() * c];
        for (i, &id) in ids.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&t.data()[id * c..(id + 1) * c]);
        }
        let out = Tensor::from_op(vec![ids.len(), c], out)?;
        Ok(self.push_op(
            Op::Gather {
                x,
                ids: ids.to_vec(),
            },
            out,
            &[x],
        ))
    }

    /// Summed sigmoid cross-entropy of logits against binary targets,
    /// computed in the stable softplus form.
    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        positive_only: bool,
    ) -> Result<NodeId, NumericsError> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "sigmoid_cross_entropy".into(),
                detail: format!("{} logits vs {} targets", t.len(), targets.len()),
            });
        }
        if targets.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(NumericsError::NonBinaryTarget);
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&s, &tc)| {
                if positive_only {
                    // -t·log σ(s) = t·softplus(-s)
                    tc * softplus(-s)
                } else {
                    s.max(0.0) - s * tc + (-s.abs()).exp().ln_1p()
                }
            })
            .sum();
        let out = Tensor::from_op(vec![1, 1], vec![total])?;
        Ok(self.push_op(
            Op::SigmoidCe {
                logits,
                targets: targets.to_vec(),
                positive_only,
            },
            out,
            &[logits],
        ))
    }

    /// Identity forward with the backward gradient multiplied by `factor`.
    /// With `factor != 1` this is a deliberately wrong gradient, used as the
    /// negative control for the finite-difference harness.
    pub fn grad_scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, NumericsError> {
        let t = self.value(x);
        let out = Tensor::from_op(t.shape().to_vec(), t.data().to_vec())?;
        Ok(self.push_op(Op::GradScale { x, factor }, out, &[x]))
    }

    // ---- backward -----------------------------------------------------

    /// Populate gradient buffers of every grad-requiring node reachable
    /// from the scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::EmptyGraph);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumericsError::NotScalar(lt.shape().to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                self.grads[id] = Some(gout);
                continue;
            }
            self.propagate(id, &gout)?;
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn accum(&mut self, id: NodeId, contrib: &[f64]) {
        let len = self.nodes[id].value.tensor().len();
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        for (gi, &ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn propagate(&mut self, id: NodeId, gout: &[f64]) -> Result<(), NumericsError> {
        // Ops are matched by value of their attributes; tensors are read
        // through `self.value` to keep the borrow local.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(a) {
                    // dA = G · Bᵀ
                    let tb = self.value(b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += g * tb.data()[p * n + j];
                            }
                        }
                    }
                    self.accum(a, &ga);
                }
                if self.needs(b) {
                    // dB = Aᵀ · G
                    let ta = self.value(a);
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * gout[i * n + j];
                            }
                        }
                    }
                    self.accum(b, &gb);
                }
            }
            Op::MatMulTransB(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.needs(a) {
                    // dA = G · B
                    let tb = self.value(b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += g * tb.data()[j * k + p];
                            }
                        }
                    }
                    self.accum(a, &ga);
                }
                if self.needs(b) {
                    // dB = Gᵀ · A
                    let ta = self.value(a);
                    let mut gb = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += g * ta.data()[i * k + p];
                            }
                        }
                    }
                    self.accum(b, &gb);
                }
            }
            Op::Conv1dSame { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let tx = self.value(x);
                let tw = self.value(w);
                let (n, cin) = (tx.rows(), tx.cols());
                let (k, cout) = (tw.shape()[0], tw.shape()[2]);
                let half = k / 2;
                if self.needs(x) {
                    let tw = self.value(w);
                    let mut gx = vec![0.0; n * cin];
                    for t in 0..n {
                        for dk in 0..k {
                            let src = t as isize + dk as isize - half as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let wk = &tw.data()[dk * cin * cout..(dk + 1) * cin * cout];
                            for i in 0..cin {
                                let mut acc = 0.0;
                                for o in 0..cout {
                                    acc += wk[i * cout + o] * gout[t * cout + o];
                                }
                                gx[src as usize * cin + i] += acc;
                            }
                        }
                    }
                    self.accum(x, &gx);
                }
                if self.needs(w) {
                    let tx = self.value(x);
                    let mut gw = vec![0.0; k * cin * cout];
                    for t in 0..n {
                        for dk in 0..k {
                            let src = t as isize + dk as isize - half as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let xr = &tx.data()[src as usize * cin..(src as usize + 1) * cin];
                            let wk = &mut gw[dk * cin * cout..(dk + 1) * cin * cout];
                            for (i, &xv) in xr.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                for o in 0..cout {
                                    wk[i * cout + o] += xv * gout[t * cout + o];
                                }
                            }
                        }
                    }
                    self.accum(w, &gw);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; cout];
                    for t in 0..n {
                        for o in 0..cout {
                            gb[o] += gout[t * cout + o];
                        }
                    }
                    self.accum(b, &gb);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if self.needs(x) {
                    let tx = self.value(x);
                    let g: Vec<f64> = tx
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accum(x, &g);
                }
            }
            Op::Sigmoid(x) => {
                let x = *x;
                if self.needs(x) {
                    let ty = self.value(id);
                    let g: Vec<f64> = ty
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&y, &g)| g * y * (1.0 - y))
                        .collect();
                    self.accum(x, &g);
                }
            }
            Op::Softplus(x) => {
                let x = *x;
                if self.needs(x) {
                    let tx = self.value(x);
                    let g: Vec<f64> = tx
                        .data()
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| g * sigmoid(v))
                        .collect();
                    self.accum(x, &g);
                }
            }
            Op::RowSoftmax { x, valid } => {
                let (x, valid) = (*x, valid.clone());
                if self.needs(x) {
                    let ty = self.value(id);
                    let (r, c) = (ty.rows(), ty.cols());
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let y = &ty.data()[i * c..(i + 1) * c];
                        let go = &gout[i * c..(i + 1) * c];
                        let s: f64 = (0..c).filter(|&j| valid[j]).map(|j| go[j] * y[j]).sum();
                        for j in 0..c {
                            if valid[j] {
                                gx[i * c + j] = y[j] * (go[j] - s);
                            }
                        }
                    }
                    self.accum(x, &gx);
                }
            }
            Op::RowL2Norm(x) => {
                let x = *x;
                if self.needs(x) {
                    let (tx, ty) = (self.value(x), self.value(id));
                    let (r, c) = (tx.rows(), tx.cols());
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let xr = &tx.data()[i * c..(i + 1) * c];
                        let yr = &ty.data()[i * c..(i + 1) * c];
                        let go = &gout[i * c..(i + 1) * c];
                        let n = dot(xr, xr).sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let proj = dot(yr, go);
                        for j in 0..c {
                            gx[i * c + j] = (go[j] - yr[j] * proj) / n;
                        }
                    }
                    self.accum(x, &gx);
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (x, axis, argmax) = (*x, *axis, argmax.clone());
                if self.needs(x) {
                    let tx = self.value(x);
                    let (r, c) = (tx.rows(), tx.cols());
                    let mut gx = vec![0.0; r * c];
                    if axis == 0 {
                        for j in 0..c {
                            gx[argmax[j] * c + j] = gout[j];
                        }
                    } else {
                        for i in 0..r {
                            gx[i * c + argmax[i]] = gout[i];
                        }
                    }
                    self.accum(x, &gx);
                }
            }
            Op::ConcatCols(inputs) => {
                let inputs = inputs.clone();
                let r = self.value(id).rows();
                let total = self.value(id).cols();
                let mut off = 0;
                for inp in inputs {
                    let c = self.value(inp).cols();
                    if self.needs(inp) {
                        let mut g = vec![0.0; r * c];
                        for i in 0..r {
                            g[i * c..(i + 1) * c]
                                .copy_from_slice(&gout[i * total + off..i * total + off + c]);
                        }
                        self.accum(inp, &g);
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if self.needs(x) {
                    let tx = self.value(x);
                    let (r, c) = (tx.rows(), tx.cols());
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        g[i * c + start..i * c + start + len]
                            .copy_from_slice(&gout[i * len..(i + 1) * len]);
                    }
                    self.accum(x, &g);
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                if self.needs(x) {
                    self.accum(x, gout);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accum(a, gout);
                }
                if self.needs(b) {
                    self.accum(b, gout);
                }
            }
            Op::AddRow { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accum(a, gout);
                }
                if self.needs(b) {
                    let c = self.value(b).cols();
                    let r = self.value(a).rows();
                    let mut g = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += gout[i * c + j];
                        }
                    }
                    self.accum(b, &g);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accum(a, gout);
                }
                if self.needs(b) {
                    let g: Vec<f64> = gout.iter().map(|&v| -v).collect();
                    self.accum(b, &g);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let tb = self.value(b);
                    let g: Vec<f64> = tb.data().iter().zip(gout).map(|(&v, &g)| v * g).collect();
                    self.accum(a, &g);
                }
                if self.needs(b) {
                    let ta = self.value(a);
                    let g: Vec<f64> = ta.data().iter().zip(gout).map(|(&v, &g)| v * g).collect();
                    self.accum(b, &g);
                }
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                if self.needs(x) {
                    let g: Vec<f64> = gout.iter().map(|&v| v * factor).collect();
                    self.accum(x, &g);
                }
            }
            Op::Sum(x) => {
                let x = *x;
                if self.needs(x) {
                    let n = self.value(x).len();
                    self.accum(x, &vec![gout[0]; n]);
                }
            }
            Op::Mean(x) => {
                let x = *x;
                if self.needs(x) {
                    let n = self.value(x).len();
                    self.accum(x, &vec![gout[0] / n as f64; n]);
                }
            }
            Op::Dropout { x, keep_mask, keep } => {
                let (x, keep) = (*x, *keep);
                let keep_mask = keep_mask.clone();
                if self.needs(x) {
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(&keep_mask)
                        .map(|(&g, &k)| if k { g / keep } else { 0.0 })
                        .collect();
                    self.accum(x, &g);
                }
            }
            Op::Gather { x, ids } => {
                let x = *x;
                let ids = ids.clone();
                if self.needs(x) {
                    let tx = self.value(x);
                    let (r, c) = (tx.rows(), tx.cols());
                    let mut g = vec![0.0; r * c];
                    for (i, &row) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[row * c + j] += gout[i * c + j];
                        }
                    }
                    self.accum(x, &g);
                }
            }
            Op::SigmoidCe {
                logits,
                targets,
                positive_only,
            } => {
                let (logits, positive_only) = (*logits, *positive_only);
                let targets = targets.clone();
                if self.needs(logits) {
                    let tl = self.value(logits);
                    let g: Vec<f64> = tl
                        .data()
                        .iter()
                        .zip(&targets)
                        .map(|(&s, &t)| {
                            let d = if positive_only {
                                t * (sigmoid(s) - 1.0)
                            } else {
                                sigmoid(s) - t
                            };
                            gout[0] * d
                        })
                        .collect();
                    self.accum(logits, &g);
                }
            }
            Op::GradScale { x, factor } => {
                let (x, factor) = (*x, *factor);
                if self.needs(x) {
                    let g: Vec<f64> = gout.iter().map(|&v| v * factor).collect();
                    self.accum(x, &g);
                }
            }
        }
        Ok(())
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op: op.to_string(),
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ra = &a[i * k..(i + 1) * k];
        let ro = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ra.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let rb = &b[p * n..(p + 1) * n];
            for (ov, &bv) in ro.iter_mut().zip(rb) {
                *ov += av * bv;
            }
        }
    }
}
