//! Reverse-mode differentiation via an operation tape.
//!
//! A `Tape` is an arena of nodes built during one forward pass (the graph is
//! rebuilt every pass). `backward` walks the record in exact reverse order
//! and accumulates gradients into per-node buffers; forward values are never
//! touched. A tape can be differentiated once; a second `backward` call is
//! rejected.
//!
//! Inputs enter either as parameters (gradients wanted) or constants. Ops
//! only propagate gradients toward nodes that need them, so constant-input
//! branches (data streams, frozen networks, TD targets) cost nothing on the
//! way back.
//!
//! The fused attention op reduces over entities in a canonical order (sorted
//! by score bits, then value-row bits) instead of index order. Floating-point
//! addition is not associative, so this is what makes an entity's output —
//! and everything computed from it — bit-identical under permutation of the
//! other entities, not merely equal to rounding.

use crate::error::{Error, Result};
use crate::num::tensor::{dgemm_into, elu, elu_prime, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddRow { a: TensorId, row: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulColBroadcast { a: TensorId, col: TensorId },
    Scale { a: TensorId, c: f64 },
    Abs { a: TensorId },
    Exp { a: TensorId },
    Ln { a: TensorId },
    Tanh { a: TensorId },
    Relu { a: TensorId },
    Elu { a: TensorId },
    Square { a: TensorId },
    SoftmaxRows { a: TensorId },
    LogsumexpRows { a: TensorId },
    MaskedLogSoftmaxRows { a: TensorId, mask: Vec<bool> },
    AttentionHead { q: TensorId, k: TensorId, v: TensorId, scale: f64 },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize, len: usize },
    SliceCols { a: TensorId, start: usize, len: usize },
    GatherRows { a: TensorId, idx: Vec<usize> },
    SelectColPerRow { a: TensorId, idx: Vec<usize> },
    SumCols { a: TensorId },
    MeanWeighted { a: TensorId, w: Vec<f64>, denom: f64 },
    AffineCombine { parts: Vec<(TensorId, f64)> },
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Row index standing for "no row": gathers a zero row, selects 0.0, and
/// receives no gradient. Used for absent agents in ragged batches.
pub const NO_ROW: usize = usize::MAX;

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn param(&mut self, t: &Tensor) -> TensorId {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the differentiated scalar with respect to `id`. Zero
    /// tensor of matching shape when the node was never reached (unused
    /// parameters included).
    pub fn grad(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap(),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        dgemm_into(ta.data(), tb.data(), &mut out, m, k, n, false, false, 0.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    /// Broadcast-add a length-n row vector to every row of an [m, n] matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let n = ta.cols();
        if tr.numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let m = ta.rows();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(ta.data()[r * n + c] + tr.data()[c]);
            }
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow { a, row }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, needs))
    }

    /// Multiply each row of an [m, n] matrix by the matching entry of an
    /// [m, 1] column.
    pub fn mul_col_broadcast(&mut self, a: TensorId, col: TensorId) -> Result<TensorId> {
        let (ta, tc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let (m, n) = (ta.rows(), ta.cols());
        if tc.numel() != m {
            return Err(Error::Shape {
                op: "mul_col_broadcast",
                lhs: ta.shape().to_vec(),
                rhs: tc.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let s = tc.data()[r];
            for c in 0..n {
                data.push(ta.data()[r * n + c] * s);
            }
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(col);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::MulColBroadcast { a, col },
            needs,
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(t, Op::Scale { a, c }, needs)
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::ln, Op::Ln { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn elu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, elu, Op::Elu { a })
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let t = crate::num::tensor::softmax(ta, ta.shape().len() - 1).unwrap();
        let needs = self.needs(a);
        self.push(t, Op::SoftmaxRows { a }, needs)
    }

    /// Row-wise log(sum(exp())) of an [m, n] matrix, giving [m, 1].
    pub fn logsumexp_rows(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = ta.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            out.push(max + sum.ln());
        }
        let _ = n;
        let t = Tensor::new(vec![m, 1], out).unwrap();
        let needs = self.needs(a);
        self.push(t, Op::LogsumexpRows { a }, needs)
    }

    /// Row-wise log-softmax restricted to masked-in entries. Masked-out
    /// entries are set to -inf in the output and receive no gradient.
    /// A row with no valid entry is a contract violation.
    pub fn masked_log_softmax_rows(&mut self, a: TensorId, mask: Vec<bool>) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        if mask.len() != m * n {
            return Err(Error::Shape {
                op: "masked_log_softmax_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = vec![f64::NEG_INFINITY; m * n];
        for r in 0..m {
            let row = ta.row(r);
            let rm = &mask[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (x, &keep) in row.iter().zip(rm) {
                if keep {
                    max = max.max(*x);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "masked_log_softmax_rows: row {r} has no valid entry"
                )));
            }
            let mut denom = 0.0;
            for (x, &keep) in row.iter().zip(rm) {
                if keep {
                    denom += (x - max).exp();
                }
            }
            let log_denom = denom.ln();
            for (c, (&x, &keep)) in row.iter().zip(rm).enumerate() {
                if keep {
                    out[r * n + c] = x - max - log_denom;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::MaskedLogSoftmaxRows { a, mask }, needs))
    }

    /// One attention head: softmax(q kᵀ · scale) v, with canonically ordered
    /// reductions so the output for each query row is bit-invariant under
    /// permutation of the key/value rows.
    pub fn attention_head(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        scale: f64,
    ) -> Result<TensorId> {
        let (tq, tk, tv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let n = tq.rows();
        let d = tq.cols();
        if tk.rows() != n || tk.cols() != d || tv.rows() != n {
            return Err(Error::Shape {
                op: "attention_head",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let dv = tv.cols();
        let out = attention_forward(tq.data(), tk.data(), tv.data(), n, d, dv, scale);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![n, dv], out)?,
            Op::AttentionHead { q, k, v, scale },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let m = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let n = self.nodes[parts[0].0].value.cols();
        let mut total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![n],
                    rhs: t.shape().to_vec(),
                });
            }
            total += t.rows();
            data.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![total, n], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![len, n], data)?,
            Op::SliceRows { a, start, len },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { a, start, len },
            needs,
        ))
    }

    /// Rows of `a` selected by index; `NO_ROW` produces a zero row.
    pub fn gather_rows(&mut self, a: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            if i == NO_ROW {
                data.extend(std::iter::repeat(0.0).take(n));
            } else if i < m {
                data.extend_from_slice(ta.row(i));
            } else {
                return Err(Error::Contract(format!(
                    "gather_rows: index {i} out of range for {m} rows"
                )));
            }
        }
        let rows = idx.len();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::GatherRows { a, idx },
            needs,
        ))
    }

    /// Per-row column selection: out[r] = a[r, idx[r]]. `NO_ROW` gives 0.
    pub fn select_col_per_row(&mut self, a: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        if idx.len() != m {
            return Err(Error::Shape {
                op: "select_col_per_row",
                lhs: ta.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (r, &c) in idx.iter().enumerate() {
            if c == NO_ROW {
                data.push(0.0);
            } else if c < n {
                data.push(ta.data()[r * n + c]);
            } else {
                return Err(Error::Contract(format!(
                    "select_col_per_row: column {c} out of range for {n} columns"
                )));
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![m, 1], data)?,
            Op::SelectColPerRow { a, idx },
            needs,
        ))
    }

    /// Row sums of an [m, n] matrix as [m, 1].
    pub fn sum_cols(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (m, _n) = (ta.rows(), ta.cols());
        let data: Vec<f64> = (0..m).map(|r| ta.row(r).iter().sum()).collect();
        let t = Tensor::new(vec![m, 1], data).unwrap();
        let needs = self.needs(a);
        self.push(t, Op::SumCols { a }, needs)
    }

    /// Weighted mean reduced to a scalar: sum(w ∘ a) / denom. The weights are
    /// constants (masks), not differentiated.
    pub fn mean_weighted(&mut self, a: TensorId, w: Vec<f64>, denom: f64) -> Result<TensorId> {
        let ta = &self.nodes[a.0].value;
        if w.len() != ta.numel() {
            return Err(Error::Shape {
                op: "mean_weighted",
                lhs: ta.shape().to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s: f64 = ta.data().iter().zip(&w).map(|(x, wi)| x * wi).sum();
        let t = Tensor::scalar(s / denom);
        let needs = self.needs(a);
        Ok(self.push(t, Op::MeanWeighted { a, w, denom }, needs))
    }

    /// Linear combination of same-shape tensors: sum of c_k · x_k.
    pub fn affine_combine(&mut self, parts: &[(TensorId, f64)]) -> Result<TensorId> {
        let shape = self.nodes[parts[0].0 .0].value.shape().to_vec();
        let mut data = vec![0.0; self.nodes[parts[0].0 .0].value.numel()];
        for &(p, c) in parts {
            let t = &self.nodes[p.0].value;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "affine_combine",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            for (d, x) in data.iter_mut().zip(t.data()) {
                *d += c * x;
            }
        }
        let needs = parts.iter().any(|&(p, _)| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::AffineCombine {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, a: TensorId) -> TensorId {
        let t = self.nodes[a.0].value.clone();
        let _ = a;
        self.push(t, Op::StopGrad, false)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate gradients of a scalar loss into every parameter node.
    /// Rejects non-scalar or non-finite losses and repeated calls.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape".into(),
            ));
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            self.step_back(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<f64> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| vec![0.0; numel])
    }

    fn add_to_grad(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let buf = self.grad_buf(id);
        for (g, c) in buf.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn step_back(&mut self, i: usize, grad: &[f64]) {
        // Ops are immutable once recorded; take a raw view to read inputs
        // while writing gradient buffers of earlier nodes.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let t = &self.nodes[a.0].value;
                    (t.shape()[0], t.shape()[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(*a) {
                    // dA += G @ Bᵀ
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let buf = self.grad_buf(*a);
                    dgemm_into(grad, &bd, buf, m, n, k, false, true, 1.0);
                }
                if self.needs(*b) {
                    // dB += Aᵀ @ G
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let buf = self.grad_buf(*b);
                    dgemm_into(&ad, grad, buf, k, m, n, true, false, 1.0);
                }
            }
            Op::Add { a, b } => {
                self.add_to_grad(*a, grad);
                self.add_to_grad(*b, grad);
            }
            Op::AddRow { a, row } => {
                self.add_to_grad(*a, grad);
                if self.needs(*row) {
                    let n = self.nodes[row.0].value.numel();
                    let mut rg = vec![0.0; n];
                    for chunk in grad.chunks(n) {
                        for (g, c) in rg.iter_mut().zip(chunk) {
                            *g += c;
                        }
                    }
                    self.add_to_grad(*row, &rg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
                if self.needs(*b) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.add_to_grad(*b, &contrib);
                }
            }
            Op::MulColBroadcast { a, col } => {
                let n = self.nodes[a.0].value.cols();
                if self.needs(*a) {
                    let cd = self.nodes[col.0].value.data().to_vec();
                    let contrib: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * cd[j / n])
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
                if self.needs(*col) {
                    let ad = self.nodes[a.0].value.data();
                    let m = self.nodes[col.0].value.numel();
                    let mut cg = vec![0.0; m];
                    for r in 0..m {
                        cg[r] = grad[r * n..(r + 1) * n]
                            .iter()
                            .zip(&ad[r * n..(r + 1) * n])
                            .map(|(g, x)| g * x)
                            .sum();
                    }
                    self.add_to_grad(*col, &cg);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::Abs { a } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, &x)| g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::Exp { a } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::Ln { a } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x)| g / x)
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::Tanh { a } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::Elu { a } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, &x)| g * elu_prime(x))
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::Square { a } => {
                if self.needs(*a) {
                    let contrib: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x)| 2.0 * g * x)
                        .collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    let s = self.nodes[i].value.data();
                    let n = self.nodes[i].value.cols();
                    let mut contrib = vec![0.0; grad.len()];
                    for r in 0..grad.len() / n {
                        let gs: f64 = grad[r * n..(r + 1) * n]
                            .iter()
                            .zip(&s[r * n..(r + 1) * n])
                            .map(|(g, si)| g * si)
                            .sum();
                        for c in 0..n {
                            let j = r * n + c;
                            contrib[j] = s[j] * (grad[j] - gs);
                        }
                    }
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::LogsumexpRows { a } => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].value;
                    let (m, n) = (x.rows(), x.cols());
                    let out = self.nodes[i].value.data();
                    let mut contrib = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            contrib[r * n + c] =
                                grad[r] * (x.data()[r * n + c] - out[r]).exp();
                        }
                    }
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::MaskedLogSoftmaxRows { a, mask } => {
                if self.needs(*a) {
                    let out = self.nodes[i].value.data();
                    let n = self.nodes[i].value.cols();
                    let m = self.nodes[i].value.rows();
                    let mut contrib = vec![0.0; m * n];
                    for r in 0..m {
                        let rowmask = &mask[r * n..(r + 1) * n];
                        let gsum: f64 = grad[r * n..(r + 1) * n]
                            .iter()
                            .zip(rowmask)
                            .filter(|(_, &k)| k)
                            .map(|(g, _)| *g)
                            .sum();
                        for c in 0..n {
                            if rowmask[c] {
                                let j = r * n + c;
                                contrib[j] = grad[j] - out[j].exp() * gsum;
                            }
                        }
                    }
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::AttentionHead { q, k, v, scale } => {
                let tq = self.nodes[q.0].value.clone();
                let tk = self.nodes[k.0].value.clone();
                let tv = self.nodes[v.0].value.clone();
                let (dq, dk, dv) = attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    grad,
                    tq.rows(),
                    tq.cols(),
                    tv.cols(),
                    *scale,
                );
                self.add_to_grad(*q, &dq);
                self.add_to_grad(*k, &dk);
                self.add_to_grad(*v, &dv);
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let mut contrib = Vec::with_capacity(m * n);
                        for r in 0..m {
                            contrib
                                .extend_from_slice(&grad[r * total + offset..r * total + offset + n]);
                        }
                        self.add_to_grad(p, &contrib);
                    }
                    offset += n;
                }
            }
            Op::ConcatRows { parts } => {
                let n = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p.0].value.rows();
                    if self.needs(p) {
                        self.add_to_grad(p, &grad[offset * n..(offset + rows) * n]);
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.cols();
                    let m = self.nodes[a.0].value.rows();
                    let mut contrib = vec![0.0; m * n];
                    contrib[start * n..(start + len) * n].copy_from_slice(grad);
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.cols();
                    let m = self.nodes[a.0].value.rows();
                    let mut contrib = vec![0.0; m * n];
                    for r in 0..m {
                        contrib[r * n + start..r * n + start + len]
                            .copy_from_slice(&grad[r * len..(r + 1) * len]);
                    }
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.cols();
                    let m = self.nodes[a.0].value.rows();
                    let mut contrib = vec![0.0; m * n];
                    for (r, &src) in idx.iter().enumerate() {
                        if src != NO_ROW {
                            for c in 0..n {
                                contrib[src * n + c] += grad[r * n + c];
                            }
                        }
                    }
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::SelectColPerRow { a, idx } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.cols();
                    let m = self.nodes[a.0].value.rows();
                    let mut contrib = vec![0.0; m * n];
                    for (r, &c) in idx.iter().enumerate() {
                        if c != NO_ROW {
                            contrib[r * n + c] = grad[r];
                        }
                    }
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::SumCols { a } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.cols();
                    let m = self.nodes[a.0].value.rows();
                    let mut contrib = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            contrib[r * n + c] = grad[r];
                        }
                    }
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::MeanWeighted { a, w, denom } => {
                if self.needs(*a) {
                    let g = grad[0];
                    let contrib: Vec<f64> = w.iter().map(|wi| g * wi / denom).collect();
                    self.add_to_grad(*a, &contrib);
                }
            }
            Op::AffineCombine { parts } => {
                for &(p, c) in parts {
                    if self.needs(p) {
                        let contrib: Vec<f64> = grad.iter().map(|g| g * c).collect();
                        self.add_to_grad(p, &contrib);
                    }
                }
            }
            Op::StopGrad => {}
        }
        self.nodes[i].op = op;
    }
}

/// Forward attention with canonically ordered reductions.
///
/// For each query row the softmax denominator and the value accumulation run
/// over key indices sorted by (score bits, value-row bits), so any input row
/// permutation yields bit-identical outputs. Shared by the tape op and the
/// plain forward paths so both have the same invariance.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    dv: usize,
    scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n * dv];
    let mut scores = vec![0.0; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for a in 0..n {
        let qa = &q[a * d..(a + 1) * d];
        for j in 0..n {
            let kj = &k[j * d..(j + 1) * d];
            scores[j] = qa.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&x, &y| {
            scores[x].total_cmp(&scores[y]).then_with(|| {
                let vx = &v[x * dv..(x + 1) * dv];
                let vy = &v[y * dv..(y + 1) * dv];
                for (a, b) in vx.iter().zip(vy) {
                    let c = a.total_cmp(b);
                    if c != std::cmp::Ordering::Equal {
                        return c;
                    }
                }
                std::cmp::Ordering::Equal
            })
        });
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &j in &order {
            denom += (scores[j] - max).exp();
        }
        let orow = &mut out[a * dv..(a + 1) * dv];
        for &j in &order {
            let w = (scores[j] - max).exp() / denom;
            for (o, x) in orow.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += w * x;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    grad: &[f64],
    n: usize,
    d: usize,
    dv: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dvv = vec![0.0; n * dv];
    let mut w = vec![0.0; n];
    let mut dw = vec![0.0; n];
    for a in 0..n {
        let qa = &q[a * d..(a + 1) * d];
        let ga = &grad[a * dv..(a + 1) * dv];
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            let kj = &k[j * d..(j + 1) * d];
            w[j] = qa.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
            max = max.max(w[j]);
        }
        let mut denom = 0.0;
        for wj in w.iter_mut() {
            *wj = (*wj - max).exp();
            denom += *wj;
        }
        for wj in w.iter_mut() {
            *wj /= denom;
        }
        // dV and dW
        let mut gw_dot = 0.0;
        for j in 0..n {
            let vj = &v[j * dv..(j + 1) * dv];
            dw[j] = ga.iter().zip(vj).map(|(g, x)| g * x).sum();
            gw_dot += dw[j] * w[j];
            for (dvx, g) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(ga) {
                *dvx += w[j] * g;
            }
        }
        // dS then dQ, dK
        for j in 0..n {
            let ds = w[j] * (dw[j] - gw_dot) * scale;
            let kj = &k[j * d..(j + 1) * d];
            for c in 0..d {
                dq[a * d + c] += ds * kj[c];
                dk[j * d + c] += ds * qa[c];
            }
        }
    }
    (dq, dk, dvv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn repeated_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_does_not_mutate_forward_values() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let y = tape.tanh(x);
        let s = tape.mean_weighted(y, vec![1.0, 1.0], 2.0).unwrap();
        let before: Vec<f64> = (0..tape.len())
            .flat_map(|i| tape.value(TensorId(i)).data().to_vec())
            .collect();
        tape.backward(s).unwrap();
        let after: Vec<f64> = (0..tape.len())
            .flat_map(|i| tape.value(TensorId(i)).data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let used = tape.param(&Tensor::scalar(3.0));
        let unused = tape.param(&Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let y = tape.square(used);
        tape.backward(y).unwrap();
        let g = tape.grad(unused);
        assert_eq!(g.shape(), &[2, 2]);
        assert!(g.data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.grad(used).item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_grads_match_formula() {
        // loss = sum(A @ B) => dA = ones @ Bᵀ, dB = Aᵀ @ ones
        let mut rng = Rng::new(5);
        let a_t = Tensor::uniform_init(&[3, 3], 3, &mut rng);
        let b_t = Tensor::uniform_init(&[3, 3], 3, &mut rng);
        let mut tape = Tape::new();
        let a = tape.param(&a_t);
        let b = tape.param(&b_t);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.mean_weighted(c, vec![1.0; 9], 1.0).unwrap();
        tape.backward(loss).unwrap();
        let da = tape.grad(a);
        let db = tape.grad(b);
        for r in 0..3 {
            for c_ in 0..3 {
                let expect_a: f64 = (0..3).map(|j| b_t.data()[c_ * 3 + j]).sum();
                assert!((da.data()[r * 3 + c_] - expect_a).abs() < 1e-12);
                let expect_b: f64 = (0..3).map(|i| a_t.data()[i * 3 + r]).sum();
                assert!((db.data()[r * 3 + c_] - expect_b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_entity_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 2], vec![1.1, 0.2]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        let out = tape.attention_head(q, k, v, 0.5).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn attention_permutation_bit_identical() {
        let mut rng = Rng::new(11);
        let n = 6;
        let q_t = Tensor::uniform_init(&[n, 4], 4, &mut rng);
        let k_t = Tensor::uniform_init(&[n, 4], 4, &mut rng);
        let v_t = Tensor::uniform_init(&[n, 5], 5, &mut rng);
        let base = attention_forward(q_t.data(), k_t.data(), v_t.data(), n, 4, 5, 0.5);
        // Permute rows 1.. (row 0 stays put), compare row 0 of the output.
        let perm = [0usize, 3, 1, 5, 4, 2];
        let permute = |t: &Tensor, c: usize| -> Vec<f64> {
            let mut out = vec![0.0; n * c];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * c..(dst + 1) * c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
            }
            out
        };
        let qp = permute(&q_t, 4);
        let kp = permute(&k_t, 4);
        let vp = permute(&v_t, 5);
        let permuted = attention_forward(&qp, &kp, &vp, n, 4, 5, 0.5);
        assert_eq!(
            base[0..5].iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            permuted[0..5].iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn masked_log_softmax_all_false_row_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let err = tape
            .masked_log_softmax_rows(x, vec![false, false, false])
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let frozen = tape.stop_grad(x);
        let y = tape.square(frozen);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).item(), 0.0);
    }
}
