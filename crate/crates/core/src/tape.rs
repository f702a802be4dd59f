//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are methods on [`Tape`]. An operation whose operands are all
//! detached is computed eagerly and records nothing, so evaluation passes on
//! detached parameters leave the tape empty. Nodes are appended in execution
//! order; [`Tape::backward`] walks them in reverse, which is a valid reverse
//! topological order because every operand was recorded before its consumer.
//!
//! A tape is single-use: `backward` may run once, after which the tape must be
//! [`reset`](Tape::reset) before recording a new graph.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::sparse::{CsrMatrix, Normalization};
use crate::tensor::{gemm, gemm_at, gemm_bt, NodeRef, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

enum Op {
    Leaf,
    MatMul {
        a: Option<usize>,
        b: Option<usize>,
        a_val: Arc<[f64]>,
        b_val: Arc<[f64]>,
        k: usize,
    },
    Spmm {
        adj: Arc<CsrMatrix>,
        h: usize,
    },
    Add(Option<usize>, Option<usize>),
    Sub(Option<usize>, Option<usize>),
    AddRow(Option<usize>, Option<usize>),
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        a_val: Arc<[f64]>,
        b_val: Arc<[f64]>,
    },
    Scale(usize, f64),
    Relu {
        x: usize,
        input: Arc<[f64]>,
    },
    ConcatCols(Vec<(Option<usize>, usize)>),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    RowSelect {
        x: usize,
        indices: Vec<usize>,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    op: Op,
}

/// Recording of differentiable operations for one forward/backward pass.
///
/// Confined to a single thread; use one tape per training run.
pub struct Tape {
    id: Cell<u64>,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: Cell::new(fresh_id()),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node and invalidates tensors recorded so far.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
        self.id.set(fresh_id());
    }

    /// Registers `value` as a differentiable input.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        self.push(value.detach(), Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            rows: value.rows(),
            cols: value.cols(),
            op,
        });
        value.with_node(NodeRef {
            tape: self.id.get(),
            index,
        })
    }

    fn index(&self, t: &Tensor) -> Result<Option<usize>, TensorError> {
        match t.node {
            None => Ok(None),
            Some(node) if node.tape == self.id.get() => Ok(Some(node.index)),
            Some(_) => Err(TensorError::ForeignTensor),
        }
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.cols() != b.rows() {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let out = Tensor::from_vec(n, m, gemm(a.data(), b.data(), n, k, m));
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(out);
        }
        Ok(self.push(
            out,
            Op::MatMul {
                a: ia,
                b: ib,
                a_val: a.shared_data(),
                b_val: b.shared_data(),
                k,
            },
        ))
    }

    /// Sparse-dense product `adj * h`; with a row-mean adjacency each output
    /// row is the mean of the in-neighbor rows of `h` (zero when isolated).
    pub fn spmm(&self, adj: &Arc<CsrMatrix>, h: &Tensor) -> Result<Tensor, TensorError> {
        if adj.normalization() == Normalization::Raw {
            return Err(TensorError::UnnormalizedAdjacency);
        }
        if adj.num_cols() != h.rows() {
            return Err(TensorError::Shape {
                op: "spmm",
                lhs: (adj.num_rows(), adj.num_cols()),
                rhs: h.shape(),
            });
        }
        let d = h.cols();
        let src = h.data();
        let mut out = vec![0.0; adj.num_rows() * d];
        for r in 0..adj.num_rows() {
            let out_row = &mut out[r * d..(r + 1) * d];
            for (c, w) in adj.row(r) {
                for (o, &x) in out_row.iter_mut().zip(&src[c * d..(c + 1) * d]) {
                    *o += w * x;
                }
            }
        }
        let out = Tensor::from_vec(adj.num_rows(), d, out);
        match self.index(h)? {
            None => Ok(out),
            Some(ih) => Ok(self.push(
                out,
                Op::Spmm {
                    adj: Arc::clone(adj),
                    h: ih,
                },
            )),
        }
    }

    fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::Shape {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        Self::same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(a.rows(), a.cols(), data);
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(out);
        }
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        Self::same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(a.rows(), a.cols(), data);
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(out);
        }
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    /// Adds a `1 x cols` row vector to every row of `a` (bias broadcast).
    pub fn add_row(&self, a: &Tensor, row: &Tensor) -> Result<Tensor, TensorError> {
        if row.rows() != 1 || row.cols() != a.cols() {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: a.shape(),
                rhs: row.shape(),
            });
        }
        let bias = row.data();
        let data = a
            .data()
            .chunks(a.cols().max(1))
            .flat_map(|r| r.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let out = Tensor::from_vec(a.rows(), a.cols(), data);
        let (ia, ib) = (self.index(a)?, self.index(row)?);
        if ia.is_none() && ib.is_none() {
            return Ok(out);
        }
        Ok(self.push(out, Op::AddRow(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        Self::same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(a.rows(), a.cols(), data);
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        if ia.is_none() && ib.is_none() {
            return Ok(out);
        }
        Ok(self.push(
            out,
            Op::Mul {
                a: ia,
                b: ib,
                a_val: a.shared_data(),
                b_val: b.shared_data(),
            },
        ))
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor, TensorError> {
        let data = a.data().iter().map(|x| x * factor).collect();
        let out = Tensor::from_vec(a.rows(), a.cols(), data);
        match self.index(a)? {
            None => Ok(out),
            Some(ia) => Ok(self.push(out, Op::Scale(ia, factor))),
        }
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::from_vec(a.rows(), a.cols(), data);
        match self.index(a)? {
            None => Ok(out),
            Some(ia) => Ok(self.push(
                out,
                Op::Relu {
                    x: ia,
                    input: a.shared_data(),
                },
            )),
        }
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let Some(first) = parts.first() else {
            return Ok(Tensor::zeros(0, 0));
        };
        let rows = first.rows();
        for p in parts {
            if p.rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data);
        let mut recorded = Vec::with_capacity(parts.len());
        for p in parts {
            recorded.push((self.index(p)?, p.cols()));
        }
        if recorded.iter().all(|(i, _)| i.is_none()) {
            return Ok(out);
        }
        Ok(self.push(out, Op::ConcatCols(recorded)))
    }

    /// Inverted dropout with a mask drawn from `rng`: kept entries are scaled
    /// by `1/(1-rate)`. Rate zero returns the input unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        a: &Tensor,
        rate: f64,
        rng: &mut R,
    ) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if rate == 0.0 {
            return Ok(a.clone());
        }
        let keep: Vec<bool> = (0..a.data().len())
            .map(|_| rng.random::<f64>() >= rate)
            .collect();
        self.dropout_with_mask(a, &keep, rate)
    }

    /// Dropout with an explicit keep-mask.
    pub fn dropout_with_mask(
        &self,
        a: &Tensor,
        keep: &[bool],
        rate: f64,
    ) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if keep.len() != a.data().len() {
            return Err(TensorError::DataLength {
                rows: a.rows(),
                cols: a.cols(),
                len: keep.len(),
            });
        }
        let inv = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { inv } else { 0.0 }).collect();
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(a.rows(), a.cols(), data);
        match self.index(a)? {
            None => Ok(out),
            Some(ia) => Ok(self.push(out, Op::Dropout { x: ia, mask })),
        }
    }

    /// Gathers the listed rows (repeats allowed).
    pub fn row_select(&self, a: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
        let mut data = Vec::with_capacity(indices.len() * a.cols());
        for &i in indices {
            if i >= a.rows() {
                return Err(TensorError::RowIndex {
                    index: i,
                    rows: a.rows(),
                });
            }
            data.extend_from_slice(a.row(i));
        }
        let out = Tensor::from_vec(indices.len(), a.cols(), data);
        match self.index(a)? {
            None => Ok(out),
            Some(ia) => Ok(self.push(
                out,
                Op::RowSelect {
                    x: ia,
                    indices: indices.to_vec(),
                },
            )),
        }
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor, TensorError> {
        let out = Tensor::scalar(a.data().iter().sum());
        match self.index(a)? {
            None => Ok(out),
            Some(ia) => Ok(self.push(out, Op::Sum(ia))),
        }
    }

    /// Mean over rows of the label-smoothed cross-entropy. The target puts
    /// `1 - smoothing` on the true class and `smoothing / (C - 1)` on each of
    /// the others; softmax uses max-subtraction.
    pub fn cross_entropy_smoothed(
        &self,
        logits: &Tensor,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Smoothing(smoothing));
        }
        let (n, c) = logits.shape();
        if labels.len() != n {
            return Err(TensorError::LabelCount {
                labels: labels.len(),
                rows: n,
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let (on, off) = if c > 1 {
            (1.0 - smoothing, smoothing / (c - 1) as f64)
        } else {
            (1.0, 0.0)
        };
        let mut probs = Vec::with_capacity(n * c);
        let mut targets = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z = logits.row(r);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum_exp.ln();
            for (j, &zj) in z.iter().enumerate() {
                let q = if j == y { on } else { off };
                total -= q * (zj - log_norm);
                probs.push((zj - log_norm).exp());
                targets.push(q);
            }
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let out = Tensor::scalar(loss);
        match self.index(logits)? {
            None => Ok(out),
            Some(il) => Ok(self.push(
                out,
                Op::CrossEntropy {
                    logits: il,
                    targets,
                    probs,
                },
            )),
        }
    }

    /// Back-propagates from a 1x1 loss. Errors if called twice without
    /// [`reset`](Tape::reset).
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, TensorError> {
        if loss.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss {
                rows: loss.rows(),
                cols: loss.cols(),
            });
        }
        let root = self.index(loss)?.ok_or(TensorError::Untracked)?;
        if self.consumed.replace(true) {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(node, &g, &nodes, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id.get(),
            shapes: nodes.iter().map(|n| (n.rows, n.cols)).collect(),
            grads,
        })
    }
}

fn accumulate<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    j: usize,
) -> &'g mut Vec<f64> {
    let len = nodes[j].rows * nodes[j].cols;
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn backprop(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            a_val,
            b_val,
            k,
        } => {
            // C = A B with A: rows x k, B: k x cols
            if let Some(a) = *a {
                let da = gemm_bt(g, b_val, rows, cols, *k);
                add_into(accumulate(grads, nodes, a), &da, 1.0);
            }
            if let Some(b) = *b {
                let db = gemm_at(a_val, g, rows, *k, cols);
                add_into(accumulate(grads, nodes, b), &db, 1.0);
            }
        }
        Op::Spmm { adj, h } => {
            let dh = accumulate(grads, nodes, *h);
            for r in 0..adj.num_rows() {
                let g_row = &g[r * cols..(r + 1) * cols];
                for (c, w) in adj.row(r) {
                    add_into(&mut dh[c * cols..(c + 1) * cols], g_row, w);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(a) = *a {
                add_into(accumulate(grads, nodes, a), g, 1.0);
            }
            if let Some(b) = *b {
                add_into(accumulate(grads, nodes, b), g, 1.0);
            }
        }
        Op::Sub(a, b) => {
            if let Some(a) = *a {
                add_into(accumulate(grads, nodes, a), g, 1.0);
            }
            if let Some(b) = *b {
                add_into(accumulate(grads, nodes, b), g, -1.0);
            }
        }
        Op::AddRow(a, b) => {
            if let Some(a) = *a {
                add_into(accumulate(grads, nodes, a), g, 1.0);
            }
            if let Some(b) = *b {
                let db = accumulate(grads, nodes, b);
                for g_row in g.chunks(cols.max(1)) {
                    add_into(db, g_row, 1.0);
                }
            }
        }
        Op::Mul { a, b, a_val, b_val } => {
            if let Some(a) = *a {
                let da = accumulate(grads, nodes, a);
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(b_val.iter()) {
                    *d += gi * bi;
                }
            }
            if let Some(b) = *b {
                let db = accumulate(grads, nodes, b);
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(a_val.iter()) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale(a, factor) => add_into(accumulate(grads, nodes, *a), g, *factor),
        Op::Relu { x, input } => {
            let dx = accumulate(grads, nodes, *x);
            for ((d, gi), xi) in dx.iter_mut().zip(g).zip(input.iter()) {
                if *xi > 0.0 {
                    *d += gi;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &(part, width) in parts {
                if let Some(p) = part {
                    let dp = accumulate(grads, nodes, p);
                    for r in 0..rows {
                        add_into(
                            &mut dp[r * width..(r + 1) * width],
                            &g[r * cols + offset..r * cols + offset + width],
                            1.0,
                        );
                    }
                }
                offset += width;
            }
        }
        Op::Dropout { x, mask } => {
            let dx = accumulate(grads, nodes, *x);
            for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                *d += gi * m;
            }
        }
        Op::RowSelect { x, indices } => {
            let dx = accumulate(grads, nodes, *x);
            for (r, &src) in indices.iter().enumerate() {
                add_into(
                    &mut dx[src * cols..(src + 1) * cols],
                    &g[r * cols..(r + 1) * cols],
                    1.0,
                );
            }
        }
        Op::Sum(a) => {
            let da = accumulate(grads, nodes, *a);
            for d in da.iter_mut() {
                *d += g[0];
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let n = nodes[*logits].rows;
            if n == 0 {
                return;
            }
            let scale = g[0] / n as f64;
            let dl = accumulate(grads, nodes, *logits);
            for ((d, p), q) in dl.iter_mut().zip(probs).zip(targets) {
                *d += scale * (p - q);
            }
        }
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tensor recorded on the same tape, or `None`
    /// when the tensor is detached, foreign, or unreachable from the loss.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        let (rows, cols) = self.shapes[node.index];
        self.grads[node.index]
            .as_ref()
            .map(|g| Tensor::from_vec(rows, cols, g.clone()))
    }

    /// Like [`get`](Self::get) but returns zeros instead of `None`.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        self.get(t)
            .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
    }
}
