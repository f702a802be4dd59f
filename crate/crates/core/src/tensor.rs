//! Dense row-major `f64` matrices that can be recorded on a [`Tape`](crate::tape::Tape).

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data of length {len} cannot fill a {rows}x{cols} tensor")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("spmm needs a normalized adjacency, got a raw 0/1 matrix")]
    UnnormalizedAdjacency,
    #[error("dropout rate {0} is outside [0, 1)")]
    DropoutRate(f64),
    #[error("label smoothing {0} is outside [0, 1)")]
    Smoothing(f64),
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for {rows} logit rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("row index {index} is out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("backward already ran on this tape; record a fresh graph first")]
    BackwardTwice,
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("the loss is not recorded on this tape")]
    Untracked,
    #[error("tensor was recorded on a different tape")]
    ForeignTensor,
}

/// Handle of a recorded node: the owning tape's id plus the node position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<[f64]>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self::from_vec(rows, cols, data))
    }

    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data: data.into(),
            node: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    /// Builds a tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(TensorError::DataLength {
                    rows: rows.len(),
                    cols,
                    len: data.len() + row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self::from_vec(rows.len(), cols, data))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Whether this tensor carries a node on some tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape handle.
    pub fn detach(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn shared_data(&self) -> Arc<[f64]> {
        Arc::clone(&self.data)
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}", self.rows, self.cols)?;
        if self.node.is_some() {
            write!(f, ", tracked")?;
        }
        if self.data.len() <= 16 {
            write!(f, ", {:?}", &self.data[..])?;
        }
        write!(f, ")")
    }
}

/// `A (n x k) * B (k x m)`.
pub(crate) fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &b_pj) in out_row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

/// `A (n x k) * B^T` where `B` is `m x k`.
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = a_row
                .iter()
                .zip(&b[j * k..(j + 1) * k])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `A^T * B` where `A` is `n x k` and `B` is `n x m`.
pub(crate) fn gemm_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for r in 0..n {
        let b_row = &b[r * m..(r + 1) * m];
        for (i, &a_ri) in a[r * k..(r + 1) * k].iter().enumerate() {
            if a_ri == 0.0 {
                continue;
            }
            for (o, &b_rj) in out[i * m..(i + 1) * m].iter_mut().zip(b_row) {
                *o += a_ri * b_rj;
            }
        }
    }
    out
}
