//! Compressed sparse row adjacency.
//!
//! Rows index destination nodes and columns index source nodes, so row `v`
//! of a row-normalized matrix holds `1/|N_v|` for every in-neighbor of `v`.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CsrError {
    #[error("edge ({src}, {dst}) outside a {n}-node graph")]
    EdgeOutOfRange { src: usize, dst: usize, n: usize },
    #[error("row_offsets must have length {expected}, got {got}")]
    OffsetsLength { expected: usize, got: usize },
    #[error("row_offsets are not monotone or do not end at nnz")]
    Offsets,
    #[error("column indices in row {row} are unsorted, duplicated, or out of range")]
    Columns { row: usize },
    #[error("values length {values} does not match nnz {nnz}")]
    ValuesLength { values: usize, nnz: usize },
}

/// Normalization state of the stored values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Raw 0/1 adjacency.
    Raw,
    /// Each nonempty row sums to one (neighbor mean).
    RowMean,
    /// `D^{-1/2} A D^{-1/2}`; excluded from the theory checks.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    num_rows: usize,
    num_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
    normalization: Normalization,
}

impl CsrMatrix {
    /// Builds a raw matrix from parts, validating every structural invariant.
    pub fn from_parts(
        num_rows: usize,
        num_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, CsrError> {
        if row_offsets.len() != num_rows + 1 {
            return Err(CsrError::OffsetsLength {
                expected: num_rows + 1,
                got: row_offsets.len(),
            });
        }
        if row_offsets[0] != 0
            || row_offsets.windows(2).any(|w| w[0] > w[1])
            || row_offsets[num_rows] != col_indices.len()
        {
            return Err(CsrError::Offsets);
        }
        if values.len() != col_indices.len() {
            return Err(CsrError::ValuesLength {
                values: values.len(),
                nnz: col_indices.len(),
            });
        }
        for row in 0..num_rows {
            let cols = &col_indices[row_offsets[row]..row_offsets[row + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= num_cols) {
                return Err(CsrError::Columns { row });
            }
        }
        Ok(Self {
            num_rows,
            num_cols,
            row_offsets,
            col_indices,
            values,
            normalization: Normalization::Raw,
        })
    }

    /// Directed 0/1 adjacency where each `(src, dst)` pair makes `src` an
    /// in-neighbor of `dst`. Duplicates collapse; self-loops are kept.
    pub fn from_directed_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, CsrError> {
        let mut rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(src, dst) in edges {
            if src >= n || dst >= n {
                return Err(CsrError::EdgeOutOfRange { src, dst, n });
            }
            rows[dst].insert(src);
        }
        Ok(Self::from_row_sets(n, rows))
    }

    /// Symmetric 0/1 adjacency: every pair is stored in both directions,
    /// duplicates collapse and self-loops are dropped.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, CsrError> {
        let mut rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(CsrError::EdgeOutOfRange { src: u, dst: v, n });
            }
            if u != v {
                rows[u].insert(v);
                rows[v].insert(u);
            }
        }
        Ok(Self::from_row_sets(n, rows))
    }

    fn from_row_sets(n: usize, rows: Vec<BTreeSet<usize>>) -> Self {
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for row in rows {
            col_indices.extend(row);
            row_offsets.push(col_indices.len());
        }
        let values = vec![1.0; col_indices.len()];
        Self {
            num_rows: n,
            num_cols: n,
            row_offsets,
            col_indices,
            values,
            normalization: Normalization::Raw,
        }
    }

    /// Neighbor-mean normalization: row `v` becomes `1/|N_v|` on its support.
    pub fn row_normalized(&self) -> Self {
        let mut out = self.clone();
        for row in 0..self.num_rows {
            let range = self.row_offsets[row]..self.row_offsets[row + 1];
            let deg = range.len();
            for value in &mut out.values[range] {
                *value = 1.0 / deg as f64;
            }
        }
        out.normalization = Normalization::RowMean;
        out
    }

    /// GCN-style `D^{-1/2} A D^{-1/2}` over the stored support.
    pub fn sym_normalized(&self) -> Self {
        let deg: Vec<f64> = (0..self.num_rows).map(|r| self.degree(r) as f64).collect();
        let mut out = self.clone();
        for row in 0..self.num_rows {
            for k in self.row_offsets[row]..self.row_offsets[row + 1] {
                let col = self.col_indices[k];
                let dc = if col < deg.len() { deg[col] } else { 0.0 };
                out.values[k] = if dc > 0.0 {
                    1.0 / (deg[row] * dc).sqrt()
                } else {
                    0.0
                };
            }
        }
        out.normalization = Normalization::Symmetric;
        out
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_cols(&self) -> usize {
        self.num_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// True when rows hold neighbor means.
    pub fn is_normalized(&self) -> bool {
        self.normalization == Normalization::RowMean
    }

    pub fn degree(&self, row: usize) -> usize {
        self.row_offsets[row + 1] - self.row_offsets[row]
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[row]..self.row_offsets[row + 1]]
    }

    /// `(column, value)` pairs of one row.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[row]..self.row_offsets[row + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Whether `A[u,v] != 0` implies `A[v,u] != 0` for every stored entry.
    pub fn is_structurally_symmetric(&self) -> bool {
        self.num_rows == self.num_cols
            && (0..self.num_rows).all(|r| {
                self.neighbors(r)
                    .iter()
                    .all(|&c| self.neighbors(c).binary_search(&r).is_ok())
            })
    }

    /// Undirected pairs `(u, v)` with `u < v`, in row-major order.
    pub fn upper_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.nnz() / 2);
        for r in 0..self.num_rows {
            for &c in self.neighbors(r) {
                if r < c {
                    edges.push((r, c));
                }
            }
        }
        edges
    }

    /// `y = A x` for a dense vector.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// Dense row-major copy, used by tests and small oracles.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.num_rows * self.num_cols];
        for r in 0..self.num_rows {
            for (c, v) in self.row(r) {
                dense[r * self.num_cols + c] = v;
            }
        }
        dense
    }
}
