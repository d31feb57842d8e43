use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "entry ({r}, {c}) outside {rows}x{cols} matrix"
                )));
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |p| vals[p])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    /// `self · dense` for a row-major `cols x width` matrix.
    pub fn matmul_dense(&self, dense: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * width];
        self.matmul_dense_into(dense, width, &mut out);
        out
    }

    pub(crate) fn matmul_dense_into(&self, dense: &[f64], width: usize, out: &mut [f64]) {
        debug_assert_eq!(dense.len(), self.cols * width);
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                let src = &dense[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    /// `selfᵀ · dense` accumulated into `out` (`cols x width`).
    pub(crate) fn transpose_matmul_dense_into(&self, dense: &[f64], width: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let src = &dense[r * width..(r + 1) * width];
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                out[r * self.cols + c] = v;
            }
        }
        out
    }
}

/// Sparse adjacency, degree vector and edge count of an undirected graph.
///
/// Together these represent the modularity matrix `B = A - d dᵀ / 2m`
/// without ever forming it.
#[derive(Debug, Clone)]
pub struct ModularityOperand {
    adjacency: CsrMatrix,
    degrees: Vec<f64>,
    edge_count: f64,
}

impl ModularityOperand {
    pub fn new(adjacency: CsrMatrix, degrees: Vec<f64>, edge_count: f64) -> Result<Self> {
        if adjacency.rows() != adjacency.cols() || degrees.len() != adjacency.rows() {
            return Err(Error::Shape(format!(
                "adjacency {}x{} with {} degrees",
                adjacency.rows(),
                adjacency.cols(),
                degrees.len()
            )));
        }
        if !(edge_count > 0.0) {
            return Err(Error::DegenerateGraph(
                "modularity needs at least one edge".into(),
            ));
        }
        Ok(Self {
            adjacency,
            degrees,
            edge_count,
        })
    }

    /// Uses the row sums of `adjacency` as degrees and half their total as `m`.
    pub fn from_adjacency(adjacency: CsrMatrix) -> Result<Self> {
        let degrees = adjacency.row_sums();
        let m = degrees.iter().sum::<f64>() / 2.0;
        Self::new(adjacency, degrees, m)
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn edge_count(&self) -> f64 {
        self.edge_count
    }

    pub fn nodes(&self) -> usize {
        self.degrees.len()
    }
}
