//! Minimal compressed-sparse-row matrix.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed and
    /// column indices within a row end up sorted.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for mut row in per_row {
            row.sort_by_key(|&(c, _)| c);
            let mut it = row.into_iter().peekable();
            while let Some((c, mut v)) = it.next() {
                while let Some(&(c2, v2)) = it.peek() {
                    if c2 != c {
                        break;
                    }
                    v += v2;
                    it.next();
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
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

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `self * m` for a dense right-hand side.
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.cols);
        let mut out = DMatrix::zeros(self.rows, m.ncols());
        for k in 0..m.ncols() {
            let col = m.column(k);
            for r in 0..self.rows {
                out[(r, k)] = self.row(r).map(|(c, v)| v * col[c]).sum();
            }
        }
        out
    }

    /// `m * self^T`: row `i` of the result is `self` applied to row `i` of `m`.
    pub fn apply_to_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.ncols(), self.cols);
        let mut out = DMatrix::zeros(m.nrows(), self.rows);
        for r in 0..self.rows {
            for i in 0..m.nrows() {
                out[(i, r)] = self.row(r).map(|(c, v)| v * m[(i, c)]).sum();
            }
        }
        out
    }

    /// `m * self`, the adjoint of [`CsrMatrix::apply_to_rows`].
    pub fn apply_transpose_to_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.ncols(), self.rows);
        let mut out = DMatrix::zeros(m.nrows(), self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                for i in 0..m.nrows() {
                    out[(i, c)] += v * m[(i, r)];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let trip: Vec<(usize, usize, f64)> = (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        CsrMatrix::from_triplets(self.cols, self.rows, &trip)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d[(r, c)] += v;
            }
        }
        d
    }
}
