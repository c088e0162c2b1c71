//! Node-by-time matrices and their CSV form.
//!
//! CSV layout: a header `node,t0,t1,...` followed by one row per node (or
//! sensor), `index,value,value,...`, values printed with 9 significant
//! digits.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::fmt_sig9;
use crate::ops::TemporalGrid;

/// Potentials on `rows` nodes sampled on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalField {
    values: DMatrix<f64>,
    grid: TemporalGrid,
}

impl SpatioTemporalField {
    pub fn new(values: DMatrix<f64>, grid: TemporalGrid) -> Result<Self> {
        if values.ncols() != grid.samples() {
            return Err(Error::Dimension(format!(
                "field has {} columns, grid has {} samples",
                values.ncols(),
                grid.samples()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("field contains non-finite values".into()));
        }
        Ok(Self { values, grid })
    }

    pub fn zeros(nodes: usize, grid: TemporalGrid) -> Self {
        Self {
            values: DMatrix::zeros(nodes, grid.samples()),
            grid,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn grid(&self) -> &TemporalGrid {
        &self.grid
    }

    pub fn nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn times(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, node: usize, t: usize) -> f64 {
        self.values[(node, t)]
    }

    /// Reorders the time axis: column `k` of the result is column `perm[k]`.
    pub fn permute_time(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.times());
        let values = DMatrix::from_fn(self.nodes(), self.times(), |i, k| self.values[(i, perm[k])]);
        Self {
            values,
            grid: self.grid,
        }
    }

    pub fn to_csv_string(&self) -> String {
        matrix_to_csv(&self.values)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>, step: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let values = matrix_from_csv(&text)?;
        let grid = TemporalGrid::new(step, values.ncols())?;
        Self::new(values, grid)
    }
}

/// Serializes a matrix with the `node,t0,...` header.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 16);
    out.push_str("node");
    for k in 0..m.ncols() {
        let _ = write!(out, ",t{k}");
    }
    out.push('\n');
    for i in 0..m.nrows() {
        let _ = write!(out, "{i}");
        for k in 0..m.ncols() {
            out.push(',');
            out.push_str(&fmt_sig9(m[(i, k)]));
        }
        out.push('\n');
    }
    out
}

/// Parses the `node,t0,...` layout back into a matrix.
pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols = header.split(',').count().saturating_sub(1);
    if !header.starts_with("node") || cols == 0 {
        return Err(Error::Csv {
            line: 1,
            message: "expected header node,t0,...".into(),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols + 1 {
            return Err(Error::Csv {
                line: idx + 1,
                message: format!("expected {} fields, found {}", cols + 1, fields.len()),
            });
        }
        for f in &fields[1..] {
            data.push(f.trim().parse::<f64>().map_err(|e| Error::Csv {
                line: idx + 1,
                message: format!("bad number {f:?}: {e}"),
            })?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_within_printed_precision() {
        let grid = TemporalGrid::new(0.1, 6).unwrap();
        let m = DMatrix::from_fn(3, 6, |i, k| (i as f64 + 1.0) * (k as f64 * 0.37).sin() / 7.0);
        let f = SpatioTemporalField::new(m.clone(), grid).unwrap();
        let text = f.to_csv_string();
        assert!(text.starts_with("node,t0,t1,t2,t3,t4,t5\n0,"));
        let back = matrix_from_csv(&text).unwrap();
        assert!((back - m).abs().max() < 1e-9);
    }

    #[test]
    fn ragged_rows_name_the_line() {
        let err = matrix_from_csv("node,t0,t1\n0,1,2\n1,3\n").unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }));
    }

    #[test]
    fn column_count_must_match_grid() {
        let grid = TemporalGrid::new(0.1, 5).unwrap();
        assert!(SpatioTemporalField::new(DMatrix::zeros(2, 6), grid).is_err());
    }
}
