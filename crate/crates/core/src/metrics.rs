//! Reconstruction quality: relative error, correlation coefficient and mean
//! squared error over all (node, time) entries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub re: f64,
    pub cc: f64,
    pub mse: f64,
    /// Number of (node, time) entries.
    pub n: usize,
    /// Reference nodes with a constant time course, left out of the CC sums.
    pub skipped_constant_nodes: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "re,cc,mse,n";

    pub fn csv_row(&self) -> String {
        format!("{:.9e},{:.9e},{:.9e},{}", self.re, self.cc, self.mse, self.n)
    }
}

/// Compares an estimate against the reference (both nodes x times).
///
/// CC pools the per-node mean-centered series into one quotient. Nodes whose
/// reference series is constant contribute nothing to either CC sum.
pub fn evaluate(reference: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<MetricsReport> {
    if reference.shape() != estimate.shape() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: reference.shape(),
            rhs: estimate.shape(),
        });
    }
    let ref_sq: f64 = reference.iter().map(|u| u * u).sum();
    if ref_sq == 0.0 {
        return Err(Error::ZeroReference);
    }
    let n = reference.len();
    let err_sq: f64 = reference
        .iter()
        .zip(estimate.iter())
        .map(|(u, e)| (e - u).powi(2))
        .sum();

    let (mut num, mut est_var, mut ref_var) = (0.0, 0.0, 0.0);
    let mut skipped = 0;
    for s in 0..reference.nrows() {
        let r = reference.row(s);
        let e = estimate.row(s);
        let r_mean = r.mean();
        let e_mean = e.mean();
        if r.iter().all(|&x| x == r[0]) {
            skipped += 1;
            continue;
        }
        for (ri, ei) in r.iter().zip(e.iter()) {
            let (dr, de) = (ri - r_mean, ei - e_mean);
            num += dr * de;
            est_var += de * de;
            ref_var += dr * dr;
        }
    }
    let denom = (est_var * ref_var).sqrt();
    let cc = if denom > 0.0 {
        (num / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };

    Ok(MetricsReport {
        re: (err_sq / ref_sq).sqrt(),
        cc,
        mse: err_sq / n as f64,
        n,
        skipped_constant_nodes: skipped,
    })
}
