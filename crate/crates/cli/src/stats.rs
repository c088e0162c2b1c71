//! Aggregation of per-run metrics into summary rows.

use ecgi_core::MetricsReport;

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub runs: usize,
    pub re: (f64, f64),
    pub cc: (f64, f64),
    pub mse: (f64, f64),
    /// Fraction of network runs flagged as badly initialized; `None` when no
    /// run carried a verdict.
    pub bad_init_rate: Option<f64>,
}

pub const SUMMARY_COLUMNS: &str = "runs,re_mean,re_std,cc_mean,cc_std,mse_mean,mse_std,bad_init_rate";

impl Summary {
    pub fn of(metrics: &[MetricsReport], bad_init: &[Option<bool>]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| mean_std(&metrics.iter().map(f).collect::<Vec<_>>());
        let verdicts: Vec<bool> = bad_init.iter().flatten().copied().collect();
        Self {
            runs: metrics.len(),
            re: col(|m| m.re),
            cc: col(|m| m.cc),
            mse: col(|m| m.mse),
            bad_init_rate: (!verdicts.is_empty())
                .then(|| verdicts.iter().filter(|b| **b).count() as f64 / verdicts.len() as f64),
        }
    }

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.runs,
            self.re.0,
            self.re.1,
            self.cc.0,
            self.cc.1,
            self.mse.0,
            self.mse.1,
            self.bad_init_rate.map(|r| r.to_string()).unwrap_or_default()
        )
    }
}
