//! Declarative experiment configs, multi-seed sweeps, order search and
//! aggregation of finished runs.

mod config;
pub mod metrics;
mod report;
mod run;

pub use config::{Case, DataSource, ExperimentConfig, SensitivitySettings, DEFAULT_SEARCH_CAP};
pub use report::{aggregate, cmd_report, find_case_files, AggregateReport, CaseAggregate, CurvePoint, Improvement};
pub use run::{
    cmd_search_orders, cmd_sensitivity, cmd_train, lr_label, order_count, order_label, pending_jobs, CaseSummary, RunSummary,
    SearchResult, SearchRow, SeedResult, Selected, CASE_FILE, CHECKPOINT_FILE, METRICS_FILE, SEARCH_FILE, SUMMARY_FILE,
};

/// Lowercase hexadecimal encoding.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, var.sqrt()))
}
