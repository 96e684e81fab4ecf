use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::Case;
use super::mean_std;
use super::metrics::read_csv;
use super::run::{CaseSummary, CASE_FILE, METRICS_FILE};
use crate::error::{Error, Result};

/// Mean and spread of selected test errors for one case of one network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseAggregate {
    pub network: String,
    pub weight_count: usize,
    pub case: Case,
    pub order: String,
    /// Row key shared across networks: the case name, or the order for
    /// explicit cases.
    pub label: String,
    pub seeds: usize,
    pub mean_test_error: f64,
    pub std_test_error: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub seeds: usize,
    pub mean_train_error: f64,
    pub mean_val_error: f64,
    pub mean_test_error: f64,
    pub std_test_error: f64,
}

/// Smaller network's error minus the larger network's, for one row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Improvement {
    pub label: String,
    pub small: f64,
    pub big: f64,
    pub delta: f64,
}

impl Improvement {
    pub fn formatted(&self) -> String {
        format!("{:.3}", self.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub cases: Vec<CaseAggregate>,
    /// Networks by ascending weight count.
    pub networks: Vec<String>,
    pub improvements: Vec<Improvement>,
}

impl AggregateReport {
    pub fn improvement(&self, label: &str) -> Option<&Improvement> {
        self.improvements.iter().find(|i| i.label == label)
    }

    pub fn case(&self, network: &str, label: &str) -> Option<&CaseAggregate> {
        self.cases.iter().find(|c| c.network == network && c.label == label)
    }

    /// Plain-text table: one row per label, one column per network.
    pub fn table(&self) -> String {
        let mut labels: Vec<&CaseAggregate> = Vec::new();
        for c in &self.cases {
            if !labels.iter().any(|l| l.label == c.label) {
                labels.push(c);
            }
        }
        let mut out = format!("{:<12}", "case");
        for n in &self.networks {
            let _ = write!(out, "  {n:>20}");
        }
        if self.networks.len() >= 2 {
            let _ = write!(out, "  {:>11}", "improvement");
        }
        out.push('\n');
        for row in labels {
            let _ = write!(out, "{:<12}", row.label);
            for n in &self.networks {
                let cell = self
                    .case(n, &row.label)
                    .map_or_else(|| "-".to_string(), |c| format!("{:.4} ± {:.4}", c.mean_test_error, c.std_test_error));
                let _ = write!(out, "  {cell:>20}");
            }
            if self.networks.len() >= 2 {
                let delta = self.improvement(&row.label).map_or_else(|| "-".to_string(), Improvement::formatted);
                let _ = write!(out, "  {delta:>11}");
            }
            out.push('\n');
        }
        out
    }
}

/// Every `case.json` under `root`, in path order.
pub fn find_case_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.is_file() {
            if dir.file_name().is_some_and(|n| n == CASE_FILE) {
                found.push(dir);
            }
            continue;
        }
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == CASE_FILE) {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn curve(case_dir: &Path, summary: &CaseSummary) -> Vec<CurvePoint> {
    let mut by_epoch: BTreeMap<usize, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for s in summary.seeds.iter().filter(|s| s.selected.is_some()) {
        let path = case_dir.join(s.seed.to_string()).join(METRICS_FILE);
        match read_csv(&path) {
            Ok(rows) => {
                for r in rows {
                    by_epoch.entry(r.epoch).or_default().push((r.train_error, r.val_error, r.test_error));
                }
            }
            Err(e) => log::warn!("no curve for seed {} of {}: {e}", s.seed, case_dir.display()),
        }
    }
    by_epoch
        .into_iter()
        .map(|(epoch, v)| {
            let col = |f: fn(&(f64, f64, f64)) -> f64| v.iter().map(f).collect::<Vec<_>>();
            let (mean_test_error, std_test_error) = mean_std(&col(|x| x.2)).expect("non-empty");
            CurvePoint {
                epoch,
                seeds: v.len(),
                mean_train_error: mean_std(&col(|x| x.0)).expect("non-empty").0,
                mean_val_error: mean_std(&col(|x| x.1)).expect("non-empty").0,
                mean_test_error,
                std_test_error,
            }
        })
        .collect()
}

/// Aggregates the case summaries found under `inputs`.
pub fn aggregate(inputs: &[PathBuf]) -> Result<AggregateReport> {
    let mut cases = Vec::new();
    for input in inputs {
        let files = find_case_files(input)?;
        if files.is_empty() {
            log::warn!("no completed cases under {}", input.display());
        }
        for file in files {
            let summary = CaseSummary::load(&file)?;
            let errors = summary.test_errors();
            let Some((mean, std)) = mean_std(&errors) else {
                log::warn!("{}: no seed completed; omitted", file.display());
                continue;
            };
            let dir = file.parent().expect("case file has a directory");
            cases.push(CaseAggregate {
                label: if summary.case == Case::Explicit { summary.order.clone() } else { summary.case.to_string() },
                curve: curve(dir, &summary),
                network: summary.network,
                weight_count: summary.weight_count,
                case: summary.case,
                order: summary.order,
                seeds: errors.len(),
                mean_test_error: mean,
                std_test_error: std,
            });
        }
    }
    cases.sort_by(|a, b| (a.weight_count, a.case, &a.order).cmp(&(b.weight_count, b.case, &b.order)));
    let mut networks: Vec<(usize, String)> = cases.iter().map(|c| (c.weight_count, c.network.clone())).collect();
    networks.dedup();
    let networks: Vec<String> = networks.into_iter().map(|(_, n)| n).collect();

    let mut improvements = Vec::new();
    if let (Some(small), Some(big)) = (networks.first(), networks.last()) {
        if small != big {
            for c in cases.iter().filter(|c| &c.network == small) {
                match cases.iter().find(|b| &b.network == big && b.label == c.label) {
                    Some(b) => improvements.push(Improvement {
                        label: c.label.clone(),
                        small: c.mean_test_error,
                        big: b.mean_test_error,
                        delta: c.mean_test_error - b.mean_test_error,
                    }),
                    None => log::warn!("case {} missing for {big}; no improvement", c.label),
                }
            }
        }
    }
    Ok(AggregateReport { cases, networks, improvements })
}

/// Aggregates `inputs` and writes the table, a JSON dump and one curve CSV
/// per case into `out`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<AggregateReport> {
    let report = aggregate(inputs)?;
    let curves = out.join("curves");
    fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    let write = |path: PathBuf, text: String| fs::write(&path, text).map_err(|e| Error::io(&path, e));
    write(out.join("report.txt"), report.table())?;
    write(out.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    for c in &report.cases {
        let mut text = String::from("epoch,seeds,mean_train_error,mean_val_error,mean_test_error,std_test_error\n");
        for p in &c.curve {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                p.epoch, p.seeds, p.mean_train_error, p.mean_val_error, p.mean_test_error, p.std_test_error
            );
        }
        write(curves.join(format!("{}_{}_{}.csv", c.network, c.case, c.order)), text)?;
    }
    Ok(report)
}
