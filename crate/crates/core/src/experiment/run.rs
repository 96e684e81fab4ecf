//! Training sweeps over seeds, learning rates and orders.
//!
//! Every (order, seed, lr) job owns a directory keyed by a fingerprint of
//! its network, plan and data. A job whose directory already holds a
//! summary with the same fingerprint is read back instead of retrained, so
//! an interrupted sweep resumes where it stopped.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Case, ExperimentConfig};
use super::metrics::{csv_row, CSV_HEADER};
use super::{hex, mean_std};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::{Network, NetworkSpec};
use crate::par::{self, Parallelism};
use crate::schedule::{run_iterative_observed, BinarizationOrder, TrainPlan};
use crate::sensitivity::{build_report, run_probes, SensitivityReport};

/// Bumped whenever training semantics change, invalidating cached runs.
const JOB_FORMAT: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CASE_FILE: &str = "case.json";

/// Directory name for a case's order; `none` when the case has no order.
pub fn order_label(order: Option<&BinarizationOrder>) -> String {
    order.map_or_else(|| "none".to_string(), |o| o.to_string())
}

pub fn lr_label(lr: f64) -> String {
    format!("lr-{lr:e}")
}

#[derive(Debug, Clone)]
struct Job {
    spec: NetworkSpec,
    plan: TrainPlan,
    dir: PathBuf,
    fingerprint: String,
    case: Case,
    order: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub epoch: usize,
    pub val_error: f64,
    pub test_error: f64,
}

/// What one job produced; written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fingerprint: String,
    pub network: String,
    pub case: Case,
    pub order: String,
    pub seed: u64,
    pub lr: f64,
    pub epochs_run: usize,
    /// Present when the run finished.
    pub selected: Option<Selected>,
    pub final_test_error: Option<f64>,
    pub failure: Option<String>,
    pub wall_time: f64,
}

impl RunSummary {
    pub fn completed(&self) -> bool {
        self.selected.is_some()
    }
}

fn fingerprint(spec: &NetworkSpec, plan: &TrainPlan, data_fingerprint: &str) -> String {
    let mut h = Sha256::new();
    h.update(JOB_FORMAT.to_le_bytes());
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    h.update(serde_json::to_vec(plan).expect("plan serializes"));
    h.update(data_fingerprint.as_bytes());
    hex(&h.finalize()[..12])
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value).expect("summary serializes") + "\n";
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cached(job: &Job) -> Option<RunSummary> {
    let summary: RunSummary = read_json(&job.dir.join(SUMMARY_FILE)).ok()?;
    let complete = summary.fingerprint == job.fingerprint
        && job.dir.join(METRICS_FILE).exists()
        && (!summary.completed() || job.dir.join(CHECKPOINT_FILE).exists());
    complete.then_some(summary)
}

fn execute(job: &Job, data: &Splits, network: &str) -> Result<RunSummary> {
    if let Some(summary) = cached(job) {
        log::info!("reusing {}", job.dir.display());
        return Ok(summary);
    }
    create_dir(&job.dir)?;
    let metrics_path = job.dir.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    let mut write_error = writeln!(csv, "{CSV_HEADER}").err();
    let mut observer = |r: &crate::schedule::MetricsRecord| {
        if write_error.is_none() {
            write_error = writeln!(csv, "{}", csv_row(r)).and_then(|_| csv.flush()).err();
        }
    };
    let net = Network::new(job.spec.clone(), job.plan.seed)?;
    let outcome = run_iterative_observed(&job.plan, net, data, Parallelism::Sequential, &mut observer);
    if let Some(e) = write_error {
        return Err(Error::io(&metrics_path, e));
    }
    let base = RunSummary {
        fingerprint: job.fingerprint.clone(),
        network: network.to_string(),
        case: job.case,
        order: job.order.clone(),
        seed: job.plan.seed,
        lr: job.plan.lr,
        epochs_run: 0,
        selected: None,
        final_test_error: None,
        failure: None,
        wall_time: 0.0,
    };
    let summary = match outcome {
        Ok(run) => {
            checkpoint::save(&run.best.network, &job.dir.join(CHECKPOINT_FILE))?;
            RunSummary {
                epochs_run: run.records.len(),
                selected: Some(Selected {
                    epoch: run.best.epoch,
                    val_error: run.best.val_error,
                    test_error: run.best.test_error,
                }),
                final_test_error: run.records.last().map(|r| r.test_error),
                wall_time: run.records.iter().map(|r| r.wall_time).sum(),
                ..base
            }
        }
        Err(aborted) => {
            log::warn!("{}: {aborted}", job.dir.display());
            RunSummary {
                epochs_run: aborted.records.len(),
                failure: Some(aborted.error.to_string()),
                wall_time: aborted.records.iter().map(|r| r.wall_time).sum(),
                ..base
            }
        }
    };
    write_json(&job.dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Result for one seed at the case's selected learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub selected: Option<Selected>,
    pub failure: Option<String>,
}

/// Case-level outcome; written as `case.json` in the case directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub network: String,
    pub weight_count: usize,
    pub case: Case,
    pub order: String,
    /// Learning rate with the lowest mean selected validation error.
    pub lr: f64,
    /// Mean selected validation error per grid point; diverged runs count as 1.
    pub lr_scores: Vec<(f64, f64)>,
    pub seeds: Vec<SeedResult>,
    /// Jobs across the whole grid that did not finish.
    pub failed_jobs: usize,
}

impl CaseSummary {
    pub fn test_errors(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.selected.map(|x| x.test_error)).collect()
    }

    pub fn mean_test_error(&self) -> Option<f64> {
        mean_std(&self.test_errors()).map(|(m, _)| m)
    }

    pub fn all_completed(&self) -> bool {
        self.failed_jobs == 0
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

struct CasePlan {
    dir: PathBuf,
    order: String,
    jobs: Vec<Job>,
}

fn plan_case(cfg: &ExperimentConfig, order: Option<BinarizationOrder>, data_fp: &str) -> Result<CasePlan> {
    let spec = cfg.network_spec()?;
    let label = order_label(order.as_ref());
    let dir = cfg.output.join(cfg.case.name()).join(&label);
    let layers = spec.weight_layer_count();
    let order = order.unwrap_or_else(|| BinarizationOrder::forward(layers));
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        for &lr in &cfg.lr_grid {
            let plan = cfg.plan(order.clone(), seed, lr)?;
            plan.validate(layers)?;
            jobs.push(Job {
                fingerprint: fingerprint(&spec, &plan, data_fp),
                dir: dir.join(seed.to_string()).join(lr_label(lr)),
                spec: spec.clone(),
                plan,
                case: cfg.case,
                order: label.clone(),
            });
        }
    }
    Ok(CasePlan { dir, order: label, jobs })
}

fn copy_selected(from: &Path, to: &Path) -> Result<()> {
    for name in [METRICS_FILE, SUMMARY_FILE, CHECKPOINT_FILE] {
        let src = from.join(name);
        if src.exists() {
            let dst = to.join(name);
            fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
        }
    }
    Ok(())
}

fn finalize_case(cfg: &ExperimentConfig, plan: &CasePlan, results: &[RunSummary]) -> Result<CaseSummary> {
    let spec = cfg.network_spec()?;
    let lr_scores: Vec<(f64, f64)> = cfg
        .lr_grid
        .iter()
        .map(|&lr| {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.lr == lr)
                .map(|r| r.selected.map_or(1.0, |s| s.val_error))
                .collect();
            (lr, mean_std(&vals).map_or(1.0, |(m, _)| m))
        })
        .collect();
    let (lr, _) = lr_scores
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (lr, score)| match best {
            Some((_, s)) if s <= score => best,
            _ => Some((lr, score)),
        })
        .expect("grid is non-empty");
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let (job, run) = plan
            .jobs
            .iter()
            .zip(results)
            .find(|(j, _)| j.plan.seed == seed && j.plan.lr == lr)
            .expect("every seed has a job at every grid point");
        copy_selected(&job.dir, job.dir.parent().expect("lr dir has a seed dir"))?;
        seeds.push(SeedResult { seed, selected: run.selected, failure: run.failure.clone() });
    }
    let summary = CaseSummary {
        network: cfg.network.clone(),
        weight_count: spec.weight_count(),
        case: cfg.case,
        order: plan.order.clone(),
        lr,
        lr_scores,
        seeds,
        failed_jobs: results.iter().filter(|r| !r.completed()).count(),
    };
    summary.save(&plan.dir.join(CASE_FILE))?;
    Ok(summary)
}

fn run_cases(cfg: &ExperimentConfig, plans: &[CasePlan], data: &Splits, par: Parallelism) -> Result<Vec<Vec<RunSummary>>> {
    let jobs: Vec<&Job> = plans.iter().flat_map(|p| &p.jobs).collect();
    log::info!("{} jobs for {} on {}", jobs.len(), cfg.case, cfg.network);
    let mut results = par::map(par, jobs, |job| execute(job, data, &cfg.network)).into_iter();
    plans
        .iter()
        .map(|p| results.by_ref().take(p.jobs.len()).collect::<Result<Vec<_>>>())
        .collect()
}

/// Trains every seed at every grid learning rate for the configured case.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Splits, par: Parallelism) -> Result<CaseSummary> {
    cfg.validate()?;
    let plan = plan_case(cfg, cfg.resolve_order()?, &data.fingerprint())?;
    let results = run_cases(cfg, std::slice::from_ref(&plan), data, par)?;
    finalize_case(cfg, &plan, &results[0])
}

/// Job directories of the configured case that have no reusable result yet.
pub fn pending_jobs(cfg: &ExperimentConfig, data: &Splits) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let plan = plan_case(cfg, cfg.resolve_order()?, &data.fingerprint())?;
    Ok(plan.jobs.into_iter().filter(|j| cached(j).is_none()).map(|j| j.dir).collect())
}

/// One order's row in an exhaustive search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub order: String,
    pub mean_test_error: Option<f64>,
    pub std_test_error: Option<f64>,
    pub completed_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Sorted by mean test error, then order string.
    pub rows: Vec<SearchRow>,
    pub cases: Vec<CaseSummary>,
}

impl SearchResult {
    pub fn all_completed(&self) -> bool {
        self.cases.iter().all(CaseSummary::all_completed)
    }
}

pub const SEARCH_FILE: &str = "search_orders.csv";

fn factorial_capped(n: usize, cap: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&v| v <= cap))
}

/// Number of orders of `layers` layers, saturating.
pub fn order_count(layers: usize) -> u128 {
    (1..=layers as u128).fold(1u128, |acc, k| acc.saturating_mul(k))
}

/// Trains every order of the network's layers as an explicit case.
pub fn cmd_search_orders(cfg: &ExperimentConfig, data: &Splits, par: Parallelism) -> Result<SearchResult> {
    let layers = cfg.network_spec()?.weight_layer_count();
    if factorial_capped(layers, cfg.search_cap).is_none() {
        return Err(Error::config(format!(
            "refusing exhaustive search: {layers} layers give {} orders, above the cap of {}",
            order_count(layers),
            cfg.search_cap
        )));
    }
    let orders = BinarizationOrder::all(layers);
    let data_fp = data.fingerprint();
    let configs: Vec<ExperimentConfig> = orders
        .iter()
        .map(|o| ExperimentConfig { case: Case::Explicit, order: Some(o.clone()), ..cfg.clone() })
        .collect();
    let plans = configs
        .iter()
        .zip(&orders)
        .map(|(c, o)| plan_case(c, Some(o.clone()), &data_fp))
        .collect::<Result<Vec<_>>>()?;
    let results = run_cases(cfg, &plans, data, par)?;
    let cases = configs
        .iter()
        .zip(&plans)
        .zip(&results)
        .map(|((c, p), r)| finalize_case(c, p, r))
        .collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<SearchRow> = cases
        .iter()
        .map(|c| {
            let errors = c.test_errors();
            let stats = mean_std(&errors);
            SearchRow {
                order: c.order.clone(),
                mean_test_error: stats.map(|s| s.0),
                std_test_error: stats.map(|s| s.1),
                completed_seeds: errors.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &SearchRow| r.mean_test_error.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then_with(|| a.order.cmp(&b.order))
    });
    create_dir(&cfg.output)?;
    let path = cfg.output.join(SEARCH_FILE);
    let mut text = String::from("order,mean_test_error,std_test_error,completed_seeds\n");
    for r in &rows {
        let f = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        text += &format!("{},{},{},{}\n", r.order, f(r.mean_test_error), f(r.std_test_error), r.completed_seeds);
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(SearchResult { rows, cases })
}

/// Runs one probe per layer and writes the report.
pub fn cmd_sensitivity(cfg: &ExperimentConfig, data: &Splits, par: Parallelism) -> Result<(SensitivityReport, PathBuf)> {
    let setup = cfg.probe_setup()?;
    let layers = setup.spec.weight_layer_count();
    let probes = run_probes(&setup, data, par)?;
    let report = build_report(&cfg.network, setup.epochs, setup.selection, probes, layers)?;
    let path = cfg.sensitivity_report_path();
    report.save(&path)?;
    Ok((report, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_cap_arithmetic() {
        assert_eq!(factorial_capped(3, 24), Some(6));
        assert_eq!(factorial_capped(4, 24), Some(24));
        assert_eq!(factorial_capped(5, 24), None);
        assert_eq!(order_count(9), 362_880);
        assert_eq!(order_count(40), u128::MAX);
    }

    #[test]
    fn labels() {
        assert_eq!(order_label(None), "none");
        assert_eq!(order_label(Some(&"132".parse().unwrap())), "132");
        assert_eq!(lr_label(1e-3), "lr-1e-3");
        assert_eq!(lr_label(3e-4), "lr-3e-4");
    }
}
