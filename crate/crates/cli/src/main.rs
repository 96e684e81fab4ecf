use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use layerbin::experiment::{self, DataSource, ExperimentConfig};
use layerbin::par::Parallelism;

#[derive(Parser)]
#[command(name = "layerbin", version, about = "Layer-by-layer weight binarization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and learning rate of one case.
    Train(RunArgs),
    /// Train one probe per layer and write the sensitivity report.
    Sensitivity(RunArgs),
    /// Train every layer order and rank them by test error.
    SearchOrders(RunArgs),
    /// Aggregate finished cases into tables and curve files.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Directory holding the MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Concurrent jobs; 1 runs sequentially, default uses every core.
    #[arg(short, long)]
    workers: Option<usize>,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directories (or case directories) of finished runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where the tables and curves are written.
    #[arg(short, long, default_value = "report")]
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<(ExperimentConfig, Parallelism)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(dir) = &self.data_dir {
            match &mut cfg.data {
                DataSource::Mnist { dir: d } => *d = Some(dir.clone()),
                DataSource::Synthetic(_) => bail!("--data-dir given but the config uses synthetic data"),
            }
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if self.workers == Some(0) {
            bail!("--workers must be at least 1");
        }
        cfg.validate()?;
        Ok((cfg, Parallelism::from_workers(self.workers)))
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let (cfg, par) = args.load()?;
            let data = cfg.data.load().context("loading data")?;
            let case = experiment::cmd_train(&cfg, &data, par)?;
            println!("{} {} order {} lr {:e}", case.network, case.case, case.order, case.lr);
            for s in &case.seeds {
                match (&s.selected, &s.failure) {
                    (Some(x), _) => println!(
                        "  seed {:>4}: test {:.4} (val {:.4} at epoch {})",
                        s.seed, x.test_error, x.val_error, x.epoch
                    ),
                    (None, f) => println!("  seed {:>4}: failed: {}", s.seed, f.as_deref().unwrap_or("unknown")),
                }
            }
            if let Some((mean, std)) = experiment::mean_std(&case.test_errors()) {
                println!("  mean test error {mean:.4} ± {std:.4}");
            }
            Ok(case.all_completed())
        }
        Command::Sensitivity(args) => {
            let (cfg, par) = args.load()?;
            let data = cfg.data.load().context("loading data")?;
            let (report, path) = experiment::cmd_sensitivity(&cfg, &data, par)?;
            print!("{}", report.table());
            println!("written to {}", path.display());
            Ok(report.probes.iter().all(|p| !p.failed))
        }
        Command::SearchOrders(args) => {
            let (cfg, par) = args.load()?;
            let data = cfg.data.load().context("loading data")?;
            let result = experiment::cmd_search_orders(&cfg, &data, par)?;
            println!("{:>8}  {:>10}  {:>10}  seeds", "order", "mean", "std");
            for r in &result.rows {
                let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                println!("{:>8}  {:>10}  {:>10}  {}", r.order, f(r.mean_test_error), f(r.std_test_error), r.completed_seeds);
            }
            Ok(result.all_completed())
        }
        Command::Report(args) => {
            let report = experiment::cmd_report(&args.runs, &args.out)?;
            print!("{}", report.table());
            Ok(!report.cases.is_empty())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("not every requested run completed");
            ExitCode::FAILURE
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
