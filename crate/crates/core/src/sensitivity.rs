//! Sensitivity probes: one model per layer with only that layer binarized.
//!
//! Layers whose probe reaches a low validation error are the least
//! sensitive to binarization and go first in the ascending order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarize::BinarizationState;
use crate::data::{epoch_seed, Splits};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, OptimizerKind};
use crate::par::{self, Parallelism};
use crate::schedule::{run_iterative, BinarizationOrder, Milestone, Regime, TrainPlan};

/// Which epoch of a probe counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeSelection {
    /// Lowest validation error over all epochs.
    #[default]
    Best,
    /// Validation error after the final epoch.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSeeds {
    /// Every probe starts from the same initialization.
    #[default]
    Shared,
    /// Each layer's probe gets its own seed derived from the base seed.
    PerProbe,
}

impl ProbeSeeds {
    pub fn seed_for(self, base: u64, layer: usize) -> u64 {
        match self {
            ProbeSeeds::Shared => base,
            ProbeSeeds::PerProbe => epoch_seed(base, layer),
        }
    }
}

/// Everything a probe needs except the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSetup {
    pub spec: NetworkSpec,
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub milestones: Vec<Milestone>,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    pub seeds: ProbeSeeds,
    pub selection: ProbeSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub error: f64,
    /// Learning rate that reached `error`; absent when every grid point diverged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub failed: bool,
}

/// Error assigned to a probe that diverged at every learning rate.
pub const FAILED_PROBE_ERROR: f64 = 1.0;

/// Trains the probe for `layer` (1-based) at every learning rate of the grid.
pub fn run_probe(setup: &ProbeSetup, layer: usize, data: &Splits, par: Parallelism) -> Result<ProbeResult> {
    if setup.lr_grid.is_empty() {
        return Err(Error::config("learning-rate grid is empty"));
    }
    let seed = setup.seeds.seed_for(setup.seed, layer);
    let runs = par::map(par, setup.lr_grid.clone(), |lr| probe_at(setup, layer, seed, lr, data));
    let mut best: Option<(f64, f64)> = None;
    for (lr, run) in setup.lr_grid.iter().zip(runs) {
        match run {
            Ok(error) if best.is_none_or(|(e, _)| error < e) => best = Some((error, *lr)),
            Ok(_) => {}
            Err(Error::Diverged { epoch, batch, loss }) => {
                log::warn!("probe {layer} at lr {lr} diverged in epoch {epoch}, batch {batch} (loss {loss})")
            }
            Err(e) => return Err(e),
        }
    }
    Ok(match best {
        Some((error, lr)) => ProbeResult { layer, error, lr: Some(lr), seed, failed: false },
        None => ProbeResult { layer, error: FAILED_PROBE_ERROR, lr: None, seed, failed: true },
    })
}

fn probe_at(setup: &ProbeSetup, layer: usize, seed: u64, lr: f64, data: &Splits) -> Result<f64> {
    let layers = setup.spec.weight_layer_count();
    let plan = TrainPlan {
        regime: Regime::Fixed { state: BinarizationState::one_hot(layers, layer)? },
        total_epochs: setup.epochs,
        lr,
        milestones: setup.milestones.clone(),
        optimizer: setup.optimizer,
        batch_size: setup.batch_size,
        seed,
    };
    let net = Network::new(setup.spec.clone(), seed)?;
    let run = run_iterative(&plan, net, data, Parallelism::Sequential)?;
    Ok(match setup.selection {
        ProbeSelection::Best => run.best.val_error,
        ProbeSelection::Last => run.records.last().map_or(FAILED_PROBE_ERROR, |r| r.val_error),
    })
}

/// Runs one probe per weight-bearing layer, concurrently.
pub fn run_probes(setup: &ProbeSetup, data: &Splits, par: Parallelism) -> Result<Vec<ProbeResult>> {
    let layers: Vec<usize> = (1..=setup.spec.weight_layer_count()).collect();
    par::map(par, layers, |layer| run_probe(setup, layer, data, Parallelism::Sequential)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub network: String,
    pub epochs: usize,
    pub selection: ProbeSelection,
    pub ascending: BinarizationOrder,
    pub descending: BinarizationOrder,
    #[serde(rename = "probe")]
    pub probes: Vec<ProbeResult>,
}

/// Ranks probes by error, lower layer first on ties.
pub fn build_report(
    network: &str,
    epochs: usize,
    selection: ProbeSelection,
    mut probes: Vec<ProbeResult>,
    layers: usize,
) -> Result<SensitivityReport> {
    probes.sort_by_key(|p| p.layer);
    let present: Vec<usize> = probes.iter().map(|p| p.layer).collect();
    if present != (1..=layers).collect::<Vec<_>>() {
        return Err(Error::config(format!("need exactly one probe for each of layers 1..={layers}, got {present:?}")));
    }
    if let Some(p) = probes.iter().find(|p| !(0.0..=1.0).contains(&p.error)) {
        return Err(Error::config(format!("probe {} has error {} outside [0, 1]", p.layer, p.error)));
    }
    let ascending = ascending_order(&probes)?;
    Ok(SensitivityReport {
        network: network.to_string(),
        epochs,
        selection,
        descending: ascending.reversed(),
        ascending,
        probes,
    })
}

fn ascending_order(probes: &[ProbeResult]) -> Result<BinarizationOrder> {
    let mut ranked: Vec<&ProbeResult> = probes.iter().collect();
    ranked.sort_by(|a, b| a.error.total_cmp(&b.error).then(a.layer.cmp(&b.layer)));
    BinarizationOrder::new(ranked.iter().map(|p| p.layer).collect())
}

impl SensitivityReport {
    pub fn layers(&self) -> usize {
        self.probes.len()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    /// Parses a report and checks that its orders agree with its probes.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: SensitivityReport = toml::from_str(text).map_err(|e| Error::config(format!("sensitivity report: {e}")))?;
        let layers = raw.probes.len();
        let rebuilt = build_report(&raw.network, raw.epochs, raw.selection, raw.probes.clone(), layers)?;
        if rebuilt.ascending != raw.ascending || rebuilt.descending != raw.descending {
            return Err(Error::config(format!(
                "report orders {} / {} disagree with its probe errors (expected {} / {})",
                raw.ascending, raw.descending, rebuilt.ascending, rebuilt.descending
            )));
        }
        Ok(rebuilt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Human-readable table with one row per layer.
    pub fn table(&self) -> String {
        let mut out = format!("{:>5}  {:>8}  {:>10}  {:>20}\n", "layer", "error", "lr", "seed");
        for p in &self.probes {
            let lr = p.lr.map_or_else(|| "failed".to_string(), |lr| format!("{lr:e}"));
            out += &format!("{:>5}  {:>8.4}  {:>10}  {:>20}\n", p.layer, p.error, lr, p.seed);
        }
        out += &format!("ascending  {}\ndescending {}\n", self.ascending, self.descending);
        out
    }
}
