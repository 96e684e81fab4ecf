use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, OptimizerKind};
use crate::schedule::{make_order, BinarizationOrder, Milestone, OrderKind, Regime, TrainPlan};
use crate::sensitivity::{ProbeSeeds, ProbeSelection, ProbeSetup, SensitivityReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Float,
    Binary,
    Forward,
    Reverse,
    Random,
    Explicit,
    Ascending,
    Descending,
}

impl Case {
    pub const ALL: [Case; 8] = [
        Case::Float,
        Case::Binary,
        Case::Forward,
        Case::Reverse,
        Case::Random,
        Case::Explicit,
        Case::Ascending,
        Case::Descending,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::Float => "float",
            Case::Binary => "binary",
            Case::Forward => "forward",
            Case::Reverse => "reverse",
            Case::Random => "random",
            Case::Explicit => "explicit",
            Case::Ascending => "ascending",
            Case::Descending => "descending",
        }
    }

    /// Whether the case trains with a layer order.
    pub fn is_iterative(self) -> bool {
        !matches!(self, Case::Float | Case::Binary)
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Case::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown case `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// The four MNIST IDX files; the directory falls back to the environment.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            DataSource::Mnist { .. } => vec![1, 28, 28],
            DataSource::Synthetic(s) => s.sample_shape.clone(),
        }
    }

    pub fn load(&self) -> Result<Splits> {
        match self {
            DataSource::Mnist { dir } => {
                let dir = dir.clone().or_else(data::mnist_dir_from_env).ok_or_else(|| {
                    Error::config(format!("no MNIST directory: pass a data dir or set {}", data::MNIST_DIR_ENV))
                })?;
                data::load_mnist(&dir)
            }
            DataSource::Synthetic(spec) => data::synthetic(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySettings {
    /// Probe epochs `K`.
    pub epochs: usize,
    pub selection: ProbeSelection,
    pub seeds: ProbeSeeds,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: String,
    pub case: Case,
    /// Permutation for the explicit case.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<BinarizationOrder>,
    /// Report consumed by the ascending and descending cases; defaults to
    /// `<output>/sensitivity.toml`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity_report: Option<PathBuf>,
    pub random_order_seed: u64,
    pub epochs_per_layer: usize,
    pub total_epochs: usize,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub search_cap: usize,
    pub milestones: Vec<Milestone>,
    pub optimizer: OptimizerKind,
    pub data: DataSource,
    pub sensitivity: SensitivitySettings,
}

/// Largest number of orders an exhaustive search runs without an override.
pub const DEFAULT_SEARCH_CAP: usize = 24;

impl ExperimentConfig {
    /// Defaults for `network`. Both MNIST networks share one set of values:
    /// 150 epochs per layer, 450 in total, 150 probe epochs, batch 100, Adam.
    pub fn defaults(network: &str) -> Self {
        ExperimentConfig {
            network: network.to_string(),
            case: Case::Forward,
            order: None,
            sensitivity_report: None,
            random_order_seed: 0,
            epochs_per_layer: 150,
            total_epochs: 450,
            lr_grid: vec![3e-4, 1e-3, 3e-3],
            batch_size: 100,
            seeds: vec![1, 2, 3, 4, 5],
            output: Path::new("runs").join(network),
            search_cap: DEFAULT_SEARCH_CAP,
            milestones: Vec::new(),
            optimizer: OptimizerKind::adam(),
            data: DataSource::Mnist { dir: None },
            sensitivity: SensitivitySettings {
                epochs: 150,
                selection: ProbeSelection::Best,
                seeds: ProbeSeeds::Shared,
                seed: 1,
            },
        }
    }

    /// Parses a config; keys not given take the defaults for its network.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        let network = user
            .get("network")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::config("config needs a `network` string"))?;
        let mut merged = toml::Table::try_from(Self::defaults(network)).expect("defaults serialize");
        overlay(&mut merged, user);
        let cfg: ExperimentConfig =
            toml::Value::Table(merged).try_into().map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::parse(&self.network, &self.data.sample_shape())
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.network_spec()?;
        let layers = spec.weight_layer_count();
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::config("learning-rate grid must be non-empty and positive"));
        }
        if self.case == Case::Explicit {
            let order = self.order.as_ref().ok_or_else(|| Error::config("case `explicit` needs `order`"))?;
            if order.len() != layers {
                return Err(Error::config(format!("order {order} does not cover the {layers} layers of {}", self.network)));
            }
        }
        if self.sensitivity.epochs == 0 {
            return Err(Error::config("sensitivity epochs must be at least 1"));
        }
        self.plan(BinarizationOrder::forward(layers), self.seeds[0], self.lr_grid[0])?.validate(layers)
    }

    /// Layer order of the configured case; `None` for float and binary.
    pub fn resolve_order(&self) -> Result<Option<BinarizationOrder>> {
        let layers = self.network_spec()?.weight_layer_count();
        let order = match self.case {
            Case::Float | Case::Binary => return Ok(None),
            Case::Forward => make_order(OrderKind::Forward, layers, None, None)?,
            Case::Reverse => make_order(OrderKind::Reverse, layers, None, None)?,
            Case::Random => make_order(OrderKind::Random, layers, Some(self.random_order_seed), None)?,
            Case::Explicit => make_order(OrderKind::Explicit, layers, None, self.order.as_ref().map(|o| o.layers()))?,
            Case::Ascending | Case::Descending => {
                let path = self.sensitivity_report_path();
                let report = SensitivityReport::load(&path)?;
                if report.layers() != layers {
                    return Err(Error::config(format!(
                        "{} ranks {} layers, {} has {layers}",
                        path.display(),
                        report.layers(),
                        self.network
                    )));
                }
                if self.case == Case::Ascending {
                    report.ascending
                } else {
                    report.descending
                }
            }
        };
        Ok(Some(order))
    }

    /// Training plan for one (order, seed, lr) job.
    pub fn plan(&self, order: BinarizationOrder, seed: u64, lr: f64) -> Result<TrainPlan> {
        let layers = order.len();
        let regime = match self.case {
            Case::Float => Regime::float(layers),
            Case::Binary => Regime::binary(layers),
            _ => Regime::Iterative { order, epochs_per_layer: self.epochs_per_layer },
        };
        Ok(TrainPlan {
            regime,
            total_epochs: self.total_epochs,
            lr,
            milestones: self.milestones.clone(),
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            seed,
        })
    }

    pub fn probe_setup(&self) -> Result<ProbeSetup> {
        Ok(ProbeSetup {
            spec: self.network_spec()?,
            epochs: self.sensitivity.epochs,
            lr_grid: self.lr_grid.clone(),
            milestones: self.milestones.clone(),
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            seed: self.sensitivity.seed,
            seeds: self.sensitivity.seeds,
            selection: self.sensitivity.selection,
        })
    }

    /// Where the sensitivity report is written and read.
    pub fn sensitivity_report_path(&self) -> PathBuf {
        self.sensitivity_report.clone().unwrap_or_else(|| self.output.join("sensitivity.toml"))
    }
}

/// Recursively lays `user` over `base`. A sub-table that switches its
/// variant tag replaces the default wholesale.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if same_variant(b, &u) => overlay(b, u),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn same_variant(base: &toml::Table, user: &toml::Table) -> bool {
    ["kind", "source"].iter().all(|tag| match (base.get(*tag), user.get(*tag)) {
        (Some(b), Some(u)) => b == u,
        _ => true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("network = \"300-100-10\"\ncase = \"binary\"\n").unwrap();
        assert_eq!(cfg.epochs_per_layer, 150);
        assert_eq!(cfg.total_epochs, 450);
        assert_eq!(cfg.batch_size, 100);
        assert_eq!(cfg.sensitivity.epochs, 150);
        assert_eq!(cfg.optimizer, OptimizerKind::adam());
        assert_eq!(cfg.case, Case::Binary);
        assert_eq!(cfg.network_spec().unwrap().weight_count(), 266_200);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::defaults("784-784-10");
        cfg.case = Case::Explicit;
        cfg.order = Some("213".parse().unwrap());
        cfg.milestones = vec![Milestone { epoch: 10, factor: 0.1 }];
        cfg.optimizer = OptimizerKind::sgd_momentum();
        cfg.data = DataSource::Synthetic(SyntheticSpec { sample_shape: vec![1, 28, 28], ..SyntheticSpec::default() });
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn switching_optimizer_replaces_its_table() {
        let cfg = ExperimentConfig::from_toml(
            "network = \"8-4\"\n[optimizer]\nkind = \"sgd_momentum\"\n[data]\nsource = \"synthetic\"\ntrain = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.optimizer, OptimizerKind::SgdMomentum { momentum: 0.9, weight_decay: 0.0 });
        let DataSource::Synthetic(s) = &cfg.data else { panic!("expected synthetic data") };
        assert_eq!(s.train, 10);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            "case = \"float\"",
            "network = \"300-100-10\"\ncase = \"sideways\"",
            "network = \"300-100-10\"\ncase = \"explicit\"",
            "network = \"300-100-10\"\ncase = \"explicit\"\norder = [1, 2]",
            "network = \"300-100-10\"\nseeds = []",
            "network = \"300-100-10\"\ntotal_epochs = 100",
            "network = \"300-100-10\"\nlr_grid = [0.0]",
            "network = \"300-100-10\"\nunknown_key = 1",
        ];
        for text in bad {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn case_orders() {
        let mut cfg = ExperimentConfig::defaults("300-100-10");
        cfg.case = Case::Forward;
        assert_eq!(cfg.resolve_order().unwrap().unwrap().layers(), &[1, 2, 3]);
        cfg.case = Case::Reverse;
        assert_eq!(cfg.resolve_order().unwrap().unwrap().layers(), &[3, 2, 1]);
        cfg.case = Case::Float;
        assert!(cfg.resolve_order().unwrap().is_none());
        cfg.case = Case::Binary;
        let plan = cfg.plan(BinarizationOrder::forward(3), 1, 1e-3).unwrap();
        assert!(plan.regime.state_at(1).is_fully_binarized());
    }
}
