//! Layer-by-layer binarization schedule.
//!
//! Training starts with every layer in floating point. In iteration `j`
//! the layer `order[j]` is binarized and the network trains for `N` epochs;
//! after all `L` layers are binarized, training continues until epoch `T`.
//! A flag is set at the start of the first epoch of its iteration, so with
//! `N = 150` flags flip at epochs 1, 151 and 301. `N = 0` binarizes every
//! layer from the first epoch.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binarize::BinarizationState;
use crate::data::{batches, epoch_seed, Splits};
use crate::error::{Error, Result};
use crate::nn::loss::{argmax_rows, softmax_cross_entropy};
use crate::nn::{Mode, Network, Optimizer, OptimizerKind};
use crate::par::{error_rate, Parallelism};

/// A permutation of the weight-bearing layers `1..=L`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BinarizationOrder(Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderKind {
    Forward,
    Reverse,
    Random,
    Explicit,
}

impl BinarizationOrder {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &layer in &order {
            if layer == 0 || layer > n || std::mem::replace(&mut seen[layer - 1], true) {
                return Err(Error::config(format!("{order:?} is not a permutation of 1..={n}")));
            }
        }
        if n == 0 {
            return Err(Error::config("binarization order is empty"));
        }
        Ok(BinarizationOrder(order))
    }

    pub fn forward(layers: usize) -> Self {
        BinarizationOrder((1..=layers).collect())
    }

    pub fn reverse(layers: usize) -> Self {
        BinarizationOrder((1..=layers).rev().collect())
    }

    /// Uniform shuffle of `1..=layers` determined by `seed`.
    pub fn random(layers: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (1..=layers).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        BinarizationOrder(order)
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reversed(&self) -> Self {
        BinarizationOrder(self.0.iter().rev().copied().collect())
    }

    /// Every order of `layers` layers, lexicographic.
    pub fn all(layers: usize) -> Vec<Self> {
        let mut out = Vec::new();
        let mut current: Vec<usize> = (1..=layers).collect();
        loop {
            out.push(BinarizationOrder(current.clone()));
            // next lexicographic permutation
            let Some(i) = (1..current.len()).rev().find(|&i| current[i - 1] < current[i]) else {
                break;
            };
            let j = (i..current.len()).rev().find(|&j| current[j] > current[i - 1]).unwrap();
            current.swap(i - 1, j);
            current[i..].reverse();
        }
        out
    }
}

/// Builds an order of `layers` layers.
pub fn make_order(kind: OrderKind, layers: usize, seed: Option<u64>, explicit: Option<&[usize]>) -> Result<BinarizationOrder> {
    if layers == 0 {
        return Err(Error::config("an order needs at least one layer"));
    }
    match kind {
        OrderKind::Forward => Ok(BinarizationOrder::forward(layers)),
        OrderKind::Reverse => Ok(BinarizationOrder::reverse(layers)),
        OrderKind::Random => Ok(BinarizationOrder::random(layers, seed.unwrap_or(0))),
        OrderKind::Explicit => {
            let order = BinarizationOrder::new(
                explicit.ok_or_else(|| Error::config("explicit order requires a permutation"))?.to_vec(),
            )?;
            if order.len() != layers {
                return Err(Error::config(format!("order {order} has {} layers, network has {layers}", order.len())));
            }
            Ok(order)
        }
    }
}

impl TryFrom<Vec<usize>> for BinarizationOrder {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        BinarizationOrder::new(v)
    }
}

impl From<BinarizationOrder> for Vec<usize> {
    fn from(o: BinarizationOrder) -> Self {
        o.0
    }
}

/// `132` for layers 1, 3, 2; layers are dot-separated once any exceeds 9.
impl fmt::Display for BinarizationOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.iter().all(|&l| l < 10) {
            self.0.iter().try_for_each(|l| write!(f, "{l}"))
        } else {
            let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
            write!(f, "{}", parts.join("."))
        }
    }
}

impl fmt::Debug for BinarizationOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinarizationOrder({self})")
    }
}

impl FromStr for BinarizationOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad order string `{s}`"));
        let layers = if s.contains('.') || s.contains(',') {
            s.split(['.', ','])
                .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?
        } else {
            s.chars().map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(bad)).collect::<Result<Vec<_>>>()?
        };
        BinarizationOrder::new(layers)
    }
}

/// How the binarization state evolves over a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// The same state for every epoch: all zeros is the float baseline,
    /// one-hot states are sensitivity probes.
    Fixed { state: BinarizationState },
    /// One more layer every `epochs_per_layer` epochs, in `order`.
    Iterative { order: BinarizationOrder, epochs_per_layer: usize },
}

impl Regime {
    pub fn float(layers: usize) -> Self {
        Regime::Fixed { state: BinarizationState::zeros(layers) }
    }

    /// Every layer binarized from the first epoch.
    pub fn binary(layers: usize) -> Self {
        Regime::Iterative { order: BinarizationOrder::forward(layers), epochs_per_layer: 0 }
    }

    pub fn layers(&self) -> usize {
        match self {
            Regime::Fixed { state } => state.len(),
            Regime::Iterative { order, .. } => order.len(),
        }
    }

    /// State in effect during `epoch` (1-based).
    pub fn state_at(&self, epoch: usize) -> BinarizationState {
        match self {
            Regime::Fixed { state } => state.clone(),
            Regime::Iterative { order, epochs_per_layer } => {
                let flagged = if *epochs_per_layer == 0 {
                    order.len()
                } else {
                    ((epoch.max(1) - 1) / epochs_per_layer + 1).min(order.len())
                };
                let mut state = BinarizationState::zeros(order.len());
                for &layer in &order.layers()[..flagged] {
                    state.set(layer).expect("order is a permutation");
                }
                state
            }
        }
    }

    /// First epoch at which every layer is binarized, if ever.
    pub fn fully_binarized_from(&self) -> Option<usize> {
        match self {
            Regime::Fixed { state } => state.is_fully_binarized().then_some(1),
            Regime::Iterative { order, epochs_per_layer } => {
                Some(if *epochs_per_layer == 0 { 1 } else { (order.len() - 1) * epochs_per_layer + 1 })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub epoch: usize,
    pub factor: f64,
}

/// `lr0` times the factor of every milestone reached by `epoch`.
pub fn lr_at(epoch: usize, lr0: f64, milestones: &[Milestone]) -> f64 {
    milestones.iter().filter(|m| m.epoch <= epoch).fold(lr0, |lr, m| lr * m.factor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub regime: Regime,
    pub total_epochs: usize,
    pub lr: f64,
    pub milestones: Vec<Milestone>,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.regime.layers() != layers {
            return Err(Error::config(format!(
                "plan covers {} layers, network has {layers}",
                self.regime.layers()
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total epochs must be at least 1"));
        }
        if let Regime::Iterative { order, epochs_per_layer } = &self.regime {
            if self.total_epochs < order.len() * epochs_per_layer {
                return Err(Error::config(format!(
                    "total epochs {} < L·N = {}·{}",
                    self.total_epochs,
                    order.len(),
                    epochs_per_layer
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for pair in self.milestones.windows(2) {
            if pair[1].epoch <= pair[0].epoch {
                return Err(Error::config("learning-rate milestones must be strictly increasing"));
            }
        }
        if self.milestones.iter().any(|m| m.factor.is_nan() || m.factor <= 0.0) {
            return Err(Error::config("learning-rate factors must be positive"));
        }
        Ok(())
    }

    /// Whether best-epoch selection is restricted to fully binarized epochs.
    pub fn selects_binarized_only(&self) -> bool {
        self.regime.fully_binarized_from().is_some_and(|e| e <= self.total_epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_error: f64,
    pub val_error: f64,
    pub test_error: f64,
    pub state: BinarizationState,
    pub lr: f64,
    pub train_loss: f64,
    /// Seconds spent on this epoch.
    pub wall_time: f64,
}

/// Network as it was at its selected epoch.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_error: f64,
    pub test_error: f64,
    pub network: Network<f32>,
}

#[derive(Debug)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub best: Checkpoint,
    pub network: Network<f32>,
}

/// A run that stopped early; keeps the epochs completed so far.
#[derive(Debug)]
pub struct RunAborted {
    pub records: Vec<MetricsRecord>,
    pub error: Error,
}

impl fmt::Display for RunAborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run aborted after {} epochs: {}", self.records.len(), self.error)
    }
}

impl std::error::Error for RunAborted {}

impl From<RunAborted> for Error {
    fn from(a: RunAborted) -> Self {
        a.error
    }
}

/// Index of the lowest validation error; earliest epoch wins ties.
pub fn select_best(records: &[MetricsRecord], restrict_to_fully_binarized: bool) -> Result<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| !restrict_to_fully_binarized || r.state.is_fully_binarized())
        .fold(None, |best: Option<(usize, f64)>, (i, r)| match best {
            Some((_, v)) if v <= r.val_error => best,
            _ => Some((i, r.val_error)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::config("no eligible epoch to select from"))
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_error: f64,
    pub mean_loss: f64,
}

/// One pass over the shuffled training set.
pub fn train_epoch(
    net: &mut Network<f32>,
    opt: &mut Optimizer<f32>,
    data: &crate::data::Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    let skip_singletons = net.spec().has_batch_norm();
    let (mut wrong, mut seen, mut loss_sum, mut steps) = (0usize, 0usize, 0.0f64, 0usize);
    for (b, (x, labels)) in batches(data, batch_size, shuffle_seed)?.enumerate() {
        if skip_singletons && labels.len() < 2 {
            log::debug!("epoch {epoch}: skipping a final batch of one sample");
            continue;
        }
        let logits = net.forward(&x, Mode::Train)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            net.clear_cache();
            return Err(Error::Diverged { epoch, batch: b, loss: f64::from(loss) });
        }
        wrong += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p != l).count();
        seen += labels.len();
        loss_sum += f64::from(loss);
        steps += 1;
        net.backward(&dlogits)?;
        opt.step(net.param_grad_pairs())?;
        // ReLU maps NaN to zero, so a blown-up parameter need not show in the loss.
        if !net.params().all(|p| p.is_finite()) {
            return Err(Error::Diverged { epoch, batch: b, loss: f64::from(loss) });
        }
    }
    Ok(EpochStats {
        train_error: if seen == 0 { 0.0 } else { wrong as f64 / seen as f64 },
        mean_loss: if steps == 0 { 0.0 } else { loss_sum / steps as f64 },
    })
}

/// Runs a plan to completion, reporting each epoch to `observer`.
pub fn run_iterative_observed(
    plan: &TrainPlan,
    mut net: Network<f32>,
    data: &Splits,
    par: Parallelism,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> std::result::Result<RunResult, RunAborted> {
    let mut records = Vec::with_capacity(plan.total_epochs);
    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(RunAborted { records, error }),
            }
        };
    }
    bail!(plan.validate(net.weight_layer_count()));
    let restrict = plan.selects_binarized_only();
    let mut opt = Optimizer::new(plan.optimizer, plan.lr);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=plan.total_epochs {
        let started = Instant::now();
        let state = plan.regime.state_at(epoch);
        bail!(net.set_binarization(state.clone()));
        let lr = lr_at(epoch, plan.lr, &plan.milestones);
        opt.set_lr(lr);
        let stats = bail!(train_epoch(&mut net, &mut opt, &data.train, plan.batch_size, epoch_seed(plan.seed, epoch), epoch));
        let val_error = bail!(error_rate(par, &net, &data.val));
        let test_error = bail!(error_rate(par, &net, &data.test));
        let record = MetricsRecord {
            epoch,
            train_error: stats.train_error,
            val_error,
            test_error,
            state,
            lr,
            train_loss: stats.mean_loss,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: flags {} lr {lr:.2e} loss {:.4} train {:.4} val {:.4} test {:.4}",
            record.state.bitstring(),
            record.train_loss,
            record.train_error,
            val_error,
            test_error
        );
        observer(&record);
        let eligible = !restrict || record.state.is_fully_binarized();
        if eligible && best.as_ref().is_none_or(|b| val_error < b.val_error) {
            best = Some(Checkpoint { epoch, val_error, test_error, network: net.clone() });
        }
        records.push(record);
    }
    let best = bail!(best.ok_or_else(|| Error::config("no eligible epoch to select from")));
    Ok(RunResult { records, best, network: net })
}

pub fn run_iterative(
    plan: &TrainPlan,
    net: Network<f32>,
    data: &Splits,
    par: Parallelism,
) -> std::result::Result<RunResult, RunAborted> {
    run_iterative_observed(plan, net, data, par, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_constructors() {
        assert_eq!(make_order(OrderKind::Forward, 3, None, None).unwrap().layers(), &[1, 2, 3]);
        assert_eq!(make_order(OrderKind::Reverse, 3, None, None).unwrap().layers(), &[3, 2, 1]);
        let a = make_order(OrderKind::Random, 20, Some(5), None).unwrap();
        let b = make_order(OrderKind::Random, 20, Some(5), None).unwrap();
        assert_eq!(a, b);
        assert!(BinarizationOrder::new(a.layers().to_vec()).is_ok());
        assert_eq!(make_order(OrderKind::Explicit, 3, None, Some(&[1, 3, 2])).unwrap().to_string(), "132");
    }

    #[test]
    fn explicit_orders_are_validated() {
        for bad in [&[1, 1, 2][..], &[0, 1, 2], &[1, 2, 4], &[]] {
            assert!(make_order(OrderKind::Explicit, bad.len().max(1), None, Some(bad)).is_err(), "{bad:?}");
        }
        assert!(make_order(OrderKind::Explicit, 4, None, Some(&[1, 2, 3])).is_err());
        assert!(make_order(OrderKind::Explicit, 3, None, None).is_err());
        assert!(make_order(OrderKind::Forward, 0, None, None).is_err());
    }

    #[test]
    fn order_strings() {
        let o: BinarizationOrder = "132".parse().unwrap();
        assert_eq!(o.layers(), &[1, 3, 2]);
        let long = BinarizationOrder::reverse(11);
        assert_eq!(long.to_string().parse::<BinarizationOrder>().unwrap(), long);
        assert!("122".parse::<BinarizationOrder>().is_err());
    }

    #[test]
    fn all_orders_enumerates_permutations() {
        let all = BinarizationOrder::all(3);
        let names: Vec<String> = all.iter().map(|o| o.to_string()).collect();
        assert_eq!(names, ["123", "132", "213", "231", "312", "321"]);
        assert_eq!(BinarizationOrder::all(1).len(), 1);
        assert_eq!(BinarizationOrder::all(5).len(), 120);
    }

    #[test]
    fn table_one_flip_epochs() {
        let regime = Regime::Iterative { order: BinarizationOrder::forward(3), epochs_per_layer: 150 };
        let counts: Vec<usize> = (1..=450).map(|e| regime.state_at(e).count()).collect();
        let flips: Vec<usize> = (1..=450).filter(|&e| e == 1 || counts[e - 1] != counts[e - 2]).collect();
        assert_eq!(flips, vec![1, 151, 301]);
        assert_eq!(regime.state_at(1).bitstring(), "100");
        assert!(regime.state_at(301).is_fully_binarized());
        assert!(!regime.state_at(300).is_fully_binarized());
        assert_eq!(regime.fully_binarized_from(), Some(301));
    }

    #[test]
    fn zero_epochs_per_layer_is_all_binary() {
        let regime = Regime::binary(3);
        assert!((1..=5).all(|e| regime.state_at(e).is_fully_binarized()));
        assert_eq!(Regime::float(3).fully_binarized_from(), None);
    }

    #[test]
    fn lr_schedule() {
        let ms = [Milestone { epoch: 1000, factor: 0.1 }, Milestone { epoch: 1100, factor: 0.1 }];
        assert_eq!(lr_at(1, 0.1, &ms), 0.1);
        assert_eq!(lr_at(999, 0.1, &ms), 0.1);
        assert!((lr_at(1050, 0.1, &ms) - 0.01).abs() < 1e-15);
        assert!((lr_at(1100, 1.0, &ms) - 0.01).abs() < 1e-15);
    }

    fn record(epoch: usize, val: f64, flags: &str) -> MetricsRecord {
        MetricsRecord {
            epoch,
            train_error: 0.0,
            val_error: val,
            test_error: 0.0,
            state: BinarizationState::parse_bitstring(flags).unwrap(),
            lr: 0.1,
            train_loss: 0.0,
            wall_time: 0.0,
        }
    }

    #[test]
    fn select_best_rules() {
        let recs: Vec<_> = (1..=5).map(|e| record(e, 1.0 / e as f64, "11")).collect();
        assert_eq!(select_best(&recs, true).unwrap(), 4);
        let mixed = vec![record(1, 0.1, "10"), record(2, 0.3, "11"), record(3, 0.2, "11"), record(4, 0.2, "11")];
        assert_eq!(select_best(&mixed, true).unwrap(), 2);
        assert_eq!(select_best(&mixed, false).unwrap(), 0);
        assert!(select_best(&mixed[..1], true).is_err());
        assert!(select_best(&[], false).is_err());
    }

    #[test]
    fn restricted_selection_on_table_one_plan() {
        let regime = Regime::Iterative { order: BinarizationOrder::forward(3), epochs_per_layer: 150 };
        let recs: Vec<_> = (1..=450)
            .map(|e| record(e, if e == 10 { 0.0 } else { 0.5 - e as f64 * 1e-4 }, &regime.state_at(e).bitstring()))
            .collect();
        // Epoch 10 has the lowest error overall but is only partly binarized.
        assert_eq!(select_best(&recs, false).unwrap(), 9);
        let i = select_best(&recs, true).unwrap();
        assert!(recs[i].epoch >= 301);
        assert_eq!(recs[i].epoch, 450);
    }

    #[test]
    fn plan_validation() {
        let plan = TrainPlan {
            regime: Regime::Iterative { order: BinarizationOrder::forward(3), epochs_per_layer: 2 },
            total_epochs: 6,
            lr: 1e-3,
            milestones: vec![],
            optimizer: OptimizerKind::adam(),
            batch_size: 10,
            seed: 0,
        };
        assert!(plan.validate(3).is_ok());
        assert!(plan.validate(2).is_err());
        assert!(TrainPlan { total_epochs: 5, ..plan.clone() }.validate(3).is_err());
        assert!(TrainPlan { lr: 0.0, ..plan.clone() }.validate(3).is_err());
        let ms = vec![Milestone { epoch: 4, factor: 0.1 }, Milestone { epoch: 4, factor: 0.1 }];
        assert!(TrainPlan { milestones: ms, ..plan.clone() }.validate(3).is_err());
        let neg = vec![Milestone { epoch: 4, factor: -1.0 }];
        assert!(TrainPlan { milestones: neg, ..plan }.validate(3).is_err());
    }
}
