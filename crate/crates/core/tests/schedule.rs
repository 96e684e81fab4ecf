mod common;

use common::{hand_rolled, scheduled, toy_data, toy_plan as plan};
use layerbin::nn::{Network, NetworkSpec};
use layerbin::par::{error_rate, Parallelism};
use layerbin::schedule::{run_iterative, select_best, BinarizationOrder, Regime};
use layerbin::BinarizationState;

const NET: &str = "12-8-4";

fn spec() -> NetworkSpec {
    NetworkSpec::parse(NET, &[16]).unwrap()
}

#[test]
fn zero_epochs_per_layer_matches_all_binary_loop() {
    let data = toy_data(200, 1);
    for seed in [3, 4] {
        let expected = hand_rolled(&spec(), BinarizationState::all(3), 3, seed, &data);
        let got = scheduled(&spec(), &Regime::binary(3), 3, seed, &data);
        assert_eq!(got, expected, "seed {seed}");
    }
}

#[test]
fn never_binarized_plan_matches_float_loop() {
    let data = toy_data(200, 2);
    let expected = hand_rolled(&spec(), BinarizationState::zeros(3), 3, 9, &data);
    assert_eq!(scheduled(&spec(), &Regime::float(3), 3, 9, &data), expected);
}

#[test]
fn single_layer_net_is_order_independent() {
    let data = toy_data(100, 5);
    let spec = NetworkSpec::parse("4", &[16]).unwrap();
    let run = |regime: Regime| {
        let r = run_iterative(&plan(regime, 4, 1), Network::new(spec.clone(), 1).unwrap(), &data, Parallelism::Sequential)
            .unwrap();
        (r.network.params().cloned().collect::<Vec<_>>(), r.records.iter().map(|r| r.val_error).collect::<Vec<_>>())
    };
    let binary = run(Regime::binary(1));
    for n in [1, 2, 4] {
        assert_eq!(run(Regime::Iterative { order: BinarizationOrder::forward(1), epochs_per_layer: n }), binary);
    }
}

#[test]
fn different_orders_diverge_after_first_flip() {
    let data = toy_data(200, 3);
    let losses = |order: &str| {
        let regime = Regime::Iterative { order: order.parse().unwrap(), epochs_per_layer: 1 };
        let run = run_iterative(&plan(regime, 3, 7), Network::new(spec(), 7).unwrap(), &data, Parallelism::Sequential).unwrap();
        run.records.iter().map(|r| r.train_loss).collect::<Vec<_>>()
    };
    let (a, b, c) = (losses("123"), losses("132"), losses("321"));
    // Orders sharing their first layer agree until their second flip.
    assert_eq!(a[0], b[0]);
    assert_ne!(a[1], b[1]);
    assert_ne!(a[0], c[0]);
}

#[test]
fn best_checkpoint_reproduces_its_recorded_errors() {
    let data = toy_data(200, 4);
    let regime = Regime::Iterative { order: "213".parse().unwrap(), epochs_per_layer: 2 };
    let run = run_iterative(&plan(regime, 9, 2), Network::new(spec(), 2).unwrap(), &data, Parallelism::Sequential).unwrap();
    let best = &run.best;
    assert!(best.epoch >= 5, "selected a partly binarized epoch {}", best.epoch);
    assert_eq!(run.records[select_best(&run.records, true).unwrap()].epoch, best.epoch);
    assert!(best.network.binarization().is_fully_binarized());
    for par in [Parallelism::Sequential, Parallelism::Threads(2)] {
        assert_eq!(error_rate(par, &best.network, &data.val).unwrap(), best.val_error);
        assert_eq!(error_rate(par, &best.network, &data.test).unwrap(), best.test_error);
    }
}

#[test]
fn training_is_deterministic() {
    let data = toy_data(150, 6);
    let regime = Regime::Iterative { order: BinarizationOrder::reverse(3), epochs_per_layer: 1 };
    let a = run_iterative(&plan(regime.clone(), 4, 5), Network::new(spec(), 5).unwrap(), &data, Parallelism::Sequential).unwrap();
    let b = run_iterative(&plan(regime, 4, 5), Network::new(spec(), 5).unwrap(), &data, Parallelism::Threads(3)).unwrap();
    assert!(a.network.params().eq(b.network.params()));
    let strip = |r: &layerbin::schedule::MetricsRecord| (r.epoch, r.train_error, r.val_error, r.test_error, r.state.clone(), r.lr);
    assert_eq!(a.records.iter().map(strip).collect::<Vec<_>>(), b.records.iter().map(strip).collect::<Vec<_>>());
}

#[test]
fn divergence_aborts_with_partial_records() {
    let data = toy_data(100, 8);
    let mut p = plan(Regime::float(3), 5, 1);
    p.lr = 1e30;
    let err = run_iterative(&p, Network::new(spec(), 1).unwrap(), &data, Parallelism::Sequential).unwrap_err();
    assert!(matches!(err.error, layerbin::Error::Diverged { .. }), "{err}");
    assert!(err.records.len() < 5);
}

#[test]
fn singleton_final_batch_is_skipped_with_batch_norm() {
    // 101 samples in batches of 25 leave a final batch of one.
    let data = toy_data(101, 9);
    let run = run_iterative(&plan(Regime::float(3), 2, 1), Network::new(spec(), 1).unwrap(), &data, Parallelism::Sequential);
    assert!(run.is_ok());
}
