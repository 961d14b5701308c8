use driftharness::backend::ReferenceBackend;
use driftharness::corpus::{segment, Window};
use driftharness::model::{AdapterConfig, LossMode, TrainConfig};
use driftharness::protocol::{run_forward_chain, ChainOptions, RunLedger};
use driftharness::strategies::{StrategyKind, StrategySpec};
use driftharness::synth::{self, SynthConfig};

fn windows(seed: u64, count: usize) -> Vec<Window> {
    let sc = SynthConfig {
        seed,
        windows: count,
        per_window: 40,
        ..Default::default()
    };
    segment(&synth::generate(&sc).unwrap(), &sc.range(), sc.granularity).unwrap()
}

fn chain(windows: &[Window], spec: StrategySpec, train: &TrainConfig) -> RunLedger {
    let mut backend = ReferenceBackend::new(AdapterConfig::default());
    run_forward_chain(windows, &spec, train, &mut backend, &ChainOptions::default()).unwrap()
}

#[test]
fn olora_without_penalty_is_class_weighted_persistent_training() {
    let ws = windows(7, 6);
    let train = TrainConfig {
        loss_mode: LossMode::ClassWeighted,
        ..synth::train_preset(7)
    };
    let mut olora = StrategySpec::new(StrategyKind::Olora);
    olora.ortho_beta = 0.0;
    let a = chain(&ws, olora, &train);
    let b = chain(&ws, StrategySpec::new(StrategyKind::LbCl), &train);
    assert_eq!(a.score_section(), b.score_section());
}

#[test]
fn training_and_replay_sizes_follow_the_strategy() {
    let ws = windows(8, 6);
    let train = synth::train_preset(8);
    let cumulative = chain(&ws, StrategySpec::new(StrategyKind::Cumulative), &train);
    for r in cumulative.forward() {
        let expected: usize = ws[..r.t].iter().map(Window::len).sum();
        assert_eq!(r.train_size, expected);
        assert_eq!(r.replay_size, 0);
    }
    for kind in [StrategyKind::Replay1P, StrategyKind::Casr, StrategyKind::HybridCasr] {
        let ledger = chain(&ws, StrategySpec::new(kind), &train);
        for r in ledger.forward() {
            let cap = ws[r.t - 1].len() / 4;
            assert!(r.replay_size <= cap, "{kind} t = {}: {} > {cap}", r.t, r.replay_size);
            if r.t > 1 {
                assert!(r.replay_size > 0, "{kind} t = {} drew nothing", r.t);
            }
        }
    }
    let zero = chain(&ws, StrategySpec::new(StrategyKind::ZeroShot), &train);
    assert!(zero.forward().iter().all(|r| r.train_size == 0));
}

#[test]
fn backward_lags_only_reach_existing_windows() {
    let ws = windows(9, 9);
    let ledger = chain(
        &ws,
        StrategySpec::new(StrategyKind::WindowOnly),
        &synth::train_preset(9),
    );
    let mut lags_at_last = Vec::new();
    for r in ledger.backward() {
        assert!(r.k < r.t);
        if r.t == ws.len() - 1 {
            lags_at_last.push(r.k);
        }
    }
    assert_eq!(lags_at_last, vec![1, 3, 5, 6]);
}

#[test]
fn empty_window_becomes_a_gap() {
    let mut ws = windows(10, 5);
    ws[2].instances.clear();
    let ledger = chain(
        &ws,
        StrategySpec::new(StrategyKind::WindowOnly),
        &synth::train_preset(10),
    );
    assert_eq!(ledger.gaps().len(), 1);
    assert_eq!(ledger.gaps()[0].t, 3);
    let t2 = ledger.forward().iter().find(|r| r.t == 2).unwrap();
    assert_eq!(t2.f1, None);
    assert_eq!(ledger.forward().len(), ws.len() - 2);
}

#[test]
fn chain_needs_two_nonempty_windows() {
    let mut ws = windows(11, 3);
    ws[1].instances.clear();
    ws[2].instances.clear();
    let mut backend = ReferenceBackend::new(AdapterConfig::default());
    let r = run_forward_chain(
        &ws,
        &StrategySpec::new(StrategyKind::WindowOnly),
        &TrainConfig::default(),
        &mut backend,
        &ChainOptions::default(),
    );
    assert!(r.is_err());
}
