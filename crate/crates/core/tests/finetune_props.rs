mod common;

use common::marker;
use flue_core::finetune::{build_input_ids, finetune_encoded, split20, GridSearchConfig, HeadConfig, ValPolicy};
use flue_core::model::{ModelConfig, Parameters};
use proptest::prelude::*;

fn quick_grid() -> GridSearchConfig {
    GridSearchConfig { learning_rates: vec![5e-5, 1e-6], epochs: 4, val_policy: ValPolicy::Split20, ..GridSearchConfig::default() }
}

#[test]
fn grid_runs_every_rate_and_is_deterministic() {
    let (tok, train, test) = marker::encoded(2, 120, 40);
    let encoder = Parameters::init(&ModelConfig::toy(tok.vocab.len()), 1).unwrap();
    let a = finetune_encoded(&encoder, &train, &[], &test, &HeadConfig::shallow(2), &quick_grid(), 9).unwrap();
    let b = finetune_encoded(&encoder, &train, &[], &test, &HeadConfig::shallow(2), &quick_grid(), 9).unwrap();
    assert_eq!(a.runs.len(), 2);
    assert_eq!(a.runs, b.runs);
    assert_eq!(a.model, b.model);
    assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
    let best = a.runs.iter().find(|r| r.lr == a.best_lr).unwrap();
    assert!(a.runs.iter().all(|r| r.val_accuracy <= best.val_accuracy));
    assert!(a.runs.iter().all(|r| (1..=4).contains(&r.best_epoch)));
}

#[test]
fn marker_task_is_learned() {
    let (tok, train, test) = marker::encoded(4, 200, 60);
    let encoder = Parameters::init(&ModelConfig::toy(tok.vocab.len()), 2).unwrap();
    let grid = GridSearchConfig { learning_rates: vec![5e-5], epochs: 12, ..quick_grid() };
    let out = finetune_encoded(&encoder, &train, &[], &test, &HeadConfig::deep(2), &grid, 3).unwrap();
    assert!(out.test_accuracy >= 0.9, "{:?} {}", out.runs, out.test_accuracy);
}

#[test]
fn dev_policy_needs_a_dev_set() {
    let (tok, train, test) = marker::encoded(5, 20, 10);
    let encoder = Parameters::init(&ModelConfig { layers: 1, ..ModelConfig::toy(tok.vocab.len()) }, 1).unwrap();
    let grid = GridSearchConfig { val_policy: ValPolicy::DevSet, ..quick_grid() };
    assert!(finetune_encoded(&encoder, &train, &[], &test, &HeadConfig::deep(2), &grid, 0).is_err());
}

proptest! {
    #[test]
    fn split20_partitions(n in 2usize..500, seed in any::<u64>()) {
        let xs: Vec<usize> = (0..n).collect();
        let (rest, val) = split20(&xs, seed);
        prop_assert_eq!(rest.len() + val.len(), n);
        prop_assert!(!rest.is_empty());
        prop_assert!((val.len() as f64 - 0.2 * n as f64).abs() <= 1.0);
        let mut all: Vec<usize> = rest.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, xs);
    }

    #[test]
    fn inputs_fit_and_keep_framing(la in 0usize..300, lb in proptest::option::of(0usize..300), max_len in 8usize..256) {
        let a: Vec<u32> = (0..la as u32).map(|i| 5 + i).collect();
        let b: Option<Vec<u32>> = lb.map(|n| (0..n as u32).map(|i| 1000 + i).collect());
        let ids = build_input_ids(&a, b.as_deref(), max_len);
        prop_assert!(ids.len() <= max_len);
        prop_assert_eq!(ids[0], flue_core::bpe::BOS);
        prop_assert_eq!(*ids.last().unwrap(), flue_core::bpe::EOS);
        let eos = ids.iter().filter(|&&x| x == flue_core::bpe::EOS).count();
        prop_assert_eq!(eos, if b.is_some() { 2 } else { 1 });
    }
}
