mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use stf_core::checkpoint::Checkpoint;
use stf_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use stf_core::objectives::{Branch, BranchSpec, LossTerm};
use stf_core::train::{checkpoint_name, train, TrainConfig, TrainOutput};
use stf_core::{Model, SkeletonGraph};

fn tiny_data() -> Dataset {
    generate_synthetic(&SyntheticSpec::default(), 6, 3, 5).unwrap().dataset
}

fn tiny_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::init(tiny_config(4, 4, 3), SkeletonGraph::default_skeleton(), &mut rng).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        finetune_epochs: 1,
        batch_size: 8,
        threads: 1,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, dir: Option<&std::path::Path>) -> TrainOutput {
    train(tiny_model(cfg.seed), &tiny_data(), cfg, dir, &mut |_| {}).unwrap()
}

#[test]
fn writes_logs_and_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&cfg(), Some(dir.path()));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let timing = std::fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    // header + 2 baseline epochs + (epoch 0 + 1 epoch) per branch + fused
    assert_eq!(metrics.lines().count(), 1 + 2 + 2 * 2 + 1);
    assert_eq!(timing.lines().count(), metrics.lines().count());
    assert!(!metrics.contains("seconds"));
    assert_eq!(out.records.len(), 7);
    assert_eq!(out.records.last().unwrap().branch, "E+DCG");

    let base = Checkpoint::load(&dir.path().join(checkpoint_name("baseline"))).unwrap();
    assert_eq!(base, out.baseline);
    for b in [Branch::E, Branch::Dcg] {
        let ck = Checkpoint::load(&dir.path().join(checkpoint_name(b.as_str()))).unwrap();
        assert_eq!(&ck, out.branch(b).unwrap());
    }
}

#[test]
fn branches_start_as_copies_of_the_baseline() {
    let out = run(&cfg(), None);
    let last = out.records.iter().rfind(|r| r.phase == 1).unwrap();
    for tag in ["E", "DCG"] {
        let first = out.records.iter().find(|r| r.branch == tag && r.epoch == 0).unwrap();
        assert_eq!(first.top1, last.top1);
        assert_eq!(first.per_class, last.per_class);
        assert_eq!(first.focus_iou, last.focus_iou);
        assert_eq!(first.masked_prob, last.masked_prob);
    }
    assert_ne!(out.branch(Branch::E).unwrap().model.params, out.baseline.model.params);
}

#[test]
fn resuming_from_a_baseline_reproduces_the_branches() {
    let dir = tempfile::tempdir().unwrap();
    let full = run(&cfg(), Some(dir.path()));
    let resumed_cfg = TrainConfig {
        baseline: Some(dir.path().join(checkpoint_name("baseline"))),
        ..cfg()
    };
    let resumed = run(&resumed_cfg, None);
    assert!(resumed.records.iter().all(|r| r.phase == 2));
    for b in [Branch::E, Branch::Dcg] {
        assert_eq!(resumed.branch(b).unwrap().to_bytes(), full.branch(b).unwrap().to_bytes());
    }
}

#[test]
fn only_enabled_terms_are_logged() {
    let c = TrainConfig {
        epochs: 1,
        branches: vec![BranchSpec::with_terms(Branch::Dcg, &[LossTerm::Coherence]).unwrap()],
        ..cfg()
    };
    let out = run(&c, None);
    let r = out.records.iter().find(|r| r.branch == "DCG" && r.epoch == 1).unwrap();
    let [ce, e, d, coh, gk] = r.losses;
    assert!(ce.is_some() && coh.is_some());
    assert!(e.is_none() && d.is_none() && gk.is_none());
    assert!(out.records.iter().all(|r| r.branch != "E+DCG"));
}

#[test]
fn phase_one_lowers_cross_entropy() {
    let c = TrainConfig {
        epochs: 6,
        branches: Vec::new(),
        ..cfg()
    };
    let out = run(&c, None);
    let ce: Vec<f64> = out.records.iter().map(|r| r.losses[0].unwrap()).collect();
    assert!(ce.last().unwrap() < &ce[0], "{ce:?}");
}

#[test]
fn seeds_change_the_run() {
    let a = run(&cfg(), None);
    let b = run(&TrainConfig { seed: 1, ..cfg() }, None);
    assert_ne!(a.baseline.model.params, b.baseline.model.params);
}
