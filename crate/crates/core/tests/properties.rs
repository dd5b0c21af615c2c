mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use stf_core::checkpoint::Checkpoint;
use stf_core::data::{retained_count, stratified_subsample, Split};
use stf_core::focus::{project_focus, FocusMap};
use stf_core::objectives::{coherence, divergence, ensemble_fuse, LossComponents};
use stf_core::{Model, SkeletonGraph, Tape, Tensor};

fn probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn unit_map(values: Vec<f64>, t: usize, n: usize) -> FocusMap {
    FocusMap::new(Tensor::new(vec![t, n], values).unwrap(), 6, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fused_probabilities_sum_to_one(members in proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, 5), 1..6)) {
        let p: Vec<Vec<f64>> = members.iter().map(|l| probs(l)).collect();
        let (fused, class) = ensemble_fuse(&p).unwrap();
        prop_assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(fused.iter().all(|&v| v <= fused[class]));
        prop_assert!(fused[..class].iter().all(|&v| v < fused[class]));
    }

    #[test]
    fn self_fusion_is_identity(logits in proptest::collection::vec(-20.0f64..20.0, 2..40), copies in 1usize..3) {
        let p = probs(&logits);
        let (fused, _) = ensemble_fuse(&vec![p.clone(); copies]).unwrap();
        prop_assert_eq!(fused, p);
    }

    #[test]
    fn minmax_spans_the_unit_interval(values in proptest::collection::vec(-1e3f64..1e3, 2..64)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![values.len()], values.clone()).unwrap());
        let y = tape.minmax_normalize(x);
        let out = tape.value(y).data();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let degenerate = values.iter().all(|&v| v == values[0]);
        if degenerate {
            prop_assert!(out.iter().all(|&v| v == 0.0));
        } else {
            prop_assert_eq!(out.iter().copied().fold(0.0, f64::max), 1.0);
            prop_assert_eq!(out.iter().copied().fold(1.0, f64::min), 0.0);
        }
        let want = minmax(&values);
        prop_assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn retained_count_is_the_ceiling(n in 1usize..2000, pct in 1u32..=100) {
        let p = pct as f64 / 100.0;
        let exact = (pct as usize * n).div_ceil(100);
        prop_assert_eq!(retained_count(n, p), exact);
    }

    #[test]
    fn subsampling_is_stratified(counts in proptest::collection::vec(1usize..60, 2..6), pct in 1u32..=100, seed in any::<u64>()) {
        let p = pct as f64 / 100.0;
        let mut keys = Vec::new();
        for (c, &k) in counts.iter().enumerate() {
            keys.extend(std::iter::repeat((c, Split::Train)).take(k));
            keys.push((c, Split::Test));
        }
        let keep = stratified_subsample(&keys, counts.len(), p, seed).unwrap();
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        for (c, &k) in counts.iter().enumerate() {
            let kept = keep.iter().filter(|&&i| keys[i] == (c, Split::Train)).count();
            prop_assert_eq!(kept, retained_count(k, p));
        }
        prop_assert_eq!(keep.iter().filter(|&&i| keys[i].1 == Split::Test).count(), counts.len());
    }

    #[test]
    fn iou_is_bounded_and_reflexive(cells in proptest::collection::vec(0.0f64..=1.0, 24), threshold in 0.05f64..0.95) {
        let q = unit_map(cells.clone(), 4, 6);
        let mask: Vec<f64> = q.binarize(threshold).iter().map(|&b| b as u8 as f64).collect();
        prop_assert_eq!(q.iou(&mask, threshold).unwrap(), 1.0);
        let other: Vec<f64> = cells.iter().map(|&v| (v > 0.5) as u8 as f64).collect();
        let iou = q.iou(&other, threshold).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
    }

    #[test]
    fn focus_losses_have_their_signs(a in proptest::collection::vec(0.0f64..=1.0, 24), b in proptest::collection::vec(0.0f64..=1.0, 12)) {
        let qa = unit_map(a.clone(), 4, 6);
        let qb = unit_map(a.iter().rev().copied().collect(), 4, 6);
        let coarse = unit_map(b, 2, 6);
        let d = divergence(&qa, &qb).unwrap();
        let c = coherence(&qa, &coarse).unwrap();
        prop_assert!(d <= 0.0 && c >= 0.0);
        prop_assert_eq!(d, divergence(&qb, &qa).unwrap());
        prop_assert!((c - coherence(&coarse, &qa).unwrap()).abs() < 1e-12);
        let comps = LossComponents { ce: 0.5, exploration: None, divergence: Some(d), coherence: Some(c), gk: Some(0.0) };
        prop_assert!(comps.check_invariants().is_ok());
    }

    #[test]
    fn projection_stays_in_the_unit_interval(cells in proptest::collection::vec(0.0f64..=1.0, 30), target in 1usize..40) {
        let q = unit_map(cells, 5, 6);
        let p = project_focus(&q, target).unwrap();
        prop_assert_eq!(p.values.shape(), &[target, 6]);
        prop_assert!(p.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), epoch in 0usize..100, words in 0u64..1000) {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(tiny_config(4, 3, 2), SkeletonGraph::default_skeleton(), &mut rng).unwrap();
        let momentum = model.params.tensors().iter().map(|t| t.map(|v| 0.5 * v)).collect();
        let mut state = ChaCha8Rng::seed_from_u64(seed ^ 1);
        state.set_stream(3);
        for _ in 0..words {
            state.next_u32();
        }
        let ck = Checkpoint { model, momentum, epoch, rng: state, tag: "DCG".into() };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
    }
}
