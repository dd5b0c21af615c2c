mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use stf_core::focus::grad_cam;
use stf_core::network::stf_spatial_conv;
use stf_core::{Model, Tape, Tensor};

/// Moves joint `i` of the last axis to `perm[i]`.
fn permute_joints(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let n = s[s.len() - 1];
    let mut out = Tensor::zeros(s);
    for (flat, &v) in x.data().iter().enumerate() {
        let (row, j) = (flat / n, flat % n);
        out.data_mut()[row * n + perm[j]] = v;
    }
    out
}

fn permute_square(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = a.shape()[0];
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(&[perm[i], perm[j]], a.at(&[i, j]));
        }
    }
    out
}

fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spatial_conv_commutes_with_relabeling(seed in any::<u64>(), ci in 1usize..5, co in 1usize..5, t in 1usize..6, n in 2usize..8, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = random_perm(n, &mut rng);
        let x = rand_tensor(&[ci, t, n], &mut rng);
        let a: Vec<Tensor> = (0..k).map(|_| rand_tensor(&[n, n], &mut rng)).collect();
        let g: Vec<Tensor> = (0..k).map(|_| rand_tensor(&[n, n], &mut rng)).collect();
        let w: Vec<Tensor> = (0..k).map(|_| rand_tensor(&[co, ci], &mut rng)).collect();
        let run = |x: &Tensor, a: &[Tensor], g: &[Tensor]| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let av: Vec<_> = a.iter().map(|m| tape.constant(m.clone())).collect();
            let gv: Vec<_> = g.iter().map(|m| tape.constant(m.clone())).collect();
            let wv: Vec<_> = w.iter().map(|m| tape.constant(m.clone())).collect();
            let y = stf_spatial_conv(&mut tape, xv, &av, &gv, &wv).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x, &a, &g);
        let pa: Vec<Tensor> = a.iter().map(|m| permute_square(m, &perm)).collect();
        let pg: Vec<Tensor> = g.iter().map(|m| permute_square(m, &perm)).collect();
        let moved = run(&permute_joints(&x, &perm), &pa, &pg);
        prop_assert!(moved.max_abs_diff(&permute_joints(&base, &perm)) < 1e-12);
    }

    #[test]
    fn network_is_invariant_to_joint_relabeling(seed in any::<u64>(), n in 3usize..8, t in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_connected_graph(n, &mut rng);
        let model = Model::init(tiny_config(3, 3, 2.min(n - 1)), graph.clone(), &mut rng).unwrap();
        let perm = random_perm(n, &mut rng);
        let relabeled = Model::from_params(model.config.clone(), graph.permuted(&perm).unwrap(), model.params.clone()).unwrap();
        let input = rand_tensor(&[3, t, n], &mut rng);
        let moved = permute_joints(&input, &perm);

        let p = model.predict(&input).unwrap();
        let q = relabeled.predict(&moved).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        let focus = |m: &Model, x: &Tensor| {
            let mut tape = Tape::new();
            let bound = m.bind_with(&mut tape, |_| false);
            let xv = tape.leaf(x.clone());
            let trace = m.forward(&mut tape, &bound, xv).unwrap();
            grad_cam(&mut tape, &trace, 6, 0).unwrap().values
        };
        let qa = permute_joints(&focus(&model, &input), &perm);
        let qb = focus(&relabeled, &moved);
        prop_assert!(qa.max_abs_diff(&qb) < 1e-9);
    }
}
