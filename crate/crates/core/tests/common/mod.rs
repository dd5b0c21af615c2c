#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use stf_core::{NetworkConfig, ScaleMode, SkeletonGraph, Tensor};

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random connected graph: a random spanning tree plus a few chords.
pub fn random_connected_graph(n: usize, rng: &mut ChaCha8Rng) -> SkeletonGraph {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for i in 1..n {
        let p = order[rng.gen_range(0..i)];
        edges.push((p, order[i]));
    }
    let extra = if n > 2 { rng.gen_range(0..n) } else { 0 };
    for _ in 0..extra {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let key = (a.min(b), a.max(b));
        if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == key) {
            edges.push((a, b));
        }
    }
    SkeletonGraph::build(&edges, n, rng.gen_range(0..n)).unwrap()
}

/// All-pairs hop counts by Floyd–Warshall; `usize::MAX` marks unreachable.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    const INF: usize = usize::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Binary k-hop matrices built from Floyd–Warshall distances.
pub fn oracle_adjacency(graph: &SkeletonGraph, scales: usize, mode: ScaleMode) -> Vec<Vec<Vec<f64>>> {
    let n = graph.num_joints();
    let d = floyd_warshall(n, graph.edges());
    (1..=scales)
        .map(|k| {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let hit = match mode {
                                ScaleMode::Disentangled => d[i][j] == k,
                                ScaleMode::Cumulative => d[i][j] <= k,
                            };
                            if i == j || hit { 1.0 } else { 0.0 }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// ReLU(Σ_k W_k X_t (A_k + G_k)) frame by frame with explicit loops.
pub fn naive_spatial_conv(x: &Tensor, a: &[Tensor], g: &[Tensor], w: &[Tensor]) -> Tensor {
    let (ci, t, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w[0].shape()[0];
    let mut out = Tensor::zeros(&[co, t, n]);
    for f in 0..t {
        for o in 0..co {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..w.len() {
                    for c in 0..ci {
                        for i in 0..n {
                            acc += w[k].at(&[o, c]) * x.at(&[c, f, i]) * (a[k].at(&[i, j]) + g[k].at(&[i, j]));
                        }
                    }
                }
                out.set(&[o, f, j], acc.max(0.0));
            }
        }
    }
    out
}

/// Direct cross-correlation with centered zero padding and a temporal stride.
pub fn naive_conv_tn(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let (ci, t, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kt, kn) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let t_out = t.div_ceil(stride);
    let mut out = Tensor::zeros(&[co, t_out, n]);
    for o in 0..co {
        for to in 0..t_out {
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dt in 0..kt {
                        for dn in 0..kn {
                            let src_t = (to * stride + dt) as isize - (kt / 2) as isize;
                            let src_n = j as isize + dn as isize - (kn / 2) as isize;
                            if src_t < 0 || src_t >= t as isize || src_n < 0 || src_n >= n as isize {
                                continue;
                            }
                            acc += k.at(&[o, c, dt, dn]) * x.at(&[c, src_t as usize, src_n as usize]);
                        }
                    }
                }
                out.set(&[o, to, j], acc);
            }
        }
    }
    out
}

/// A six-module network small enough for exhaustive finite differences.
pub fn tiny_config(in_channels: usize, classes: usize, scales: usize) -> NetworkConfig {
    NetworkConfig {
        in_channels,
        channels: vec![4, 4, 6, 6, 8, 8],
        scales,
        classes,
        beta_channels: 3,
        alpha_width: 3,
        ..NetworkConfig::default()
    }
}

/// Min-max normalization computed independently of the tape.
pub fn minmax(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|v| (v - lo) / (hi - lo)).collect()
}
