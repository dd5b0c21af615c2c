//! Synthetic skeleton actions with known ground-truth focus.
//!
//! Each class animates a set of joints with a sinusoid inside a frame window;
//! every other joint only carries sensor noise. The indicator of
//! (active joints × active frames) is the focus a good classifier should find.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{join_list, parse_list, ConfigMap};
use crate::data::manifest::{write_mask, Dataset, DatasetManifest, ManifestEntry, Sample, Split};
use crate::data::sequence::{preprocess, write_sequence, PreprocessConfig};
use crate::error::{Result, StfError};
use crate::graph::SkeletonGraph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMotion {
    pub joints: Vec<usize>,
    /// Active frames `[start, end)`.
    pub window: (usize, usize),
    /// Sinusoid periods over the window.
    pub cycles: f64,
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub noise_sigma: f64,
    pub graph: SkeletonGraph,
    pub preprocess: PreprocessConfig,
    pub classes: Vec<ClassMotion>,
}

impl Default for SyntheticSpec {
    /// Four classes on the bundled skeleton: left arm early, left arm late,
    /// right arm, legs. The first two differ only in their window.
    fn default() -> Self {
        let class = |joints: &[usize], window, cycles| ClassMotion {
            joints: joints.to_vec(),
            window,
            cycles,
            phase: 0.0,
            amplitude: 0.3,
        };
        SyntheticSpec {
            frames: 32,
            noise_sigma: 0.02,
            graph: SkeletonGraph::default_skeleton(),
            preprocess: PreprocessConfig::default(),
            classes: vec![
                class(&[2, 3], (4, 16), 2.0),
                class(&[2, 3], (18, 30), 2.0),
                class(&[4, 5], (8, 24), 1.5),
                class(&[6, 7, 8, 9], (8, 24), 1.0),
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_joints();
        if self.classes.len() < 2 {
            return Err(StfError::InvalidArgument("synthetic spec needs at least 2 classes".into()));
        }
        for (c, m) in self.classes.iter().enumerate() {
            if m.joints.is_empty() || m.joints.iter().any(|&j| j >= n) {
                return Err(StfError::InvalidArgument(format!("class {c}: active joints invalid")));
            }
            if m.window.0 >= m.window.1 || m.window.1 > self.frames {
                return Err(StfError::InvalidArgument(format!(
                    "class {c}: window {:?} outside [0, {})",
                    m.window, self.frames
                )));
            }
        }
        for i in 0..self.classes.len() {
            for j in i + 1..self.classes.len() {
                if self.classes[i] == self.classes[j] {
                    return Err(StfError::InvalidArgument(format!("classes {i} and {j} are identical")));
                }
            }
        }
        Ok(())
    }

    /// Ground-truth T×N mask of a class.
    pub fn mask(&self, class: usize) -> Vec<f64> {
        let n = self.graph.num_joints();
        let m = &self.classes[class];
        let mut mask = vec![0.0; self.frames * n];
        for t in m.window.0..m.window.1 {
            for &j in &m.joints {
                mask[t * n + j] = 1.0;
            }
        }
        mask
    }

    /// Reads `frames`, `noise_sigma`, `classes` and per-class
    /// `class.<i>.joints|window|cycles|phase|amplitude` keys. Missing keys fall
    /// back to the default spec.
    pub fn from_config(cfg: &ConfigMap, graph: Option<SkeletonGraph>) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        if let Some(g) = graph {
            spec.graph = g;
        }
        spec.frames = cfg.parsed_or("frames", spec.frames)?;
        spec.noise_sigma = cfg.parsed_or("noise_sigma", spec.noise_sigma)?;
        if let Some(c) = cfg.parsed::<usize>("center_joint")? {
            spec.preprocess.center_joint = c;
        }
        if let Some(pair) = cfg.list::<usize>("height_pair")? {
            let [a, b] = pair[..] else {
                return Err(StfError::Config("height_pair needs two joints".into()));
            };
            spec.preprocess.height_pair = (a, b);
        }
        let count = cfg.parsed_or("classes", spec.classes.len())?;
        let mut classes = Vec::with_capacity(count);
        for i in 0..count {
            let base = spec.classes.get(i).cloned();
            let key = |k: &str| format!("class.{i}.{k}");
            let joints = match cfg.get(&key("joints")) {
                Some(v) => parse_list(v).map_err(|_| StfError::Config(format!("bad {}", key("joints"))))?,
                None => base.as_ref().map(|b| b.joints.clone()).ok_or_else(|| {
                    StfError::Config(format!("missing {}", key("joints")))
                })?,
            };
            let window = match cfg.list::<usize>(&key("window"))? {
                Some(w) if w.len() == 2 => (w[0], w[1]),
                Some(_) => return Err(StfError::Config(format!("{} needs start,end", key("window")))),
                None => base.as_ref().map(|b| b.window).ok_or_else(|| {
                    StfError::Config(format!("missing {}", key("window")))
                })?,
            };
            let fallback = base.unwrap_or(ClassMotion {
                joints: vec![],
                window: (0, 0),
                cycles: 1.0,
                phase: 0.0,
                amplitude: 0.3,
            });
            classes.push(ClassMotion {
                joints,
                window,
                cycles: cfg.parsed_or(&key("cycles"), fallback.cycles)?,
                phase: cfg.parsed_or(&key("phase"), fallback.phase)?,
                amplitude: cfg.parsed_or(&key("amplitude"), fallback.amplitude)?,
            });
        }
        spec.classes = classes;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config(&self) -> ConfigMap {
        let mut c = ConfigMap::new();
        c.set("frames", self.frames);
        c.set("noise_sigma", self.noise_sigma);
        c.set("center_joint", self.preprocess.center_joint);
        c.set(
            "height_pair",
            join_list(&[self.preprocess.height_pair.0, self.preprocess.height_pair.1]),
        );
        c.set("classes", self.classes.len());
        for (i, m) in self.classes.iter().enumerate() {
            c.set(format!("class.{i}.joints"), join_list(&m.joints));
            c.set(format!("class.{i}.window"), join_list(&[m.window.0, m.window.1]));
            c.set(format!("class.{i}.cycles"), m.cycles);
            c.set(format!("class.{i}.phase"), m.phase);
            c.set(format!("class.{i}.amplitude"), m.amplitude);
        }
        c
    }
}

/// A generated dataset: in-memory samples (with masks) and the manifest that
/// [`SyntheticData::write`] materializes.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub manifest: DatasetManifest,
    pub dataset: Dataset,
}

/// Rest pose of the bundled skeleton in body-height units; other graphs get
/// a fan layout hanging off each parent.
fn rest_pose(graph: &SkeletonGraph) -> Vec<[f64; 3]> {
    if *graph == SkeletonGraph::default_skeleton() {
        return vec![
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-0.3, 0.75, 0.0],
            [-0.55, 0.55, 0.0],
            [0.3, 0.75, 0.0],
            [0.55, 0.55, 0.0],
            [-0.15, -0.45, 0.0],
            [-0.15, -0.9, 0.0],
            [0.15, -0.45, 0.0],
            [0.15, -0.9, 0.0],
        ];
    }
    let n = graph.num_joints();
    let dist = graph.distances();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| dist[graph.root()][j]);
    let mut pos = vec![[0.0; 3]; n];
    for j in order {
        let p = graph.parent(j);
        if p != j {
            let angle = std::f64::consts::TAU * j as f64 / n as f64;
            pos[j] = [pos[p][0] + 0.3 * angle.cos(), pos[p][1] + 0.3 * angle.sin(), pos[p][2] + 0.05];
        }
    }
    pos
}

/// Generates `train_per_class` + `test_per_class` sequences per class.
/// Output depends only on (spec, counts, seed).
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<SyntheticData> {
    spec.validate()?;
    if train_per_class + test_per_class == 0 {
        return Err(StfError::InvalidArgument("sample count must be at least 1".into()));
    }
    let per_class = train_per_class + test_per_class;
    let pose = rest_pose(&spec.graph);
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(class, i))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let split = if i < train_per_class { Split::Train } else { Split::Test };
            let seq = synth_one(spec, &pose, class, &mut rng)?;
            let name = format!("c{class}_{}_{i:04}", split.as_str());
            Ok(Sample {
                seq: seq.with_source(name),
                split,
                mask: Some(spec.mask(class)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = samples
        .iter()
        .map(|s| ManifestEntry {
            path: PathBuf::from(format!("seq/{}.seq", s.seq.source_id)),
            label: s.seq.label,
            split: s.split,
        })
        .collect();
    let classes = spec.classes.len();
    Ok(SyntheticData {
        manifest: DatasetManifest {
            entries,
            classes,
            graph: Some(PathBuf::from("skeleton.graph")),
            seed: Some(seed),
        },
        dataset: Dataset { classes, samples },
    })
}

fn synth_one(
    spec: &SyntheticSpec,
    pose: &[[f64; 3]],
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<crate::data::sequence::SkeletonSequence> {
    let n = spec.graph.num_joints();
    let t_len = spec.frames;
    let motion = &spec.classes[class];
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| StfError::InvalidArgument(format!("noise sigma: {e}")))?;
    let body_scale = rng.gen_range(0.9..1.1);
    let offset: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..4.0)];
    let phase = motion.phase + rng.gen_range(-0.5..0.5);
    let amp = motion.amplitude * rng.gen_range(0.8..1.2);
    let (w0, w1) = motion.window;
    let mut raw = Tensor::zeros(&[3, t_len, n]);
    for t in 0..t_len {
        let active = t >= w0 && t < w1;
        let u = (t - w0.min(t)) as f64 / (w1 - w0) as f64;
        let arg = std::f64::consts::TAU * motion.cycles * u + phase;
        for v in 0..n {
            let mut p = pose[v];
            if active && motion.joints.contains(&v) {
                p[0] += amp * arg.sin();
                p[1] += 0.5 * amp * arg.cos();
            }
            for c in 0..3 {
                let value = body_scale * (p[c] + noise.sample(rng)) + offset[c];
                raw.set(&[c, t, v], value);
            }
        }
    }
    let mut seq = preprocess(&raw, &spec.preprocess)?;
    seq.label = class;
    Ok(seq)
}

impl SyntheticData {
    /// Writes `manifest.txt`, `skeleton.graph`, `synth.cfg`, and one
    /// `seq/<name>.seq` plus `seq/<name>.mask` per sample under `dir`.
    pub fn write(&self, spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
        let seq_dir = dir.join("seq");
        std::fs::create_dir_all(&seq_dir).map_err(|e| StfError::io(&seq_dir, e))?;
        for (entry, sample) in self.manifest.entries.iter().zip(&self.dataset.samples) {
            let path = dir.join(&entry.path);
            write_sequence(&sample.seq, &path)?;
            if let Some(mask) = &sample.mask {
                write_mask(mask, sample.seq.frames(), sample.seq.joints(), &path.with_extension("mask"))?;
            }
        }
        let graph_path = dir.join("skeleton.graph");
        std::fs::write(&graph_path, spec.graph.to_text()).map_err(|e| StfError::io(&graph_path, e))?;
        let cfg_path = dir.join("synth.cfg");
        std::fs::write(&cfg_path, spec.to_config().to_text()).map_err(|e| StfError::io(&cfg_path, e))?;
        let manifest_path = dir.join("manifest.txt");
        self.manifest.save(&manifest_path)?;
        Ok(manifest_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn variance(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn active_region_variance_dominates_noise() {
        let mut spec = SyntheticSpec::default();
        spec.classes[0] = ClassMotion {
            joints: vec![2, 3],
            window: (8, 24),
            cycles: 2.0,
            phase: 0.0,
            amplitude: 0.3,
        };
        let data = generate_synthetic(&spec, 3, 0, 11).unwrap();
        let floor = spec.noise_sigma.powi(2);
        for sample in data.dataset.samples.iter().filter(|s| s.seq.label == 0) {
            for v in 1..10 {
                // x-coordinate variance over the window frames
                let xs: Vec<f64> = (8..24).map(|t| sample.seq.data.at(&[0, t, v])).collect();
                let ratio = variance(&xs) / floor;
                if [2, 3].contains(&v) {
                    assert!(ratio >= 10.0, "joint {v}: {ratio}");
                } else {
                    assert!(ratio < 10.0, "joint {v}: {ratio}");
                }
            }
            // active joints are quiet outside the window
            let xs: Vec<f64> = (24..32).map(|t| sample.seq.data.at(&[0, t, 3])).collect();
            assert!(variance(&xs) / floor < 10.0);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, 2, 1, 5).unwrap();
        let b = generate_synthetic(&spec, 2, 1, 5).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate_synthetic(&spec, 2, 1, 6).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn window_only_classes_agree_outside_windows() {
        // classes 0 and 1 share joints and differ only in window
        let spec = SyntheticSpec::default();
        let data = generate_synthetic(&spec, 4, 0, 3).unwrap();
        let mean_at = |class: usize, t: usize, v: usize| {
            let xs: Vec<f64> = data
                .dataset
                .samples
                .iter()
                .filter(|s| s.seq.label == class)
                .map(|s| s.seq.data.at(&[0, t, v]))
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        for t in (0..4).chain(30..32) {
            for v in 0..10 {
                let d = (mean_at(0, t, v) - mean_at(1, t, v)).abs();
                assert!(d < 6.0 * spec.noise_sigma, "t={t} v={v} diff={d}");
            }
        }
    }

    #[test]
    fn masks_match_spec() {
        let spec = SyntheticSpec::default();
        let data = generate_synthetic(&spec, 1, 1, 0).unwrap();
        for s in &data.dataset.samples {
            let mask = s.mask.as_ref().unwrap();
            let m = &spec.classes[s.seq.label];
            let area = mask.iter().filter(|&&x| x > 0.5).count();
            assert_eq!(area, m.joints.len() * (m.window.1 - m.window.0));
            assert_eq!(mask[m.window.0 * 10 + m.joints[0]], 1.0);
        }
    }

    #[test]
    fn identical_classes_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.classes[1] = spec.classes[0].clone();
        assert!(generate_synthetic(&spec, 1, 0, 0).is_err());
    }

    #[test]
    fn config_round_trip() {
        let spec = SyntheticSpec::default();
        let back = SyntheticSpec::from_config(&spec.to_config(), None).unwrap();
        assert_eq!(back, spec);
    }
}
