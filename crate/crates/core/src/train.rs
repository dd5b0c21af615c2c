//! SGD training, the two-phase protocol, evaluation, and head transfer.
//!
//! Phase 1 fits the baseline with cross-entropy alone. Phase 2 clones it into
//! one model per branch and fine-tunes each with the branch's focus terms at a
//! lower rate. Batch gradients are per-sample gradients summed in sample order,
//! so results do not depend on how samples are spread over threads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{join_list, ConfigMap};
use crate::data::{Dataset, Sample, Split};
use crate::error::{Result, StfError};
use crate::focus::{grad_cam, grad_cam_var, project_focus, top_classes, FocusMap};
use crate::network::{Model, ParamStore, NUM_MODULES};
use crate::objectives::{
    ensemble_fuse, loss_coherence, loss_divergence, loss_exploration, loss_gk, mask_input, terms_to_text,
    total_loss_var, Branch, BranchSpec, LossComponents, LossTerm, LossWeights,
};
use crate::tensor::Tensor;

/// Module whose focus drives the losses and the evaluation.
pub const FOCUS_MODULE: usize = NUM_MODULES;
/// Companion module for the coherence term.
pub const COHERENCE_MODULE: usize = NUM_MODULES - 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Phase-1 epochs.
    pub epochs: usize,
    /// Phase-2 epochs per branch.
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub finetune_decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling per step; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub branches: Vec<BranchSpec>,
    /// Modules whose β the adjacency term supervises.
    pub gk_modules: Vec<usize>,
    pub iou_threshold: f64,
    pub eval_splits: Vec<Split>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub subsample_fraction: Option<f64>,
    /// Start phase 2 from this checkpoint instead of training phase 1.
    pub baseline: Option<PathBuf>,
    pub transfer_epochs: usize,
    pub transfer_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            finetune_epochs: 5,
            batch_size: 16,
            lr: 0.05,
            finetune_lr: 1e-3,
            decay_epochs: vec![20, 35, 45],
            finetune_decay_epochs: Vec::new(),
            momentum: 0.9,
            weight_decay: 0.0005,
            clip_norm: Some(1.0),
            seed: 0,
            weights: LossWeights::default(),
            branches: vec![BranchSpec::full(Branch::E), BranchSpec::full(Branch::Dcg)],
            gk_modules: (1..=NUM_MODULES).collect(),
            iou_threshold: 0.5,
            eval_splits: vec![Split::Test],
            threads: 0,
            subsample_fraction: None,
            baseline: None,
            transfer_epochs: 10,
            transfer_lr: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StfError::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        for (k, v) in [("train.lr", self.lr), ("train.finetune_lr", self.finetune_lr), ("transfer.lr", self.transfer_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("train.clip_norm must be positive or none, got {c}"));
            }
        }
        for (k, d) in [("train.decay_epochs", &self.decay_epochs), ("train.finetune_decay_epochs", &self.finetune_decay_epochs)] {
            if d.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{k} must be strictly increasing"));
            }
        }
        if self.gk_modules.iter().any(|&l| l == 0 || l > NUM_MODULES) || self.gk_modules.is_empty() {
            return bad(format!("train.gk_modules must name modules 1..={NUM_MODULES}"));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return bad(format!("eval.iou_threshold must lie in [0, 1], got {}", self.iou_threshold));
        }
        if let Some(p) = self.subsample_fraction {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("data.subsample_fraction must lie in (0, 1], got {p}"));
            }
        }
        self.weights.validate()
    }

    /// Reads `train.*`, `loss.*`, `eval.*`, `transfer.*`, `data.subsample_fraction`
    /// and `seed`; missing keys keep their defaults.
    pub fn from_config(c: &ConfigMap) -> Result<Self> {
        let d = Self::default();
        let list_or = |key: &str, default: Vec<usize>| -> Result<Vec<usize>> {
            match c.get(key) {
                Some(v) if v.trim().is_empty() || v.trim() == "none" => Ok(Vec::new()),
                _ => Ok(c.list(key)?.unwrap_or(default)),
            }
        };
        let e_terms: Vec<LossTerm> = c.list("train.e_terms")?.unwrap_or_else(|| vec![LossTerm::Exploration]);
        let dcg_terms: Vec<LossTerm> = c
            .list("train.dcg_terms")?
            .unwrap_or_else(|| vec![LossTerm::Divergence, LossTerm::Coherence, LossTerm::Gk]);
        let branches = match c.get("train.branches").map(str::trim) {
            Some("none") | Some("") => Vec::new(),
            Some(_) => c.list::<Branch>("train.branches")?.unwrap_or_default(),
            None => vec![Branch::E, Branch::Dcg],
        };
        let branches = branches
            .into_iter()
            .map(|b| match b {
                Branch::E => BranchSpec::with_terms(b, &e_terms),
                Branch::Dcg => BranchSpec::with_terms(b, &dcg_terms),
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = TrainConfig {
            epochs: c.parsed_or("train.epochs", d.epochs)?,
            finetune_epochs: c.parsed_or("train.finetune_epochs", d.finetune_epochs)?,
            batch_size: c.parsed_or("train.batch_size", d.batch_size)?,
            lr: c.parsed_or("train.lr", d.lr)?,
            finetune_lr: c.parsed_or("train.finetune_lr", d.finetune_lr)?,
            decay_epochs: list_or("train.decay_epochs", d.decay_epochs)?,
            finetune_decay_epochs: list_or("train.finetune_decay_epochs", d.finetune_decay_epochs)?,
            momentum: c.parsed_or("train.momentum", d.momentum)?,
            weight_decay: c.parsed_or("train.weight_decay", d.weight_decay)?,
            clip_norm: match c.get("train.clip_norm").map(str::trim) {
                Some("none") => None,
                Some(_) => c.parsed("train.clip_norm")?,
                None => d.clip_norm,
            },
            seed: c.parsed_or("seed", d.seed)?,
            weights: LossWeights::from_config(c)?,
            branches,
            gk_modules: c.list("train.gk_modules")?.unwrap_or(d.gk_modules),
            iou_threshold: c.parsed_or("eval.iou_threshold", d.iou_threshold)?,
            eval_splits: c.list("train.eval_splits")?.unwrap_or(d.eval_splits),
            threads: c.parsed_or("train.threads", d.threads)?,
            subsample_fraction: c.parsed("data.subsample_fraction")?,
            baseline: c.get("train.baseline").filter(|s| !s.is_empty()).map(PathBuf::from),
            transfer_epochs: c.parsed_or("transfer.epochs", d.transfer_epochs)?,
            transfer_lr: c.parsed_or("transfer.lr", d.transfer_lr)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config(&self) -> ConfigMap {
        let mut c = self.weights.to_config();
        c.set("train.epochs", self.epochs);
        c.set("train.finetune_epochs", self.finetune_epochs);
        c.set("train.batch_size", self.batch_size);
        c.set("train.lr", self.lr);
        c.set("train.finetune_lr", self.finetune_lr);
        c.set("train.decay_epochs", join_list(&self.decay_epochs));
        c.set("train.finetune_decay_epochs", join_list(&self.finetune_decay_epochs));
        c.set("train.momentum", self.momentum);
        c.set("train.weight_decay", self.weight_decay);
        match self.clip_norm {
            Some(v) => c.set("train.clip_norm", v),
            None => c.set("train.clip_norm", "none"),
        }
        c.set("seed", self.seed);
        let names: Vec<&str> = self.branches.iter().map(|b| b.branch.as_str()).collect();
        c.set("train.branches", if names.is_empty() { "none".to_string() } else { names.join(",") });
        for b in &self.branches {
            let key = match b.branch {
                Branch::E => "train.e_terms",
                Branch::Dcg => "train.dcg_terms",
            };
            c.set(key, terms_to_text(b.terms()));
        }
        c.set("train.gk_modules", join_list(&self.gk_modules));
        c.set("eval.iou_threshold", self.iou_threshold);
        let splits: Vec<&str> = self.eval_splits.iter().map(|s| s.as_str()).collect();
        c.set("train.eval_splits", splits.join(","));
        c.set("train.threads", self.threads);
        if let Some(p) = self.subsample_fraction {
            c.set("data.subsample_fraction", p);
        }
        if let Some(b) = &self.baseline {
            c.set("train.baseline", b.display());
        }
        c.set("transfer.epochs", self.transfer_epochs);
        c.set("transfer.lr", self.transfer_lr);
        c
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| StfError::Config(format!("cannot start worker threads: {e}")))
    }
}

/// Momentum SGD hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

/// `v ← m·v + g + wd·w; w ← w − lr·v` for every `(index, gradient)` pair,
/// with `g` first rescaled so the joint norm of all gradients is at most
/// `clip_norm`. Parameters without a gradient are left alone, momentum
/// included. Nothing is updated when any gradient is non-finite.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[(usize, Tensor)],
    velocity: &mut [Tensor],
    opt: Sgd,
    lr: f64,
) -> Result<()> {
    for (i, g) in grads {
        if !g.all_finite() {
            return Err(StfError::NonFiniteGradient(params.names()[*i].clone()));
        }
        if g.shape() != params.get(*i).shape() || velocity[*i].shape() != g.shape() {
            return Err(StfError::shape("sgd_step", g.shape(), params.get(*i).shape()));
        }
    }
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let clip = match opt.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for (i, g) in grads {
        let w = params.get_mut(*i);
        let v = &mut velocity[*i];
        for ((wk, vk), &gk) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vk = opt.momentum * *vk + clip * gk + opt.weight_decay * *wk;
            *wk -= lr * *vk;
        }
    }
    Ok(())
}

/// Base rate times 0.1 for every decay epoch already reached.
pub fn lr_schedule(epoch: usize, base: f64, decay_epochs: &[usize]) -> f64 {
    let passed = decay_epochs.iter().filter(|&&d| epoch >= d).count();
    base * 0.1f64.powi(passed as i32)
}

/// What a step optimizes.
#[derive(Clone, Copy, Debug)]
enum Objective<'a> {
    CrossEntropy,
    Branch(&'a BranchSpec),
}

struct StepOut {
    grads: Vec<Tensor>,
    losses: LossComponents<f64>,
}

/// Loss and gradients of one sample. `trainable` lists parameter indices
/// recorded as leaves; gradients come back in that order.
fn sample_step(
    model: &Model,
    trainable: &[usize],
    sample: &Sample,
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<StepOut> {
    let mut tape = Tape::new();
    let mut is_leaf = vec![false; model.params.len()];
    trainable.iter().for_each(|&i| is_leaf[i] = true);
    let bound = model.bind_with(&mut tape, |i| is_leaf[i]);
    let input = &sample.seq.data;
    let x = tape.constant(input.clone());
    let trace = model.forward(&mut tape, &bound, x)?;
    let (ce, _) = tape.softmax_xent(trace.logits(), &[sample.seq.label])?;
    let mut terms = LossComponents {
        ce,
        exploration: None,
        divergence: None,
        coherence: None,
        gk: None,
    };
    if let Objective::Branch(spec) = objective {
        let probs = tape.value(trace.probs()).data().to_vec();
        let top = top_classes(&probs, 2);
        let y = top[0];
        if spec.enables(LossTerm::Exploration) {
            let q = grad_cam(&mut tape, &trace, FOCUS_MODULE, y)?;
            let q_in = project_focus(&q, input.shape()[1])?;
            terms.exploration = Some(loss_exploration(&mut tape, model, &bound, input, &q_in, y)?);
        }
        let needs_q6 = [LossTerm::Divergence, LossTerm::Coherence, LossTerm::Gk]
            .iter()
            .any(|&t| spec.enables(t));
        if needs_q6 {
            let (qi, map_i) = grad_cam_var(&mut tape, &trace, FOCUS_MODULE, y)?;
            if spec.enables(LossTerm::Divergence) {
                let (qj, _) = grad_cam_var(&mut tape, &trace, FOCUS_MODULE, top[1])?;
                terms.divergence = Some(loss_divergence(&mut tape, qi, qj)?);
            }
            if spec.enables(LossTerm::Coherence) {
                let (q5, _) = grad_cam_var(&mut tape, &trace, COHERENCE_MODULE, y)?;
                terms.coherence = Some(loss_coherence(&mut tape, q5, qi)?);
            }
            if spec.enables(LossTerm::Gk) {
                // β re-applied to detached module inputs: the supervision
                // reaches β's own weights and nothing upstream.
                let mut betas = trace.betas.clone();
                for &l in &cfg.gk_modules {
                    let xin = tape.detach(trace.module_inputs[l - 1]);
                    betas[l - 1] = model.beta(&mut tape, &bound, l, xin)?;
                }
                terms.gk = Some(loss_gk(&mut tape, &betas, &map_i, &cfg.gk_modules)?);
            }
        }
    }
    let spec_ce = BranchSpec::with_terms(Branch::E, &[])?;
    let spec = match objective {
        Objective::CrossEntropy => &spec_ce,
        Objective::Branch(s) => s,
    };
    let total = total_loss_var(&mut tape, spec, &terms, &cfg.weights)?;
    let losses = terms.map(|v| tape.value(v).item());
    losses.check_invariants()?;
    tape.backward(total)?;
    let grads = trainable
        .iter()
        .map(|&i| {
            let v: Var = bound.params[i];
            tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(model.params.get(i).shape()))
        })
        .collect();
    Ok(StepOut { grads, losses })
}

/// Running sums of loss components over an epoch.
#[derive(Clone, Debug, Default)]
struct LossSums {
    n: usize,
    sums: [f64; 5],
    seen: [bool; 5],
}

impl LossSums {
    fn add(&mut self, c: &LossComponents<f64>) {
        self.n += 1;
        for (k, term) in LossTerm::ALL.into_iter().enumerate() {
            if let Some(v) = c.get(term) {
                self.sums[k] += v;
                self.seen[k] = true;
            }
        }
    }

    fn means(&self) -> [Option<f64>; 5] {
        let mut out = [None; 5];
        for k in 0..5 {
            if self.seen[k] && self.n > 0 {
                out[k] = Some(self.sums[k] / self.n as f64);
            }
        }
        out
    }
}

/// One optimization state: a model, its momentum buffers and shuffling stream.
struct Run {
    model: Model,
    velocity: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Run {
    fn new(model: Model, rng: ChaCha8Rng) -> Self {
        let velocity = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Run { model, velocity, rng }
    }

    fn checkpoint(&self, epoch: usize, tag: &str) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            momentum: self.velocity.clone(),
            epoch,
            rng: self.rng.clone(),
            tag: tag.to_string(),
        }
    }

    /// One pass over `train` in a fresh shuffled order.
    #[allow(clippy::too_many_arguments)]
    fn epoch(
        &mut self,
        train: &[&Sample],
        trainable: &[usize],
        objective: Objective,
        cfg: &TrainConfig,
        lr: f64,
        epoch: usize,
        pool: &rayon::ThreadPool,
    ) -> Result<LossSums> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let opt = Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
        };
        let mut sums = LossSums::default();
        for batch in order.chunks(cfg.batch_size) {
            let model = &self.model;
            let outs: Vec<Result<StepOut>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| sample_step(model, trainable, train[i], objective, cfg))
                    .collect()
            });
            let mut acc: Option<Vec<Tensor>> = None;
            for out in outs {
                let out = out?;
                let total = out.losses.ce
                    + LossTerm::ALL[1..]
                        .iter()
                        .filter_map(|&t| out.losses.get(t).map(|v| v * cfg.weights.weight(t)))
                        .sum::<f64>();
                if !total.is_finite() {
                    return Err(StfError::NonFiniteLoss { epoch });
                }
                sums.add(&out.losses);
                acc = Some(match acc {
                    None => out.grads,
                    Some(mut a) => {
                        for (x, g) in a.iter_mut().zip(&out.grads) {
                            x.data_mut().iter_mut().zip(g.data()).for_each(|(p, q)| *p += q);
                        }
                        a
                    }
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<(usize, Tensor)> = trainable
                .iter()
                .copied()
                .zip(acc.expect("non-empty batch"))
                .map(|(i, g)| (i, g.map(|v| v * scale)))
                .collect();
            sgd_step(&mut self.model.params, &grads, &mut self.velocity, opt, lr)?;
        }
        Ok(sums)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub phase: u8,
    /// `baseline`, `E`, `DCG`, `E+DCG` or `transfer`.
    pub branch: String,
    pub epoch: usize,
    pub split: Split,
    pub top1: f64,
    pub per_class: Vec<f64>,
    /// Mean training loss components of the epoch, in `LossTerm::ALL` order.
    pub losses: [Option<f64>; 5],
    pub focus_iou: Option<f64>,
    pub masked_prob: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str =
    "phase,branch,epoch,split,top1,per_class,loss_ce,loss_e,loss_d,loss_c,loss_gk,focus_iou,masked_prob";

impl MetricsRecord {
    /// CSV line without wall-clock time, so logs of identical runs match.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let per_class: Vec<String> = self.per_class.iter().map(|v| v.to_string()).collect();
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.phase,
            self.branch,
            self.epoch,
            self.split.as_str(),
            self.top1,
            per_class.join(";")
        );
        for v in self.losses {
            let _ = write!(s, ",{}", opt(v));
        }
        let _ = write!(s, ",{},{}", opt(self.focus_iou), self.masked_prob);
        s
    }
}

/// Accuracy and focus statistics of a (possibly fused) set of models.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub per_class: Vec<f64>,
    /// Mean IoU of the binarized input-resolution focus against the
    /// ground-truth masks; `None` when the split carries no masks.
    pub focus_iou: Option<f64>,
    /// Mean probability of the predicted class after suppressing the focus.
    pub masked_prob: f64,
    /// Fused probabilities per sample.
    pub probs: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

struct SampleEval {
    probs: Vec<f64>,
    pred: usize,
    iou: Option<f64>,
    masked: f64,
}

fn eval_sample(models: &[&Model], sample: &Sample, threshold: f64) -> Result<SampleEval> {
    let input = &sample.seq.data;
    let mut runs = Vec::with_capacity(models.len());
    for m in models {
        let mut tape = Tape::new();
        let bound = m.bind_with(&mut tape, |_| false);
        // A leaf input keeps the feature maps gradient-tracked for the focus.
        let x = tape.leaf(input.clone());
        let trace = m.forward(&mut tape, &bound, x)?;
        runs.push((tape, trace));
    }
    let probs: Vec<Vec<f64>> = runs.iter().map(|(t, tr)| t.value(tr.probs()).data().to_vec()).collect();
    let (fused, pred) = ensemble_fuse(&probs)?;
    let t_in = input.shape()[1];
    let mut maps = Vec::with_capacity(models.len());
    let mut masked = 0.0;
    for ((tape, trace), m) in runs.iter_mut().zip(models) {
        let q = project_focus(&grad_cam(tape, trace, FOCUS_MODULE, pred)?, t_in)?;
        masked += m.predict(&mask_input(input, &q)?)?[pred];
        maps.push(q);
    }
    let k = models.len() as f64;
    let mean = maps[1..].iter().fold(maps[0].values.clone(), |acc, q| {
        let data = acc.data().iter().zip(q.values.data()).map(|(a, b)| a + b).collect();
        Tensor::new(acc.shape().to_vec(), data).expect("same shape")
    });
    let mean = FocusMap::new(mean.map(|v| v / k), 0, pred)?;
    let iou = sample.mask.as_ref().map(|mask| mean.iou(mask, threshold)).transpose()?;
    Ok(SampleEval {
        probs: fused,
        pred,
        iou,
        masked: masked / k,
    })
}

/// Fuses `models` by averaging probabilities and scores them on `samples`.
pub fn evaluate(models: &[&Model], samples: &[&Sample], iou_threshold: f64, threads: usize) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(StfError::InvalidArgument("evaluation split is empty".into()));
    }
    let first = models
        .first()
        .ok_or_else(|| StfError::InvalidArgument("no model to evaluate".into()))?;
    let classes = first.config.classes;
    if let Some(m) = models.iter().find(|m| m.config.classes != classes) {
        return Err(StfError::InvalidArgument(format!(
            "cannot fuse models with {} and {} classes",
            classes, m.config.classes
        )));
    }
    let pool = TrainConfig {
        threads,
        ..Default::default()
    }
    .pool()?;
    let outs: Vec<Result<SampleEval>> =
        pool.install(|| samples.par_iter().map(|s| eval_sample(models, s, iou_threshold)).collect());
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    let (mut iou_sum, mut iou_n, mut masked) = (0.0, 0usize, 0.0);
    for (o, s) in outs.iter().zip(samples) {
        let label = s.seq.label;
        if label >= classes {
            return Err(StfError::TargetOutOfRange { index: label, classes });
        }
        total[label] += 1;
        correct[label] += (o.pred == label) as usize;
        if let Some(v) = o.iou {
            iou_sum += v;
            iou_n += 1;
        }
        masked += o.masked;
    }
    let n = samples.len() as f64;
    Ok(EvalResult {
        top1: correct.iter().sum::<usize>() as f64 / n,
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| if t == 0 { f64::NAN } else { c as f64 / t as f64 })
            .collect(),
        focus_iou: (iou_n > 0).then(|| iou_sum / iou_n as f64),
        masked_prob: masked / n,
        probs: outs.iter().map(|o| o.probs.clone()).collect(),
        predictions: outs.iter().map(|o| o.pred).collect(),
    })
}

/// Everything a training run produced.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub baseline: Checkpoint,
    pub branches: Vec<(BranchSpec, Checkpoint)>,
    pub records: Vec<MetricsRecord>,
}

impl TrainOutput {
    pub fn branch(&self, b: Branch) -> Option<&Checkpoint> {
        self.branches.iter().find(|(s, _)| s.branch == b).map(|(_, c)| c)
    }
}

/// File name of a branch checkpoint inside the output directory.
pub fn checkpoint_name(tag: &str) -> String {
    match tag {
        "baseline" | "transfer" => format!("{tag}.ckpt"),
        other => format!("branch_{}.ckpt", other.to_ascii_lowercase()),
    }
}

/// Metrics CSV and timing CSV writer; both files are rewritten on every line
/// so a crashed run still leaves a usable log.
struct Logger {
    dir: Option<PathBuf>,
    metrics: String,
    timing: String,
}

impl Logger {
    fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d).map_err(|e| StfError::io(d, e))?;
        }
        Ok(Logger {
            dir: dir.map(Path::to_path_buf),
            metrics: format!("{METRICS_HEADER}\n"),
            timing: "phase,branch,epoch,split,seconds\n".into(),
        })
    }

    fn push(&mut self, r: &MetricsRecord) -> Result<()> {
        self.metrics.push_str(&r.to_csv());
        self.metrics.push('\n');
        let _ = writeln!(self.timing, "{},{},{},{},{:.3}", r.phase, r.branch, r.epoch, r.split.as_str(), r.seconds);
        if let Some(d) = &self.dir {
            for (name, text) in [("metrics.csv", &self.metrics), ("timing.csv", &self.timing)] {
                let p = d.join(name);
                std::fs::write(&p, text).map_err(|e| StfError::io(&p, e))?;
            }
        }
        Ok(())
    }

    fn save(&self, ck: &Checkpoint) -> Result<()> {
        match &self.dir {
            Some(d) => ck.save(&d.join(checkpoint_name(&ck.tag))),
            None => Ok(()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn record_epoch(
    log: &mut Logger,
    records: &mut Vec<MetricsRecord>,
    observer: &mut dyn FnMut(&MetricsRecord),
    models: &[&Model],
    dataset: &Dataset,
    cfg: &TrainConfig,
    phase: u8,
    branch: &str,
    epoch: usize,
    losses: [Option<f64>; 5],
    started: Instant,
) -> Result<()> {
    for &split in &cfg.eval_splits {
        let samples = dataset.split(split);
        let r = evaluate(models, &samples, cfg.iou_threshold, cfg.threads)?;
        let rec = MetricsRecord {
            phase,
            branch: branch.to_string(),
            epoch,
            split,
            top1: r.top1,
            per_class: r.per_class,
            losses,
            focus_iou: r.focus_iou,
            masked_prob: r.masked_prob,
            seconds: started.elapsed().as_secs_f64(),
        };
        log.push(&rec)?;
        observer(&rec);
        records.push(rec);
    }
    Ok(())
}

fn check_dataset(model: &Model, dataset: &Dataset) -> Result<()> {
    let (c, n) = (model.config.in_channels, model.graph.num_joints());
    for s in &dataset.samples {
        if s.seq.channels() != c || s.seq.joints() != n {
            return Err(StfError::InvalidArgument(format!(
                "sequence `{}` is {}×{}×{}, the network expects {c} channels and {n} joints",
                s.seq.source_id,
                s.seq.channels(),
                s.seq.frames(),
                s.seq.joints()
            )));
        }
        if s.seq.label >= model.config.classes {
            return Err(StfError::TargetOutOfRange {
                index: s.seq.label,
                classes: model.config.classes,
            });
        }
    }
    if dataset.split(Split::Train).is_empty() {
        return Err(StfError::InvalidArgument("training split is empty".into()));
    }
    Ok(())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Runs both phases. `model` is the freshly initialized network (ignored when
/// `cfg.baseline` names a checkpoint). With `out`, the metrics log, timing log
/// and checkpoints are written there.
pub fn train(
    model: Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let dataset = match cfg.subsample_fraction {
        Some(p) if p < 1.0 => dataset.subsample(p, cfg.seed)?,
        _ => dataset.clone(),
    };
    let pool = cfg.pool()?;
    let mut log = Logger::new(out)?;
    let mut records = Vec::new();
    let train_set = dataset.split(Split::Train);
    let everything: Vec<usize> = (0..model.params.len()).collect();

    let baseline = match &cfg.baseline {
        Some(path) => Checkpoint::load(path)?,
        None => {
            check_dataset(&model, &dataset)?;
            let mut run = Run::new(model, stream(cfg.seed, 0));
            for epoch in 1..=cfg.epochs {
                let t0 = Instant::now();
                let lr = lr_schedule(epoch - 1, cfg.lr, &cfg.decay_epochs);
                let sums = run.epoch(&train_set, &everything, Objective::CrossEntropy, cfg, lr, epoch, &pool)?;
                record_epoch(&mut log, &mut records, observer, &[&run.model], &dataset, cfg, 1, "baseline", epoch, sums.means(), t0)?;
            }
            let ck = run.checkpoint(cfg.epochs, "baseline");
            log.save(&ck)?;
            ck
        }
    };
    check_dataset(&baseline.model, &dataset)?;

    let mut branches = Vec::new();
    for (b, spec) in cfg.branches.iter().enumerate() {
        let tag = spec.branch.as_str();
        let mut run = Run::new(baseline.model.clone(), stream(cfg.seed, 1 + b as u64));
        let t0 = Instant::now();
        record_epoch(&mut log, &mut records, observer, &[&run.model], &dataset, cfg, 2, tag, 0, [None; 5], t0)?;
        for epoch in 1..=cfg.finetune_epochs {
            let t0 = Instant::now();
            let lr = lr_schedule(epoch - 1, cfg.finetune_lr, &cfg.finetune_decay_epochs);
            let sums = run.epoch(&train_set, &everything, Objective::Branch(spec), cfg, lr, epoch, &pool)?;
            record_epoch(&mut log, &mut records, observer, &[&run.model], &dataset, cfg, 2, tag, epoch, sums.means(), t0)?;
        }
        let ck = run.checkpoint(cfg.finetune_epochs, tag);
        log.save(&ck)?;
        branches.push((spec.clone(), ck));
    }
    if branches.len() > 1 {
        let t0 = Instant::now();
        let models: Vec<&Model> = branches.iter().map(|(_, c)| &c.model).collect();
        let name: Vec<&str> = branches.iter().map(|(s, _)| s.branch.as_str()).collect();
        record_epoch(&mut log, &mut records, observer, &models, &dataset, cfg, 2, &name.join("+"), cfg.finetune_epochs, [None; 5], t0)?;
    }
    Ok(TrainOutput {
        baseline,
        branches,
        records,
    })
}

/// Replaces the classifier of `source` with a fresh `classes`-way head and
/// trains only that head on `dataset`; every other parameter stays frozen.
pub fn transfer_head(
    source: &Model,
    classes: usize,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 99);
    let mut model = source.clone();
    model.replace_head(classes, &mut rng)?;
    check_dataset(&model, dataset)?;
    let pool = cfg.pool()?;
    let mut log = Logger::new(out)?;
    let mut records = Vec::new();
    let head = [model.layout.head_weight, model.layout.head_bias];
    let train_set = dataset.split(Split::Train);
    let mut run = Run::new(model, rng);
    for epoch in 1..=cfg.transfer_epochs {
        let t0 = Instant::now();
        let sums = run.epoch(&train_set, &head, Objective::CrossEntropy, cfg, cfg.transfer_lr, epoch, &pool)?;
        record_epoch(&mut log, &mut records, observer, &[&run.model], dataset, cfg, 3, "transfer", epoch, sums.means(), t0)?;
    }
    let ck = run.checkpoint(cfg.transfer_epochs, "transfer");
    log.save(&ck)?;
    Ok((ck, records))
}
