//! The stacked STF classifier.
//!
//! Each of the six modules aggregates joints with `Σ_k W_k X (A_k + G_k)`,
//! where `A_k` is the fixed k-hop adjacency and `G_k = α(β(X))` is generated
//! from the module input, then applies a temporal convolution. A global
//! average pool and one affine layer produce class logits.

use rand::{Rng, SeedableRng};

use crate::autodiff::{ReduceKind, Tape, Var};
use crate::config::{join_list, ConfigMap};
use crate::error::{Result, StfError};
use crate::graph::{MultiScaleAdjacency, ScaleMode, SkeletonGraph};
use crate::tensor::{Scalar, Tensor};

pub const NUM_MODULES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Input channels, coordinates plus visibility.
    pub in_channels: usize,
    /// Output width of each module.
    pub channels: Vec<usize>,
    /// Temporal stride of each module.
    pub strides: Vec<usize>,
    /// Adjacency scales K.
    pub scales: usize,
    pub temporal_kernel: usize,
    pub classes: usize,
    pub beta_channels: usize,
    /// β kernel extent along time and along the joint axis.
    pub beta_kernel: (usize, usize),
    /// Descriptor width d of α.
    pub alpha_width: usize,
    pub alpha_kernel: usize,
    pub adjacency_mode: ScaleMode,
    /// Subtract each joint's temporal mean per channel before module 1, so
    /// motion rather than the shared rest pose drives the features.
    pub center_input: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 4,
            channels: vec![16, 16, 32, 32, 64, 64],
            strides: vec![1, 1, 2, 1, 2, 1],
            scales: 3,
            temporal_kernel: 3,
            classes: 4,
            beta_channels: 8,
            beta_kernel: (3, 1),
            alpha_width: 8,
            alpha_kernel: 3,
            adjacency_mode: ScaleMode::Disentangled,
            center_input: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StfError::Config(m));
        if self.channels.len() != NUM_MODULES || self.strides.len() != NUM_MODULES {
            return bad(format!("network needs {NUM_MODULES} modules"));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return bad(format!("strides must be 1 or 2, got {:?}", self.strides));
        }
        let widths = [self.in_channels, self.scales, self.beta_channels, self.alpha_width];
        if self.channels.iter().chain(&widths).any(|&c| c == 0) {
            return bad("all widths must be positive".into());
        }
        if self.classes < 2 {
            return bad("need at least 2 classes".into());
        }
        for k in [self.temporal_kernel, self.beta_kernel.0, self.beta_kernel.1, self.alpha_kernel] {
            if k % 2 == 0 {
                return bad(format!("kernel extents must be odd, got {k}"));
            }
        }
        Ok(())
    }

    pub fn module_in(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.channels[l - 1]
        }
    }

    /// Temporal length at the input of module `l` (l = 6 is the final output).
    pub fn frames_at(&self, input_frames: usize, l: usize) -> usize {
        self.strides[..l].iter().fold(input_frames, |t, &s| t.div_ceil(s))
    }

    pub fn to_config(&self) -> ConfigMap {
        let mut c = ConfigMap::new();
        c.set("net.in_channels", self.in_channels);
        c.set("net.channels", join_list(&self.channels));
        c.set("net.strides", join_list(&self.strides));
        c.set("net.scales", self.scales);
        c.set("net.temporal_kernel", self.temporal_kernel);
        c.set("net.classes", self.classes);
        c.set("net.beta_channels", self.beta_channels);
        c.set("net.beta_kernel", join_list(&[self.beta_kernel.0, self.beta_kernel.1]));
        c.set("net.alpha_width", self.alpha_width);
        c.set("net.alpha_kernel", self.alpha_kernel);
        c.set("net.adjacency_mode", self.adjacency_mode);
        c.set("net.center_input", self.center_input);
        c
    }

    pub fn from_config(c: &ConfigMap) -> Result<Self> {
        let d = NetworkConfig::default();
        let beta_kernel = match c.list::<usize>("net.beta_kernel")? {
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(_) => return Err(StfError::Config("net.beta_kernel needs two extents".into())),
            None => d.beta_kernel,
        };
        let cfg = NetworkConfig {
            in_channels: c.parsed_or("net.in_channels", d.in_channels)?,
            channels: c.list("net.channels")?.unwrap_or(d.channels),
            strides: c.list("net.strides")?.unwrap_or(d.strides),
            scales: c.parsed_or("net.scales", d.scales)?,
            temporal_kernel: c.parsed_or("net.temporal_kernel", d.temporal_kernel)?,
            classes: c.parsed_or("net.classes", d.classes)?,
            beta_channels: c.parsed_or("net.beta_channels", d.beta_channels)?,
            beta_kernel,
            alpha_width: c.parsed_or("net.alpha_width", d.alpha_width)?,
            alpha_kernel: c.parsed_or("net.alpha_kernel", d.alpha_kernel)?,
            adjacency_mode: c.parsed_or("net.adjacency_mode", d.adjacency_mode)?,
            center_input: c.parsed_or("net.center_input", d.center_input)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Kernel and bias parameter indices of one convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvIdx {
    pub kernel: usize,
    pub bias: usize,
}

/// Parameter indices of one STF module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleLayout {
    pub w: Vec<usize>,
    pub beta: [ConvIdx; 3],
    pub alpha_temporal: ConvIdx,
    pub alpha_u: Vec<ConvIdx>,
    pub alpha_v: Vec<ConvIdx>,
    pub temporal: ConvIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub modules: Vec<ModuleLayout>,
    pub head_weight: usize,
    pub head_bias: usize,
}

/// Uniform in ±sqrt(6 / fan_in); keeps the ReLU main path from shrinking
/// geometrically with depth.
fn he<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
fn xavier<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<F> {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn uniform<F: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}

/// Parameters of the full network; also the layout index used by forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F: Scalar = f64> {
    pub config: NetworkConfig,
    pub graph: SkeletonGraph,
    pub params: ParamStore<F>,
    pub layout: Layout,
    adjacency: Vec<Tensor<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn init<R: Rng>(config: NetworkConfig, graph: SkeletonGraph, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let adjacency = MultiScaleAdjacency::normalized(&graph, config.scales, config.adjacency_mode)?.cast();
        let mut p = ParamStore::default();
        let conv = |p: &mut ParamStore<F>, name: String, co: usize, ci: usize, kt: usize, kn: usize, rng: &mut R| {
            let shape = [co, ci, kt, kn];
            let kernel = if name.ends_with(".temporal") {
                he(&shape, ci * kt * kn, rng)
            } else {
                xavier(&shape, ci * kt * kn, co * kt * kn, rng)
            };
            let kernel = p.push(format!("{name}.kernel"), kernel);
            let bias = p.push(format!("{name}.bias"), Tensor::zeros(&[co, 1, 1]));
            ConvIdx { kernel, bias }
        };
        let (bt, bn) = config.beta_kernel;
        let (bc, d, k_scales) = (config.beta_channels, config.alpha_width, config.scales);
        let mut modules = Vec::with_capacity(NUM_MODULES);
        for l in 0..NUM_MODULES {
            let (ci, co) = (config.module_in(l), config.channels[l]);
            let m = format!("m{}", l + 1);
            let w = (0..k_scales)
                .map(|k| p.push(format!("{m}.w{}", k + 1), he(&[co, ci], ci * k_scales, rng)))
                .collect();
            let beta = [
                conv(&mut p, format!("{m}.beta1"), bc, ci, bt, bn, rng),
                conv(&mut p, format!("{m}.beta2"), bc, bc, bt, bn, rng),
                conv(&mut p, format!("{m}.beta3"), 1, bc, bt, bn, rng),
            ];
            let alpha_temporal = conv(&mut p, format!("{m}.alpha_t"), d, 1, config.alpha_kernel, 1, rng);
            let mut alpha_u = Vec::with_capacity(k_scales);
            let mut alpha_v = Vec::with_capacity(k_scales);
            for k in 0..k_scales {
                alpha_u.push(conv(&mut p, format!("{m}.alpha_u{}", k + 1), d, d, 1, 1, rng));
                alpha_v.push(conv(&mut p, format!("{m}.alpha_v{}", k + 1), d, d, 1, 1, rng));
            }
            let temporal = conv(&mut p, format!("{m}.temporal"), co, co, config.temporal_kernel, 1, rng);
            modules.push(ModuleLayout {
                w,
                beta,
                alpha_temporal,
                alpha_u,
                alpha_v,
                temporal,
            });
        }
        let c_last = config.channels[NUM_MODULES - 1];
        let head_weight = p.push("head.weight", xavier(&[config.classes, c_last], c_last, config.classes, rng));
        let head_bias = p.push("head.bias", Tensor::zeros(&[1, config.classes]));
        Ok(Model {
            config,
            graph,
            params: p,
            layout: Layout {
                modules,
                head_weight,
                head_bias,
            },
            adjacency,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: NetworkConfig, graph: SkeletonGraph, params: ParamStore<F>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(config, graph, &mut rng)?;
        if model.params.names() != params.names() {
            return Err(StfError::Checkpoint("parameter names do not match the network config".into()));
        }
        for (i, t) in params.tensors.iter().enumerate() {
            if t.shape() != model.params.get(i).shape() {
                return Err(StfError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    params.names[i],
                    t.shape(),
                    model.params.get(i).shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn adjacency(&self) -> &[Tensor<F>] {
        &self.adjacency
    }

    /// Replaces the classifier with a fresh head of `classes` outputs.
    pub fn replace_head<R: Rng>(&mut self, classes: usize, rng: &mut R) -> Result<()> {
        if classes < 2 {
            return Err(StfError::InvalidArgument("new head needs at least 2 classes".into()));
        }
        let c_last = self.config.channels[NUM_MODULES - 1];
        *self.params.get_mut(self.layout.head_weight) = xavier(&[classes, c_last], c_last, classes, rng);
        *self.params.get_mut(self.layout.head_bias) = Tensor::zeros(&[1, classes]);
        self.config.classes = classes;
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            graph: self.graph.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            adjacency: self.adjacency.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records parameters and adjacency on `tape`. Parameters for which
    /// `trainable` returns false are recorded as constants.
    pub fn bind_with(&self, tape: &mut Tape<F>, trainable: impl Fn(usize) -> bool) -> Bound {
        let params = self
            .params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable(i) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let adjacency = self.adjacency.iter().map(|a| tape.constant(a.clone())).collect();
        Bound { params, adjacency }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Runs the six modules and the head on an input already on the tape.
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, input: Var) -> Result<ForwardTrace> {
        let s = tape.shape(input);
        if s.len() != 3 || s[0] != self.config.in_channels || s[2] != self.graph.num_joints() {
            return Err(StfError::shape(
                "forward input",
                s,
                &[self.config.in_channels, 0, self.graph.num_joints()],
            ));
        }
        let mut trace = ForwardTrace::default();
        let mut x = input;
        if self.config.center_input {
            let (c, n) = (s[0], s[2]);
            let mean = tape.reduce(input, &[1], ReduceKind::Mean)?;
            let mean = tape.reshape(mean, &[c, 1, n])?;
            x = tape.sub(input, mean)?;
        }
        for (l, m) in self.layout.modules.iter().enumerate() {
            trace.module_inputs.push(x);
            let beta = beta_embed(tape, x, &m.beta.map(|c| bound.conv(c)))?;
            let desc = alpha_descriptors(tape, beta, bound.conv(m.alpha_temporal))?;
            let mut gs = Vec::with_capacity(self.config.scales);
            for k in 0..self.config.scales {
                gs.push(alpha_generate(tape, desc, bound.conv(m.alpha_u[k]), bound.conv(m.alpha_v[k]))?);
            }
            let w: Vec<Var> = m.w.iter().map(|&i| bound.params[i]).collect();
            let spatial = stf_spatial_conv(tape, x, &bound.adjacency, &gs, &w)?;
            x = temporal_unit(tape, spatial, bound.conv(m.temporal), self.config.strides[l])?;
            trace.betas.push(beta);
            trace.generated.push(gs);
            trace.module_outputs.push(x);
        }
        let c_last = tape.shape(x)[0];
        let pooled = tape.reduce(x, &[1, 2], ReduceKind::Mean)?;
        let pooled = tape.reshape(pooled, &[c_last, 1])?;
        let logits = tape.matmul(bound.params[self.layout.head_weight], pooled)?;
        let logits = tape.reshape(logits, &[1, self.config.classes])?;
        let logits = tape.add(logits, bound.params[self.layout.head_bias])?;
        let probs = tape.softmax(logits)?;
        trace.input = Some(input);
        trace.logits = Some(logits);
        trace.probs = Some(probs);
        Ok(trace)
    }

    /// β of module `module` (1-based) applied to `x`, which need not be the
    /// input the forward pass used.
    pub fn beta(&self, tape: &mut Tape<F>, bound: &Bound, module: usize, x: Var) -> Result<Var> {
        let m = self
            .layout
            .modules
            .get(module.wrapping_sub(1))
            .ok_or_else(|| StfError::InvalidArgument(format!("no module {module}")))?;
        beta_embed(tape, x, &m.beta.map(|c| bound.conv(c)))
    }

    /// Records `input` as a constant and runs [`Model::forward`].
    pub fn forward_tensor(&self, tape: &mut Tape<F>, bound: &Bound, input: &Tensor<F>) -> Result<ForwardTrace> {
        let x = tape.constant(input.clone());
        self.forward(tape, bound, x)
    }

    /// Class probabilities for one input, without keeping the tape.
    pub fn predict(&self, input: &Tensor<F>) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let bound = self.bind_with(&mut tape, |_| false);
        let trace = self.forward_tensor(&mut tape, &bound, input)?;
        Ok(tape.value(trace.probs()).data().to_vec())
    }
}

/// Parameter and adjacency handles of a model recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: Vec<Var>,
    pub adjacency: Vec<Var>,
}

impl Bound {
    pub fn conv(&self, c: ConvIdx) -> (Var, Var) {
        (self.params[c.kernel], self.params[c.bias])
    }
}

/// Handles to everything a forward pass produced.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub input: Option<Var>,
    /// Input feature map of each module.
    pub module_inputs: Vec<Var>,
    /// Output feature map X^l of each module (after the temporal unit).
    pub module_outputs: Vec<Var>,
    /// β embedding (T_l×N) of each module.
    pub betas: Vec<Var>,
    /// Generated adjacency G_k of each module and scale.
    pub generated: Vec<Vec<Var>>,
    pub logits: Option<Var>,
    pub probs: Option<Var>,
}

impl ForwardTrace {
    pub fn probs(&self) -> Var {
        self.probs.expect("forward completed")
    }

    pub fn logits(&self) -> Var {
        self.logits.expect("forward completed")
    }

    pub fn predicted<F: Scalar>(&self, tape: &Tape<F>) -> usize {
        argmax(tape.value(self.probs()).data())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<F: PartialOrd + Copy>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn conv_bias<F: Scalar>(tape: &mut Tape<F>, x: Var, (kernel, bias): (Var, Var), stride: usize) -> Result<Var> {
    let y = tape.conv_tn(x, kernel, stride)?;
    tape.add(y, bias)
}

/// Three convolutions (ReLU between) ending in one channel, squashed by a
/// logistic unit into a T×N map in (0, 1).
pub fn beta_embed<F: Scalar>(tape: &mut Tape<F>, x: Var, convs: &[(Var, Var); 3]) -> Result<Var> {
    let h = conv_bias(tape, x, convs[0], 1)?;
    let h = tape.relu(h);
    let h = conv_bias(tape, h, convs[1], 1)?;
    let h = tape.relu(h);
    let h = conv_bias(tape, h, convs[2], 1)?;
    let e = tape.sigmoid(h);
    let s = tape.shape(e).to_vec();
    tape.reshape(e, &[s[1], s[2]])
}

/// First α layer: temporal convolution of the T×N embedding to d channels,
/// averaged over time into d×1×N descriptors. Shared by all scales.
pub fn alpha_descriptors<F: Scalar>(tape: &mut Tape<F>, embedding: Var, conv: (Var, Var)) -> Result<Var> {
    let s = tape.shape(embedding).to_vec();
    if s.len() != 2 {
        return Err(StfError::InvalidArgument(format!("α expects a T×N map, got {s:?}")));
    }
    let e = tape.reshape(embedding, &[1, s[0], s[1]])?;
    let h = conv_bias(tape, e, conv, 1)?;
    let d = tape.shape(h)[0];
    let m = tape.reduce(h, &[1], ReduceKind::Mean)?;
    tape.reshape(m, &[d, 1, s[1]])
}

/// Second α layer for one scale: pointwise banks U, V (d×N each) and
/// G = tanh(UᵀV / √d), an N×N matrix with entries in (−1, 1).
pub fn alpha_generate<F: Scalar>(tape: &mut Tape<F>, descriptors: Var, u: (Var, Var), v: (Var, Var)) -> Result<Var> {
    let s = tape.shape(descriptors).to_vec();
    let (d, n) = (s[0], s[2]);
    let ub = conv_bias(tape, descriptors, u, 1)?;
    let vb = conv_bias(tape, descriptors, v, 1)?;
    let ub = tape.reshape(ub, &[d, n])?;
    let vb = tape.reshape(vb, &[d, n])?;
    pair_banks(tape, ub, vb)
}

/// tanh(UᵀV / √d) for d×N banks.
pub fn pair_banks<F: Scalar>(tape: &mut Tape<F>, u: Var, v: Var) -> Result<Var> {
    let d = tape.shape(u)[0];
    let ut = tape.transpose(u)?;
    let g = tape.matmul(ut, v)?;
    let g = tape.scale(g, F::of(1.0 / (d as f64).sqrt()));
    Ok(tape.tanh(g))
}

/// `ReLU(Σ_k W_k · X · (A_k + G_k))` applied per frame. `x` is C_in×T×N,
/// each `W_k` is C_out×C_in, each `A_k`, `G_k` is N×N.
pub fn stf_spatial_conv<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    adjacency: &[Var],
    generated: &[Var],
    weights: &[Var],
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (ci, t, n) = (s[0], s[1], s[2]);
    if adjacency.len() != weights.len() || generated.len() != weights.len() || weights.is_empty() {
        return Err(StfError::InvalidArgument("one W, A and G per scale".into()));
    }
    let mut acc: Option<Var> = None;
    for k in 0..weights.len() {
        let a = tape.shape(adjacency[k]);
        if a != [n, n] {
            return Err(StfError::shape("stf_spatial_conv adjacency", a, &[n, n]));
        }
        let mix = tape.add(adjacency[k], generated[k])?;
        let rows = tape.reshape(x, &[ci * t, n])?;
        let agg = tape.matmul(rows, mix)?;
        let agg = tape.reshape(agg, &[ci, t * n])?;
        let y = tape.matmul(weights[k], agg)?;
        acc = Some(match acc {
            None => y,
            Some(prev) => tape.add(prev, y)?,
        });
    }
    let y = acc.expect("at least one scale");
    let co = tape.shape(y)[0];
    let y = tape.reshape(y, &[co, t, n])?;
    Ok(tape.relu(y))
}

/// Per-joint temporal convolution plus bias and ReLU.
pub fn temporal_unit<F: Scalar>(tape: &mut Tape<F>, x: Var, conv: (Var, Var), stride: usize) -> Result<Var> {
    let ks = tape.shape(conv.0);
    if ks.len() != 4 || ks[3] != 1 {
        return Err(StfError::InvalidArgument(format!("temporal kernel must be C×C×k×1, got {ks:?}")));
    }
    let y = conv_bias(tape, x, conv, stride)?;
    Ok(tape.relu(y))
}
