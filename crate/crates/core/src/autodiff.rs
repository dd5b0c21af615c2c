//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in execution order. Handles ([`Var`])
//! index into the tape. Backward replays the recorded operations in reverse,
//! accumulating gradients for every node that requires them.

use std::str::FromStr;

use crate::error::{Result, StfError};
use crate::tensor::{broadcast_index, broadcast_shape, numel, Scalar, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitive kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    /// Multiply by the value of a one-element tensor, held constant.
    Scale,
    /// Multiply by a broadcastable tensor, held constant.
    HadamardMask,
}

impl FromStr for ElementwiseKind {
    type Err = StfError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "relu" => Self::Relu,
            "tanh" => Self::Tanh,
            "sigmoid" => Self::Sigmoid,
            "scale" => Self::Scale,
            "hadamard-mask" => Self::HadamardMask,
            other => return Err(StfError::UnknownOpKind(other.to_string())),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Scale(Var, F),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    Reduce {
        x: Var,
        axes: Vec<usize>,
        kind: ReduceKind,
    },
    Softmax(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Pick(Var, usize),
    MinMax {
        x: Var,
        argmin: usize,
        argmax: usize,
        range: F,
        degenerate: bool,
    },
    Norm(Var),
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Ordered record of primitive operations.
///
/// A tape and its tensors belong to one owner; it is `Send`, so independent
/// tapes can be built on worker threads.
pub struct Tape<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| StfError::InvalidArgument(format!("{kind:?} needs a second operand")))
        };
        match kind {
            ElementwiseKind::Add => self.add(a, need_b(b)?),
            ElementwiseKind::Sub => self.sub(a, need_b(b)?),
            ElementwiseKind::Mul => self.mul(a, need_b(b)?),
            ElementwiseKind::Relu => Ok(self.relu(a)),
            ElementwiseKind::Tanh => Ok(self.tanh(a)),
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseKind::Scale => {
                let b = need_b(b)?;
                if self.value(b).len() != 1 {
                    return Err(StfError::shape("scale", self.shape(a), self.shape(b)));
                }
                let s = self.value(b).item();
                Ok(self.scale(a, s))
            }
            ElementwiseKind::HadamardMask => {
                let mask = self.value(need_b(b)?).clone();
                self.mask(a, &mask)
            }
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| StfError::shape(name, sa, sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<F> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(sa, &out);
            let ib = broadcast_index(sb, &out);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((Tensor::new(out, data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant, broadcastable mask.
    pub fn mask(&mut self, a: Var, mask: &Tensor<F>) -> Result<Var> {
        let m = self.constant(mask.clone());
        self.mul(a, m)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, rg, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(StfError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(StfError::InvalidArgument(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let t = Tensor::new(vec![c, r], transpose(self.value(a).data(), r, c))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    // ---- convolution ------------------------------------------------------

    /// Cross-correlation of `x` (C_in×T×N) with `kernel` (C_out×C_in×k_t×k_n)
    /// over the (T, N) plane, zero "same" padding, stride along T only.
    pub fn conv_tn(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(StfError::shape("conv_tn", sx, sk));
        }
        if stride == 0 {
            return Err(StfError::InvalidArgument("conv stride must be positive".into()));
        }
        let geo = ConvGeometry::new(sx, sk, stride)?;
        let mut out = vec![F::zero(); geo.c_out * geo.t_out * geo.n];
        conv_forward(&geo, self.value(x).data(), self.value(kernel).data(), &mut out);
        let t = Tensor::new(vec![geo.c_out, geo.t_out, geo.n], out)?;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(t, rg, Op::Conv { x, kernel, stride }))
    }

    // ---- reductions -------------------------------------------------------

    pub fn reduce(&mut self, x: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(StfError::InvalidArgument(format!(
                "invalid reduction axes {axes:?} for shape {shape:?}"
            )));
        }
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let map = broadcast_index(&kept, &shape);
        let mut out = vec![F::zero(); numel(&kept)];
        for (&dst, &v) in map.iter().zip(self.value(x).data()) {
            out[dst] = out[dst] + v;
        }
        if kind == ReduceKind::Mean {
            let z = F::of((numel(&shape) / numel(&kept)) as f64);
            out.iter_mut().for_each(|v| *v = *v / z);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Reduce { x, axes, kind }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, ReduceKind::Sum)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, ReduceKind::Mean)
    }

    /// Frobenius norm; the gradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|&a| a * a).sum::<F>().sqrt();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), rg, Op::Norm(x))
    }

    /// Element `index` (flat) as a one-element tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(StfError::InvalidArgument(format!("pick index {index} out of {n}")));
        }
        let v = self.value(x).data()[index];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), rg, Op::Pick(x, index)))
    }

    // ---- classification ---------------------------------------------------

    /// Row-wise softmax over a batch×classes matrix.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(StfError::InvalidArgument(format!("softmax needs rank 2, got {s:?}")));
        }
        let probs = softmax_rows(self.value(logits).data(), s[1]);
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::new(s, probs)?, rg, Op::Softmax(logits)))
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    /// Returns the scalar loss and the (constant) probability matrix.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Tensor<F>)> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(StfError::shape("softmax_xent", &s, &[targets.len()]));
        }
        let classes = s[1];
        if classes < 2 {
            return Err(StfError::InvalidArgument("softmax_xent needs at least 2 classes".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(StfError::TargetOutOfRange { index: bad, classes });
        }
        let z = self.value(logits).data();
        let probs = softmax_rows(z, classes);
        let mut loss = F::zero();
        for (row, &t) in targets.iter().enumerate() {
            // log p_t = z_t - max - log Σ exp(z - max), computed without forming p_t
            let r = &z[row * classes..(row + 1) * classes];
            let m = r.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = r.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            loss = loss - (r[t] - m - lse);
        }
        loss = loss / F::of(targets.len() as f64);
        let rg = self.rg(&[logits]);
        let probs_t = Tensor::new(s, probs.clone())?;
        let v = self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        );
        Ok((v, probs_t))
    }

    /// Min-max normalization into [0, 1]; a constant input maps to zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Var {
        let (t, argmin, argmax, range, degenerate) = minmax(self.value(x));
        let rg = self.rg(&[x]);
        self.push(
            t,
            rg,
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
                degenerate,
            },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(root)/d(node) into every node that requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_until(root, Var(0))
    }

    /// Like [`Tape::backward`] but stops propagating below `floor`: nodes
    /// recorded before `floor` receive no gradient. Used to read the gradient
    /// of an intermediate feature map without paying for the full replay.
    pub fn backward_until(&mut self, root: Var, floor: Var) -> Result<()> {
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(StfError::NonScalarRoot(rs.to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![F::one()]);
        for i in (floor.0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a = *a + *b),
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    /// d(root)/d(wrt) in a scratch buffer; stored gradients are untouched and
    /// the replay stops at `wrt`. Zero when `wrt` does not influence `root`.
    pub fn gradient(&self, root: Var, wrt: Var) -> Result<Tensor<F>> {
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(StfError::NonScalarRoot(rs.to_vec()));
        }
        self.gradient_seeded(root, 0, wrt)
    }

    /// Like [`Tape::gradient`] for the single entry `index` of a non-scalar root.
    pub fn gradient_seeded(&self, root: Var, index: usize, wrt: Var) -> Result<Tensor<F>> {
        let n = self.value(root).len();
        if index >= n {
            return Err(StfError::InvalidArgument(format!("seed index {index} out of {n}")));
        }
        let zero = || Tensor::zeros(self.shape(wrt));
        if wrt.0 > root.0 || !self.needs(root) || !self.needs(wrt) {
            return Ok(zero());
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root.0 + 1];
        let mut seed = vec![F::zero(); n];
        seed[index] = F::one();
        grads[root.0] = Some(seed);
        for i in (wrt.0 + 1..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        match grads[wrt.0].take() {
            Some(g) => Tensor::new(self.shape(wrt).to_vec(), g),
            None => Ok(zero()),
        }
    }

    /// Sign pattern of every ReLU input plus min/max positions of every
    /// min-max normalization. Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    let mut word = 0u64;
                    for (i, &v) in self.nodes[a.0].value.data().iter().enumerate() {
                        if v > F::zero() {
                            word |= 1 << (i % 64);
                        }
                        if i % 64 == 63 {
                            sig.push(word);
                            word = 0;
                        }
                    }
                    sig.push(word);
                }
                Op::MinMax {
                    argmin,
                    argmax,
                    degenerate,
                    ..
                } => {
                    sig.push(*argmin as u64);
                    sig.push(*argmax as u64);
                    sig.push(*degenerate as u64);
                }
                _ => {}
            }
        }
        sig
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(*a, out_shape, g, grads, |_, g| g);
                self.accumulate_broadcast(*b, out_shape, g, grads, |_, g| g);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(*a, out_shape, g, grads, |_, g| g);
                self.accumulate_broadcast(*b, out_shape, g, grads, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let vb = self.value(b);
                    let ib = broadcast_index(vb.shape(), out_shape);
                    let vb = vb.data();
                    self.accumulate_broadcast(a, out_shape, g, grads, |k, g| g * vb[ib[k]]);
                }
                if self.needs(b) {
                    let va = self.value(a);
                    let ia = broadcast_index(va.shape(), out_shape);
                    let va = va.data();
                    self.accumulate_broadcast(b, out_shape, g, grads, |k, g| g * va[ia[k]]);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(*a, grads, |k| if x[k] > F::zero() { g[k] } else { F::zero() });
            }
            Op::Tanh(a) => self.accumulate(*a, grads, |k| g[k] * (F::one() - y[k] * y[k])),
            Op::Sigmoid(a) => self.accumulate(*a, grads, |k| g[k] * y[k] * (F::one() - y[k])),
            Op::Scale(a, s) => self.accumulate(*a, grads, |k| g[k] * *s),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, kk, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![F::zero(); m * kk];
                    gemm_nt(g, self.value(b).data(), &mut da, m, n, kk);
                    self.accumulate(a, grads, |k| da[k]);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![F::zero(); kk * n];
                    gemm_tn(self.value(a).data(), g, &mut db, m, kk, n);
                    self.accumulate(b, grads, |k| db[k]);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let gt = transpose(g, s[1], s[0]);
                self.accumulate(*a, grads, |k| gt[k]);
            }
            Op::Reshape(a) => self.accumulate(*a, grads, |k| g[k]),
            Op::Conv { x, kernel, stride } => {
                let (x, kernel) = (*x, *kernel);
                let geo = ConvGeometry::new(self.shape(x), self.shape(kernel), *stride)
                    .expect("validated in forward");
                if self.needs(x) {
                    let mut gx = vec![F::zero(); self.value(x).len()];
                    conv_backward_input(&geo, g, self.value(kernel).data(), &mut gx);
                    self.accumulate(x, grads, |k| gx[k]);
                }
                if self.needs(kernel) {
                    let mut gk = vec![F::zero(); self.value(kernel).len()];
                    conv_backward_kernel(&geo, g, self.value(x).data(), &mut gk);
                    self.accumulate(kernel, grads, |k| gk[k]);
                }
            }
            Op::Reduce { x, axes, kind } => {
                let shape = self.shape(*x);
                let kept: Vec<usize> = shape
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                    .collect();
                let map = broadcast_index(&kept, shape);
                let z = match kind {
                    ReduceKind::Sum => F::one(),
                    ReduceKind::Mean => F::of((numel(shape) / numel(&kept)) as f64),
                };
                self.accumulate(*x, grads, |k| g[map[k]] / z);
            }
            Op::Softmax(a) => {
                let classes = out_shape[1];
                let mut dx = vec![F::zero(); y.len()];
                for (r, row) in y.chunks(classes).enumerate() {
                    let gr = &g[r * classes..(r + 1) * classes];
                    let dot: F = row.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..classes {
                        dx[r * classes + c] = row[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(*a, grads, |k| dx[k]);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / F::of(targets.len() as f64);
                self.accumulate(*logits, grads, |k| {
                    let (r, c) = (k / classes, k % classes);
                    let onehot = if targets[r] == c { F::one() } else { F::zero() };
                    (probs[k] - onehot) * scale
                });
            }
            Op::Pick(a, index) => {
                self.accumulate(*a, grads, |k| if k == *index { g[0] } else { F::zero() })
            }
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
                degenerate,
            } => {
                if *degenerate {
                    return;
                }
                let r = *range;
                let to_min: F = g.iter().zip(y).map(|(&gi, &yi)| gi * (yi - F::one())).sum::<F>() / r;
                let to_max: F = -g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum::<F>() / r;
                self.accumulate(*x, grads, |k| {
                    let mut d = g[k] / r;
                    if k == *argmin {
                        d = d + to_min;
                    }
                    if k == *argmax {
                        d = d + to_max;
                    }
                    d
                });
            }
            Op::Norm(a) => {
                let norm = y[0];
                if norm > F::zero() {
                    let x = self.value(*a).data();
                    let s = g[0] / norm;
                    self.accumulate(*a, grads, |k| x[k] * s);
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Vec<F>>], f: impl Fn(usize) -> F) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        for (k, s) in slot.iter_mut().enumerate() {
            *s = *s + f(k);
        }
    }

    /// Sums an output-shaped gradient back onto a (possibly broadcast) input.
    /// `f` receives the flat output position and the upstream gradient there.
    fn accumulate_broadcast(
        &self,
        v: Var,
        out_shape: &[usize],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        f: impl Fn(usize, F) -> F,
    ) {
        if !self.needs(v) {
            return;
        }
        let src = self.shape(v);
        let n = numel(src);
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        if src == out_shape {
            for (k, s) in slot.iter_mut().enumerate() {
                *s = *s + f(k, g[k]);
            }
        } else {
            let map = broadcast_index(src, out_shape);
            for (k, &dst) in map.iter().enumerate() {
                slot[dst] = slot[dst] + f(k, g[k]);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_rows<F: Scalar>(z: &[F], classes: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(classes) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let e: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: F = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Min-max normalization of a tensor value. Returns the normalized tensor,
/// the positions of the minimum and maximum (lowest index on ties), the range,
/// and whether the input was constant.
pub(crate) fn minmax<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, usize, usize, F, bool) {
    let d = x.data();
    let (mut argmin, mut argmax) = (0, 0);
    for (i, &v) in d.iter().enumerate() {
        if v < d[argmin] {
            argmin = i;
        }
        if v > d[argmax] {
            argmax = i;
        }
    }
    let (lo, hi) = (d[argmin], d[argmax]);
    let range = hi - lo;
    let scale = hi.abs().max(lo.abs());
    let degenerate = !(range > F::epsilon() * scale) || range <= F::zero();
    let t = if degenerate {
        Tensor::zeros(x.shape())
    } else {
        x.map(|v| ((v - lo) / range).max(F::zero()).min(F::one()))
    };
    (t, argmin, argmax, range, degenerate)
}

pub(crate) fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Four independent partial sums so the loop vectorizes.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: F = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out(m×n) += a(m×k) · b(k×n)
pub(crate) fn gemm_nn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out(m×k) += g(m×n) · b(k×n)ᵀ
fn gemm_nt<F: Scalar>(g: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = out[i * k + p] + dot(grow, brow);
        }
    }
}

/// out(k×n) += a(m×k)ᵀ · g(m×n)
fn gemm_tn<F: Scalar>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub n: usize,
    pub kt: usize,
    pub kn: usize,
    pub stride: usize,
    pub pad_t: usize,
    pub pad_n: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self> {
        let (kt, kn) = (k[2], k[3]);
        if kt % 2 == 0 || kn % 2 == 0 {
            return Err(StfError::InvalidArgument(format!(
                "conv kernel extents must be odd, got {kt}x{kn}"
            )));
        }
        let (pad_t, pad_n) = (kt / 2, kn / 2);
        if kt > x[1] + 2 * pad_t || kn > x[2] + 2 * pad_n {
            return Err(StfError::shape("conv_tn (kernel larger than padded input)", x, k));
        }
        Ok(ConvGeometry {
            c_in: x[0],
            c_out: k[0],
            t_in: x[1],
            t_out: x[1].div_ceil(stride),
            n: x[2],
            kt,
            kn,
            stride,
            pad_t,
            pad_n,
        })
    }

    /// Input frame feeding output frame `to` at kernel tap `dt`.
    #[inline]
    fn src_t(&self, to: usize, dt: usize) -> Option<usize> {
        (to * self.stride + dt).checked_sub(self.pad_t).filter(|&t| t < self.t_in)
    }

    /// Output joint range valid for joint tap `dn`, and the input offset.
    #[inline]
    fn joint_span(&self, dn: usize) -> (usize, usize) {
        let lo = self.pad_n.saturating_sub(dn);
        let hi = (self.n + self.pad_n).saturating_sub(dn).min(self.n);
        (lo, hi)
    }
}

/// Unfolds `x` into a (c_in·kt·kn) × (t_out·n) matrix whose row order matches
/// the kernel layout, so a convolution becomes one matrix product.
fn im2col<F: Scalar>(geo: &ConvGeometry, x: &[F]) -> Vec<F> {
    let ConvGeometry { c_in, t_in, t_out, n, kt, kn, pad_n, .. } = *geo;
    let p = t_out * n;
    let mut col = vec![F::zero(); c_in * kt * kn * p];
    for ci in 0..c_in {
        for dt in 0..kt {
            for dn in 0..kn {
                let row = &mut col[((ci * kt + dt) * kn + dn) * p..][..p];
                let (lo, hi) = geo.joint_span(dn);
                for to in 0..t_out {
                    let Some(t) = geo.src_t(to, dt) else { continue };
                    let src = &x[(ci * t_in + t) * n..][..n];
                    row[to * n + lo..to * n + hi].copy_from_slice(&src[lo + dn - pad_n..hi + dn - pad_n]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input layout.
fn col2im<F: Scalar>(geo: &ConvGeometry, col: &[F], gx: &mut [F]) {
    let ConvGeometry { c_in, t_in, t_out, n, kt, kn, pad_n, .. } = *geo;
    let p = t_out * n;
    for ci in 0..c_in {
        for dt in 0..kt {
            for dn in 0..kn {
                let row = &col[((ci * kt + dt) * kn + dn) * p..][..p];
                let (lo, hi) = geo.joint_span(dn);
                for to in 0..t_out {
                    let Some(t) = geo.src_t(to, dt) else { continue };
                    let dst = &mut gx[(ci * t_in + t) * n..][..n];
                    for (d, &v) in dst[lo + dn - pad_n..hi + dn - pad_n].iter_mut().zip(&row[to * n + lo..to * n + hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<F: Scalar>(geo: &ConvGeometry, x: &[F], k: &[F], out: &mut [F]) {
    let r = geo.c_in * geo.kt * geo.kn;
    gemm_nn(k, &im2col(geo, x), out, geo.c_out, r, geo.t_out * geo.n);
}

fn conv_backward_input<F: Scalar>(geo: &ConvGeometry, g: &[F], k: &[F], gx: &mut [F]) {
    let (r, p) = (geo.c_in * geo.kt * geo.kn, geo.t_out * geo.n);
    let mut col = vec![F::zero(); r * p];
    gemm_tn(k, g, &mut col, geo.c_out, r, p);
    col2im(geo, &col, gx);
}

fn conv_backward_kernel<F: Scalar>(geo: &ConvGeometry, g: &[F], x: &[F], gk: &mut [F]) {
    let (r, p) = (geo.c_in * geo.kt * geo.kn, geo.t_out * geo.n);
    gemm_nt(g, &im2col(geo, x), gk, geo.c_out, p, r);
}
