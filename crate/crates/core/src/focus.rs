//! Gradient-derived spatio-temporal focus.
//!
//! For module `l` and class `y`, the channel weights are the mean gradient of
//! the post-softmax probability of `y` over the module's T×N plane; the focus
//! is the min-max normalized, rectified channel-weighted sum of the feature map.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{ReduceKind, Tape, Var};
use crate::error::{Result, StfError};
use crate::network::ForwardTrace;
use crate::tensor::{Scalar, Tensor};

/// A T×N map in [0, 1] taken at one module for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusMap {
    pub values: Tensor,
    /// 1-based module index; 0 marks a map at input resolution.
    pub module: usize,
    pub class: usize,
}

impl FocusMap {
    pub fn new(values: Tensor, module: usize, class: usize) -> Result<Self> {
        if values.rank() != 2 {
            return Err(StfError::InvalidArgument(format!("focus map must be T×N, got {:?}", values.shape())));
        }
        Ok(FocusMap { values, module, class })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.values.shape()[1]
    }

    /// All-zero maps come from constant (uninformative) raw maps.
    pub fn is_degenerate(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }

    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.values.data().iter().map(|&v| v >= threshold).collect()
    }

    /// Intersection over union of the binarized map and a 0/1 mask of the
    /// same T×N layout. Two empty sets count as a perfect match.
    pub fn iou(&self, mask: &[f64], threshold: f64) -> Result<f64> {
        if mask.len() != self.values.len() {
            return Err(StfError::shape("focus iou", self.values.shape(), &[mask.len()]));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (q, &m) in self.binarize(threshold).into_iter().zip(mask) {
            let m = m > 0.5;
            inter += (q && m) as usize;
            union += (q || m) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// T rows of N comma-separated values.
    pub fn to_csv(&self) -> String {
        let n = self.joints();
        let mut s = String::new();
        for row in self.values.data().chunks(n) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Grayscale heatmap, time along x and joints along y; white is 1.
    pub fn to_svg(&self, cell: usize) -> String {
        let (t, n) = (self.frames(), self.joints());
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" shape-rendering=\"crispEdges\">\n",
            t * cell,
            n * cell
        );
        for ti in 0..t {
            for v in 0..n {
                let g = (self.values.at(&[ti, v]).clamp(0.0, 1.0) * 255.0).round() as u8;
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({g},{g},{g})\"/>",
                    ti * cell,
                    v * cell
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| StfError::io(path, e))
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_svg(12)).map_err(|e| StfError::io(path, e))
    }
}

fn module_output(trace: &ForwardTrace, module: usize) -> Result<Var> {
    if module == 0 || module > trace.module_outputs.len() {
        return Err(StfError::InvalidArgument(format!(
            "module {module} has no cached features (trace has {})",
            trace.module_outputs.len()
        )));
    }
    Ok(trace.module_outputs[module - 1])
}

/// Channel weights w_c: the gradient of the class-`class` probability with
/// respect to X^l averaged over the T×N plane, shaped C×1×1.
pub fn channel_weights<F: Scalar>(tape: &Tape<F>, trace: &ForwardTrace, module: usize, class: usize) -> Result<Tensor<F>> {
    let x = module_output(trace, module)?;
    let probs = trace.probs();
    let classes = tape.value(probs).len();
    if class >= classes {
        return Err(StfError::TargetOutOfRange { index: class, classes });
    }
    if !tape.requires_grad(x) {
        return Err(StfError::InvalidArgument(format!(
            "module {module} features are not gradient-tracked; record the input as a leaf"
        )));
    }
    let s = tape.shape(x).to_vec();
    let (c, plane) = (s[0], s[1] * s[2]);
    let grad = tape.gradient_seeded(probs, class, x)?;
    let z = F::of(plane as f64);
    let w: Vec<F> = grad.data().chunks(plane).map(|ch| ch.iter().copied().sum::<F>() / z).collect();
    Tensor::new(vec![c, 1, 1], w)
}

/// Records Q for (`module`, `class`) on the tape. The channel weights enter as
/// constants; the feature map stays differentiable.
pub fn grad_cam_var<F: Scalar>(
    tape: &mut Tape<F>,
    trace: &ForwardTrace,
    module: usize,
    class: usize,
) -> Result<(Var, FocusMap)> {
    let w = channel_weights(tape, trace, module, class)?;
    let x = module_output(trace, module)?;
    let weighted = tape.mask(x, &w)?;
    let summed = tape.reduce(weighted, &[0], ReduceKind::Sum)?;
    let raw = tape.relu(summed);
    let q = tape.minmax_normalize(raw);
    let map = FocusMap::new(tape.value(q).cast(), module, class)?;
    Ok((q, map))
}

pub fn grad_cam<F: Scalar>(tape: &mut Tape<F>, trace: &ForwardTrace, module: usize, class: usize) -> Result<FocusMap> {
    grad_cam_var(tape, trace, module, class).map(|(_, m)| m)
}

/// The `k` most probable classes, descending; lower index first on ties.
pub fn top_classes<F: Scalar>(probs: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Focus maps of the `k` most probable classes, descending.
pub fn focus_topk<F: Scalar>(tape: &mut Tape<F>, trace: &ForwardTrace, module: usize, k: usize) -> Result<Vec<FocusMap>> {
    let probs = tape.value(trace.probs()).data().to_vec();
    if probs.len() < k {
        return Err(StfError::InvalidArgument(format!("top-{k} focus needs at least {k} classes")));
    }
    top_classes(&probs, k)
        .into_iter()
        .map(|c| grad_cam(tape, trace, module, c))
        .collect()
}

/// Endpoint-aligned linear interpolation from `t_src` to `t_target` frames,
/// as a `t_target × t_src` matrix with rows summing to 1.
pub fn projection_matrix(t_src: usize, t_target: usize) -> Tensor {
    let mut p = Tensor::zeros(&[t_target, t_src]);
    for i in 0..t_target {
        let pos = if t_target == 1 || t_src == 1 {
            (t_src as f64 - 1.0) / 2.0
        } else {
            i as f64 * (t_src - 1) as f64 / (t_target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t_src - 1);
        let hi = (lo + 1).min(t_src - 1);
        let frac = pos - lo as f64;
        if hi == lo || frac == 0.0 {
            p.set(&[i, lo], 1.0);
        } else {
            p.set(&[i, lo], 1.0 - frac);
            p.set(&[i, hi], frac);
        }
    }
    p
}

/// Resamples a focus map along time; identity when the resolution matches.
pub fn project_focus(q: &FocusMap, t_target: usize) -> Result<FocusMap> {
    if t_target == 0 {
        return Err(StfError::InvalidArgument("projection target must have at least one frame".into()));
    }
    if t_target == q.frames() {
        return Ok(q.clone());
    }
    let p = projection_matrix(q.frames(), t_target);
    let n = q.joints();
    let mut out: Tensor = Tensor::zeros(&[t_target, n]);
    for i in 0..t_target {
        for s in 0..q.frames() {
            let w = p.at(&[i, s]);
            if w != 0.0 {
                for v in 0..n {
                    let cur = out.at(&[i, v]);
                    out.set(&[i, v], cur + w * q.values.at(&[s, v]));
                }
            }
        }
    }
    let out = out.map(|v| v.clamp(0.0, 1.0));
    FocusMap::new(out, q.module, q.class)
}

/// Differentiable projection of a recorded T×N map.
pub fn project_var<F: Scalar>(tape: &mut Tape<F>, q: Var, t_target: usize) -> Result<Var> {
    let t_src = tape.shape(q)[0];
    if t_src == t_target {
        return Ok(q);
    }
    let p = tape.constant(projection_matrix(t_src, t_target).cast());
    tape.matmul(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[f64]]) -> FocusMap {
        let n = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FocusMap::new(Tensor::from_f64(vec![rows.len(), n], &data).unwrap(), 6, 0).unwrap()
    }

    #[test]
    fn midpoint_projection() {
        let q = map(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let p = project_focus(&q, 3).unwrap();
        assert_eq!(p.values.data(), &[0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn same_resolution_is_identity() {
        let q = map(&[&[0.1, 0.9], &[0.3, 0.2], &[1.0, 0.0]]);
        assert_eq!(project_focus(&q, 3).unwrap(), q);
    }

    #[test]
    fn top_classes_order_and_ties() {
        assert_eq!(top_classes(&[0.7, 0.2, 0.1], 2), vec![0, 1]);
        assert_eq!(top_classes(&[0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(top_classes(&[0.1, 0.45, 0.45], 2), vec![1, 2]);
    }

    #[test]
    fn iou_cases() {
        let q = map(&[&[1.0, 0.0], &[0.6, 0.4]]);
        assert_eq!(q.iou(&[1.0, 0.0, 1.0, 0.0], 0.5).unwrap(), 1.0);
        assert_eq!(q.iou(&[0.0, 1.0, 0.0, 1.0], 0.5).unwrap(), 0.0);
        assert!((q.iou(&[1.0, 1.0, 0.0, 0.0], 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_and_svg_shapes() {
        let q = map(&[&[1.0, 0.0], &[0.5, 0.25]]);
        assert_eq!(q.to_csv(), "1.000000,0.000000\n0.500000,0.250000\n");
        let svg = q.to_svg(10);
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("rgb(255,255,255)") && svg.contains("rgb(128,128,128)"));
    }
}
