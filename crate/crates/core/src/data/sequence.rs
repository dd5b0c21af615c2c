//! Skeleton sequences: preprocessing, padding, bone streams, and the native
//! `STFSEQ v1` text format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, StfError};
use crate::graph::SkeletonGraph;
use crate::tensor::Tensor;

/// A C×T×N array whose last channel is joint visibility in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub data: Tensor,
    pub label: usize,
    pub subject_id: Option<u32>,
    pub view_id: Option<u32>,
    pub source_id: String,
}

impl SkeletonSequence {
    pub fn new(data: Tensor, label: usize) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] < 2 {
            return Err(StfError::InvalidArgument(format!(
                "sequence needs shape C×T×N with C >= 2, got {:?}",
                data.shape()
            )));
        }
        Ok(SkeletonSequence {
            data,
            label,
            subject_id: None,
            view_id: None,
            source_id: String::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[2]
    }

    /// Number of coordinate channels (everything but visibility).
    pub fn coord_channels(&self) -> usize {
        self.channels() - 1
    }

    pub fn visibility(&self, t: usize, v: usize) -> f64 {
        self.data.at(&[self.channels() - 1, t, v])
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source_id = source.into();
        self
    }
}

/// Which joint is subtracted and which pair defines body height.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub center_joint: usize,
    pub height_pair: (usize, usize),
}

impl Default for PreprocessConfig {
    /// Spine base and (spine base, head) of the bundled skeleton.
    fn default() -> Self {
        PreprocessConfig {
            center_joint: 0,
            height_pair: (0, 1),
        }
    }
}

/// Centers every frame on the center joint, divides by mean body height, and
/// appends a visibility channel of ones.
pub fn preprocess(raw: &Tensor, cfg: &PreprocessConfig) -> Result<SkeletonSequence> {
    let s = raw.shape();
    if s.len() != 3 {
        return Err(StfError::InvalidArgument(format!("raw coordinates need rank 3, got {s:?}")));
    }
    let visibility = Tensor::ones(&[s[1], s[2]]);
    preprocess_with_visibility(raw, &visibility, cfg)
}

/// As [`preprocess`], keeping a given T×N visibility map. Body height is
/// averaged over frames where both height joints are visible; invisible
/// frames keep zero coordinates.
pub fn preprocess_with_visibility(
    raw: &Tensor,
    visibility: &Tensor,
    cfg: &PreprocessConfig,
) -> Result<SkeletonSequence> {
    let s = raw.shape();
    let (c0, t0, n) = (s[0], s[1], s[2]);
    let (ha, hb) = cfg.height_pair;
    if cfg.center_joint >= n || ha >= n || hb >= n {
        return Err(StfError::InvalidArgument(format!(
            "preprocess joints {:?} out of range for {n} joints",
            cfg
        )));
    }
    if visibility.shape() != [t0, n] {
        return Err(StfError::shape("preprocess visibility", visibility.shape(), &[t0, n]));
    }
    let mut height = 0.0;
    let mut counted = 0usize;
    for t in 0..t0 {
        if visibility.at(&[t, ha]) <= 0.0 || visibility.at(&[t, hb]) <= 0.0 {
            continue;
        }
        let d2: f64 = (0..c0)
            .map(|c| (raw.at(&[c, t, ha]) - raw.at(&[c, t, hb])).powi(2))
            .sum();
        height += d2.sqrt();
        counted += 1;
    }
    if counted == 0 || !(height > 0.0) {
        return Err(StfError::DegenerateSequence("body height is zero".into()));
    }
    let height = height / counted as f64;

    let mut out = Tensor::zeros(&[c0 + 1, t0, n]);
    for t in 0..t0 {
        for c in 0..c0 {
            let center = raw.at(&[c, t, cfg.center_joint]);
            for v in 0..n {
                if visibility.at(&[t, v]) > 0.0 {
                    out.set(&[c, t, v], (raw.at(&[c, t, v]) - center) / height);
                }
            }
        }
        for v in 0..n {
            out.set(&[c0, t, v], visibility.at(&[t, v]).clamp(0.0, 1.0));
        }
    }
    SkeletonSequence::new(out, 0)
}

/// Repeats the sequence cyclically up to `target` frames.
pub fn pad_repeat(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    let (c, t0, n) = (seq.channels(), seq.frames(), seq.joints());
    if t0 == 0 {
        return Err(StfError::DegenerateSequence("empty sequence".into()));
    }
    if target < t0 {
        return Err(StfError::InvalidArgument(format!(
            "cannot pad {t0} frames down to {target}"
        )));
    }
    let src = seq.data.data();
    let mut data = Vec::with_capacity(c * target * n);
    for ch in 0..c {
        for t in 0..target {
            let from = (ch * t0 + t % t0) * n;
            data.extend_from_slice(&src[from..from + n]);
        }
    }
    Ok(SkeletonSequence {
        data: Tensor::new(vec![c, target, n], data)?,
        ..seq.clone()
    })
}

/// Per-joint vectors to the parent joint; the root bone is zero and bone
/// visibility is the minimum of its endpoints.
pub fn bone_stream(seq: &SkeletonSequence, graph: &SkeletonGraph) -> Result<SkeletonSequence> {
    let (c, t0, n) = (seq.channels(), seq.frames(), seq.joints());
    if graph.num_joints() != n {
        return Err(StfError::InvalidArgument(format!(
            "graph has {} joints, sequence has {n}",
            graph.num_joints()
        )));
    }
    let mut out = Tensor::zeros(&[c, t0, n]);
    for t in 0..t0 {
        for v in 0..n {
            let p = graph.parent(v);
            for ch in 0..c - 1 {
                let bone = if p == v {
                    0.0
                } else {
                    seq.data.at(&[ch, t, v]) - seq.data.at(&[ch, t, p])
                };
                out.set(&[ch, t, v], bone);
            }
            let vis = seq.visibility(t, v).min(seq.visibility(t, p));
            out.set(&[c - 1, t, v], vis);
        }
    }
    Ok(SkeletonSequence {
        data: out,
        ..seq.clone()
    })
}

const SEQ_MAGIC: &str = "STFSEQ";
const SEQ_VERSION: &str = "v1";

/// Serializes to the native text format. Values use the shortest decimal
/// representation that reads back to the identical float.
pub fn write_sequence_string(seq: &SkeletonSequence) -> String {
    let (c, t, n) = (seq.channels(), seq.frames(), seq.joints());
    let mut s = format!("{SEQ_MAGIC} {SEQ_VERSION} C={c} T={t} N={n} label={}\n", seq.label);
    for row in seq.data.data().chunks(n) {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_sequence(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    std::fs::write(path, write_sequence_string(seq)).map_err(|e| StfError::io(path, e))
}

pub fn parse_sequence_str(text: &str, origin: &str) -> Result<SkeletonSequence> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l)
        .filter(|l| !l.trim().is_empty())
        .ok_or_else(|| StfError::parse(origin, 1, "malformed header: file is empty"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(SEQ_MAGIC) || toks.next() != Some(SEQ_VERSION) {
        return Err(StfError::parse(origin, 1, format!("malformed header `{header}`")));
    }
    let (mut c, mut t, mut n, mut label) = (None, None, None, None);
    for tok in toks {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| StfError::parse(origin, 1, format!("malformed header token `{tok}`")))?;
        let v: usize = v
            .parse()
            .map_err(|_| StfError::parse(origin, 1, format!("malformed header value `{tok}`")))?;
        match k {
            "C" => c = Some(v),
            "T" => t = Some(v),
            "N" => n = Some(v),
            "label" => label = Some(v),
            _ => return Err(StfError::parse(origin, 1, format!("unknown header key `{k}`"))),
        }
    }
    let (Some(c), Some(t), Some(n), Some(label)) = (c, t, n, label) else {
        return Err(StfError::parse(origin, 1, "header needs C, T, N and label"));
    };
    if c < 2 || t == 0 || n == 0 {
        return Err(StfError::parse(origin, 1, "header dimensions must be positive with C >= 2"));
    }
    let mut data = Vec::with_capacity(c * t * n);
    let mut rows = 0;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        if rows == c * t {
            return Err(StfError::parse(origin, lineno, format!("expected {} data rows, found more", c * t)));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| StfError::parse(origin, lineno, format!("non-numeric token `{tok}`")))?;
            data.push(v);
        }
        let got = data.len() - before;
        if got != n {
            return Err(StfError::parse(origin, lineno, format!("expected {n} values, found {got}")));
        }
        rows += 1;
    }
    if rows != c * t {
        return Err(StfError::parse(
            origin,
            text.lines().count() + 1,
            format!("expected {} data rows, found {rows}", c * t),
        ));
    }
    Ok(SkeletonSequence::new(Tensor::new(vec![c, t, n], data)?, label)?.with_source(origin))
}

pub fn parse_sequence_file(path: &Path) -> Result<SkeletonSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| StfError::io(path, e))?;
    parse_sequence_str(&text, &path.display().to_string())
}
