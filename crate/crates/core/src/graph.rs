//! Skeleton graph, hop distances, and the multi-scale adjacency stack.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, StfError};
use crate::tensor::Tensor;

const DEFAULT_SKELETON: &str = include_str!("../assets/skeleton10.graph");

/// Undirected, connected skeleton tree.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    num_joints: usize,
    root: usize,
    edges: Vec<(usize, usize)>,
    parent: Vec<usize>,
    joint_names: Vec<Option<String>>,
}

impl SkeletonGraph {
    /// Builds the graph and derives the parent map by BFS from `root`.
    pub fn build(edges: &[(usize, usize)], num_joints: usize, root: usize) -> Result<Self> {
        if num_joints == 0 {
            return Err(StfError::Graph("graph needs at least one joint".into()));
        }
        if root >= num_joints {
            return Err(StfError::Graph(format!("root {root} out of range for {num_joints} joints")));
        }
        if edges.is_empty() && num_joints > 1 {
            return Err(StfError::Graph("edge list is empty".into()));
        }
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= num_joints || b >= num_joints {
                return Err(StfError::Graph(format!("edge ({a},{b}) out of range for {num_joints} joints")));
            }
            if a == b {
                return Err(StfError::Graph(format!("self-edge at joint {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(StfError::Graph(format!("duplicate edge ({a},{b})")));
            }
            normalized.push(key);
        }
        let adj = adjacency_lists(num_joints, &normalized);
        let mut parent = vec![usize::MAX; num_joints];
        parent[root] = root;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if parent[v] == usize::MAX {
                    parent[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if let Some(j) = parent.iter().position(|&p| p == usize::MAX) {
            return Err(StfError::Graph(format!("graph is disconnected: joint {j} unreachable from root {root}")));
        }
        Ok(SkeletonGraph {
            num_joints,
            root,
            edges: normalized,
            parent,
            joint_names: vec![None; num_joints],
        })
    }

    /// The bundled 10-joint body tree.
    pub fn default_skeleton() -> Self {
        Self::parse(DEFAULT_SKELETON, "<builtin skeleton10.graph>").expect("bundled skeleton is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parent[joint]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn joint_name(&self, joint: usize) -> Option<&str> {
        self.joint_names[joint].as_deref()
    }

    pub fn joint_by_name(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n.as_deref() == Some(name))
    }

    /// Relabels joints: new joint `perm[i]` is old joint `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<_> = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut g = Self::build(&edges, self.num_joints, perm[self.root])?;
        for (i, name) in self.joint_names.iter().enumerate() {
            g.joint_names[perm[i]] = name.clone();
        }
        Ok(g)
    }

    /// Parses the text format: a `N=<int> root=<int>` header, then `edge i j`
    /// lines and optional `joint i name` lines. `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut header: Option<(usize, usize)> = None;
        let mut edges = Vec::new();
        let mut names = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| StfError::parse(origin, lineno + 1, m);
            let mut toks = line.split_whitespace();
            let first = toks.next().unwrap_or_default();
            if header.is_none() {
                let mut n = None;
                let mut root = None;
                for tok in std::iter::once(first).chain(toks) {
                    match tok.split_once('=') {
                        Some(("N", v)) => n = v.parse().ok(),
                        Some(("root", v)) => root = v.parse().ok(),
                        _ => return Err(err(format!("malformed header token `{tok}`"))),
                    }
                }
                let n = n.ok_or_else(|| err("header must be `N=<int> root=<int>`".into()))?;
                header = Some((n, root.unwrap_or(0)));
                continue;
            }
            let rest: Vec<&str> = toks.collect();
            match first {
                "edge" => {
                    let [a, b] = rest[..] else {
                        return Err(err(format!("expected `edge <i> <j>`, got `{line}`")));
                    };
                    let a = a.parse().map_err(|_| err(format!("bad joint index `{a}`")))?;
                    let b = b.parse().map_err(|_| err(format!("bad joint index `{b}`")))?;
                    edges.push((a, b));
                }
                "joint" => {
                    let [i, name] = rest[..] else {
                        return Err(err(format!("expected `joint <i> <name>`, got `{line}`")));
                    };
                    let i: usize = i.parse().map_err(|_| err(format!("bad joint index `{i}`")))?;
                    names.push((i, name.to_string(), lineno + 1));
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        let (n, root) = header.ok_or_else(|| StfError::parse(origin, 1, "missing `N=<int> root=<int>` header"))?;
        let mut g = Self::build(&edges, n, root)?;
        for (i, name, line) in names {
            if i >= n {
                return Err(StfError::parse(origin, line, format!("joint {i} out of range")));
            }
            g.joint_names[i] = Some(name);
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StfError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("N={} root={}\n", self.num_joints, self.root);
        for &(a, b) in &self.edges {
            let _ = writeln!(s, "edge {a} {b}");
        }
        for (i, name) in self.joint_names.iter().enumerate() {
            if let Some(name) = name {
                let _ = writeln!(s, "joint {i} {name}");
            }
        }
        s
    }

    /// All-pairs hop counts by BFS from every joint.
    pub fn distances(&self) -> Vec<Vec<usize>> {
        let adj = adjacency_lists(self.num_joints, &self.edges);
        (0..self.num_joints)
            .map(|src| {
                let mut d = vec![usize::MAX; self.num_joints];
                d[src] = 0;
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    for &v in &adj[u] {
                        if d[v] == usize::MAX {
                            d[v] = d[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                d
            })
            .collect()
    }
}

fn adjacency_lists(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

/// How scale `k` relates to hop distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleMode {
    /// Scale k connects pairs exactly k hops apart.
    #[default]
    Disentangled,
    /// Scale k connects pairs at most k hops apart.
    Cumulative,
}

impl std::str::FromStr for ScaleMode {
    type Err = StfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disentangled" => Ok(Self::Disentangled),
            "cumulative" => Ok(Self::Cumulative),
            _ => Err(StfError::Config(format!("unknown adjacency mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Disentangled => "disentangled",
            Self::Cumulative => "cumulative",
        })
    }
}

/// K adjacency matrices, each N×N.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleAdjacency {
    pub matrices: Vec<Tensor>,
}

impl MultiScaleAdjacency {
    pub fn scales(&self) -> usize {
        self.matrices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.shape()[0])
    }

    /// Raw binary stack for scales 1..=K.
    pub fn raw(graph: &SkeletonGraph, scales: usize, mode: ScaleMode) -> Result<Self> {
        let n = graph.num_joints();
        if scales == 0 || scales >= n {
            return Err(StfError::InvalidArgument(format!(
                "scale count {scales} must satisfy 1 <= K < N = {n}"
            )));
        }
        let dist = graph.distances();
        let matrices = (1..=scales)
            .map(|k| {
                let mut m = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..n {
                        let d = dist[i][j];
                        let hit = match mode {
                            ScaleMode::Disentangled => d == k,
                            ScaleMode::Cumulative => d <= k,
                        };
                        if i == j || hit {
                            m.set(&[i, j], 1.0);
                        }
                    }
                }
                m
            })
            .collect();
        Ok(MultiScaleAdjacency { matrices })
    }

    /// Raw stack with each scale passed through [`normalize_adjacency`].
    pub fn normalized(graph: &SkeletonGraph, scales: usize, mode: ScaleMode) -> Result<Self> {
        let raw = Self::raw(graph, scales, mode)?;
        let matrices = raw.matrices.iter().map(normalize_adjacency).collect::<Result<_>>()?;
        Ok(MultiScaleAdjacency { matrices })
    }

    pub fn cast<F: crate::tensor::Scalar>(&self) -> Vec<Tensor<F>> {
        self.matrices.iter().map(|m| m.cast()).collect()
    }
}

/// D^{-1/2} Â D^{-1/2} with D the row sums of Â.
pub fn normalize_adjacency(raw: &Tensor) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(StfError::InvalidArgument(format!("adjacency must be square, got {s:?}")));
    }
    let n = s[0];
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| raw.at(&[i, j])).sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(StfError::InvalidArgument(format!("joint {i} has zero degree")));
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(&[i, j], raw.at(&[i, j]) / (deg[i] * deg[j]).sqrt());
        }
    }
    Ok(out)
}
