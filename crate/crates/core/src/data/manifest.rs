//! Dataset manifests, stratified subsampling, and in-memory datasets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::sequence::{parse_sequence_file, SkeletonSequence};
use crate::error::{Result, StfError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = StfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(StfError::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Entry list plus metadata. The file format is one `<path> <label> <split>`
/// line per entry; metadata rides in `# key=value` comment lines.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: usize,
    /// Graph definition file, relative to the manifest directory.
    pub graph: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.label >= self.classes) {
            return Err(StfError::InvalidArgument(format!(
                "label {} of {} exceeds class count {}",
                e.label,
                e.path.display(),
                self.classes
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# classes={}\n", self.classes);
        if let Some(g) = &self.graph {
            let _ = writeln!(s, "# graph={}", g.display());
        }
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "# seed={seed}");
        }
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {}", e.path.display(), e.label, e.split);
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut classes = None;
        let mut graph = None;
        let mut seed = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    let v = v.trim();
                    let bad = || StfError::parse(origin, lineno, format!("bad metadata value `{v}`"));
                    match k.trim() {
                        "classes" => classes = Some(v.parse().map_err(|_| bad())?),
                        "graph" => graph = Some(PathBuf::from(v)),
                        "seed" => seed = Some(v.parse().map_err(|_| bad())?),
                        _ => {}
                    }
                }
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let [path, label, split] = toks[..] else {
                return Err(StfError::parse(origin, lineno, "expected `<path> <label> <train|test>`"));
            };
            let label = label
                .parse()
                .map_err(|_| StfError::parse(origin, lineno, format!("bad label `{label}`")))?;
            let split = split
                .parse()
                .map_err(|_| StfError::parse(origin, lineno, format!("bad split tag `{split}`")))?;
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                label,
                split,
            });
        }
        let classes = classes.unwrap_or_else(|| entries.iter().map(|e| e.label + 1).max().unwrap_or(0));
        let m = DatasetManifest {
            entries,
            classes,
            graph,
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StfError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| StfError::io(path, e))
    }

    /// Keeps ceil(p·n_c) training entries of every class c; test entries are
    /// untouched and order is preserved.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        let keys: Vec<(usize, Split)> = self.entries.iter().map(|e| (e.label, e.split)).collect();
        let keep = stratified_subsample(&keys, self.classes, fraction, seed)?;
        Ok(DatasetManifest {
            entries: keep.into_iter().map(|i| self.entries[i].clone()).collect(),
            classes: self.classes,
            graph: self.graph.clone(),
            seed: Some(seed),
        })
    }

    pub fn count(&self, split: Split, label: usize) -> usize {
        self.entries
            .iter()
            .filter(|e| e.split == split && e.label == label)
            .count()
    }
}

/// Number of items kept from `n` at fraction `p`, i.e. ceil(p·n). The small
/// slack absorbs products such as 0.07·100 = 7.000000000000001.
pub fn retained_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Indices (ascending) retained by per-class sampling without replacement.
pub fn stratified_subsample(
    keys: &[(usize, Split)],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StfError::InvalidArgument(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = keys
        .iter()
        .enumerate()
        .filter(|(_, k)| k.1 == Split::Test)
        .map(|(i, _)| i)
        .collect();
    for class in 0..classes {
        let mut members: Vec<usize> = keys
            .iter()
            .enumerate()
            .filter(|(_, k)| k.1 == Split::Train && k.0 == class)
            .map(|(i, _)| i)
            .collect();
        let want = retained_count(members.len(), fraction);
        if want == 0 {
            return Err(StfError::InvalidArgument(format!(
                "class {class} retains no training samples"
            )));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..want]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// A loaded sample: sequence, split, and optional ground-truth focus mask
/// (T×N, 1 inside the active joints × active frames).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seq: SkeletonSequence,
    pub split: Split,
    pub mask: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        let keys: Vec<(usize, Split)> = self.samples.iter().map(|s| (s.seq.label, s.split)).collect();
        let keep = stratified_subsample(&keys, self.classes, fraction, seed)?;
        Ok(Dataset {
            classes: self.classes,
            samples: keep.into_iter().map(|i| self.samples[i].clone()).collect(),
        })
    }

    /// Reads every entry; paths are resolved against `base`. A file
    /// `<stem>.mask` next to a sequence supplies its ground-truth mask.
    pub fn load(manifest: &DatasetManifest, base: &Path) -> Result<Self> {
        manifest.validate()?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let path = base.join(&e.path);
                let mut seq = parse_sequence_file(&path)?;
                seq.label = e.label;
                let mask_path = path.with_extension("mask");
                let mask = if mask_path.exists() {
                    Some(read_mask(&mask_path, seq.frames(), seq.joints())?)
                } else {
                    None
                };
                Ok(Sample {
                    seq,
                    split: e.split,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            classes: manifest.classes,
            samples,
        })
    }
}

pub fn write_mask(mask: &[f64], frames: usize, joints: usize, path: &Path) -> Result<()> {
    let mut s = String::new();
    for t in 0..frames {
        let row: Vec<String> = mask[t * joints..(t + 1) * joints]
            .iter()
            .map(|&m| if m > 0.5 { "1" } else { "0" }.to_string())
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| StfError::io(path, e))
}

pub fn read_mask(path: &Path, frames: usize, joints: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| StfError::io(path, e))?;
    let mut out = Vec::with_capacity(frames * joints);
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let before = out.len();
        for tok in line.split_whitespace() {
            out.push(match tok {
                "1" => 1.0,
                "0" => 0.0,
                _ => return Err(StfError::parse(path, i + 1, format!("mask value `{tok}`"))),
            });
        }
        if out.len() - before != joints {
            return Err(StfError::parse(path, i + 1, format!("expected {joints} mask values")));
        }
    }
    if out.len() != frames * joints {
        return Err(StfError::parse(path, 0, format!("expected {frames} mask rows")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(per_class: usize, classes: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                entries.push(ManifestEntry {
                    path: PathBuf::from(format!("c{c}_{i}.seq")),
                    label: c,
                    split: Split::Train,
                });
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(format!("c{c}_test.seq")),
                label: c,
                split: Split::Test,
            });
        }
        DatasetManifest {
            entries,
            classes,
            graph: None,
            seed: None,
        }
    }

    #[test]
    fn identity_at_full_fraction() {
        let m = manifest(10, 3);
        let s = m.subsample(1.0, 3).unwrap();
        assert_eq!(s.entries, m.entries);
        assert_eq!(s.seed, Some(3));
    }

    #[test]
    fn quarter_of_two_hundred() {
        let m = manifest(200, 2);
        let s = m.subsample(0.25, 1).unwrap();
        for c in 0..2 {
            assert_eq!(s.count(Split::Train, c), 50);
            assert_eq!(s.count(Split::Test, c), 1);
        }
    }

    #[test]
    fn seeds_pick_different_subsets() {
        let m = manifest(40, 2);
        let a = m.subsample(0.5, 1).unwrap();
        let b = m.subsample(0.5, 2).unwrap();
        assert_eq!(a.entries.len(), b.entries.len());
        assert_ne!(a.entries, b.entries);
    }

    #[test]
    fn empty_class_is_an_error() {
        let mut m = manifest(5, 2);
        m.classes = 3;
        assert!(m.subsample(0.5, 0).is_err());
        assert!(m.subsample(0.0, 0).is_err());
    }

    #[test]
    fn ceil_is_robust() {
        assert_eq!(retained_count(100, 0.07), 7);
        assert_eq!(retained_count(200, 0.1), 20);
        assert_eq!(retained_count(7, 0.25), 2);
        assert_eq!(retained_count(3, 1.0), 3);
    }

    #[test]
    fn text_round_trip() {
        let mut m = manifest(2, 2);
        m.graph = Some(PathBuf::from("skeleton.graph"));
        m.seed = Some(9);
        assert_eq!(DatasetManifest::parse(&m.to_text(), "m").unwrap(), m);
        assert!(DatasetManifest::parse("a.seq 0 dev\n", "m").is_err());
        assert!(DatasetManifest::parse("# classes=1\na.seq 3 train\n", "m").is_err());
    }
}
