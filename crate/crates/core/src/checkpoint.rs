//! `STFCKPT v1`: a model, its optimizer momentum, RNG position and epoch.
//!
//! Layout (all integers u64 little-endian unless noted):
//!
//! ```text
//! "STFCKPT v1\n"
//! len, config text      net.* keys plus `tag=` and `epoch=` echo
//! len, graph text
//! epoch
//! rng seed [u8; 32], stream, word position (u128)
//! count, then per parameter: name len, name, rank, dims…, f64 values
//! count, then momentum buffers in the same form (0 when absent)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::ConfigMap;
use crate::error::{Result, StfError};
use crate::graph::SkeletonGraph;
use crate::network::{Model, NetworkConfig, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"STFCKPT v1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// One buffer per parameter, or empty before the first optimizer step.
    pub momentum: Vec<Tensor>,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    /// Free-form role, e.g. `baseline`, `E`, `DCG`.
    pub tag: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let mut cfg = self.model.config.to_config();
        cfg.set("tag", &self.tag);
        cfg.set("epoch", self.epoch);
        put_str(&mut out, &cfg.to_text());
        put_str(&mut out, &self.model.graph.to_text());
        put_u64(&mut out, self.epoch as u64);
        out.extend_from_slice(&self.rng.get_seed());
        put_u64(&mut out, self.rng.get_stream());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        put_u64(&mut out, self.model.params.len() as u64);
        for (name, t) in self.model.params.iter() {
            put_tensor(&mut out, name, t);
        }
        put_u64(&mut out, self.momentum.len() as u64);
        for (name, t) in self.model.params.names().iter().zip(&self.momentum) {
            put_tensor(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(StfError::Checkpoint("not an STFCKPT v1 file".into()));
        }
        let cfg = ConfigMap::parse(&r.string()?, "<checkpoint config>")?;
        let config = NetworkConfig::from_config(&cfg)?;
        let graph = SkeletonGraph::parse(&r.string()?, "<checkpoint graph>")?;
        let tag = cfg.get("tag").unwrap_or("").to_string();
        let epoch = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let mut params = ParamStore::default();
        for _ in 0..r.u64()? {
            let (name, t) = r.tensor()?;
            params.push(name, t);
        }
        let model = Model::from_params(config, graph, params)?;
        let count = r.u64()? as usize;
        if count != 0 && count != model.params.len() {
            return Err(StfError::Checkpoint(format!(
                "{count} momentum buffers for {} parameters",
                model.params.len()
            )));
        }
        let mut momentum = Vec::with_capacity(count);
        for i in 0..count {
            let (name, t) = r.tensor()?;
            if name != model.params.names()[i] || t.shape() != model.params.get(i).shape() {
                return Err(StfError::Checkpoint(format!("momentum buffer `{name}` does not match its parameter")));
            }
            momentum.push(t);
        }
        if r.pos != bytes.len() {
            return Err(StfError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            momentum,
            epoch,
            rng,
            tag,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| StfError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| StfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| StfError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            StfError::Checkpoint(m) => StfError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| StfError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(StfError::Checkpoint(format!("length {n} exceeds the file at byte {}", self.pos)));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| StfError::Checkpoint("text section is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| StfError::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| StfError::Checkpoint(format!("parameter `{name}`: {e}")))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = NetworkConfig {
            channels: vec![4, 4, 4, 4, 4, 4],
            ..Default::default()
        };
        let model = Model::init(config, SkeletonGraph::default_skeleton(), &mut rng).unwrap();
        let momentum = model.params.tensors().iter().map(|t| t.map(|v| v * 0.5)).collect();
        rng.next_u64();
        Checkpoint {
            model,
            momentum,
            epoch: 7,
            rng,
            tag: "DCG".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let (mut a, mut b) = (ck.rng.clone(), back.rng.clone());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"STFCKPT v2\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
