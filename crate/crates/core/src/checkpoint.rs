//! Single-file binary checkpoints.
//!
//! Layout (little-endian): magic `CPCK`, `u32` format version, `u64` config hash,
//! `u8` step, `u64` epoch, `u8` complete flag, `u64` seed, length-prefixed config
//! text, then counters (`name`, `u64`) and tensors (`name`, rank, dims, `f32` data).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"CPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            dims: t.dims().to_vec(),
            data: t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.dims.as_slice(), &Device::Cpu)?)
    }
}

/// Training state after an epoch of some step. Per-epoch random streams are
/// derived from `(seed, step, epoch)`, so those three fields are the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u8,
    pub epoch: usize,
    /// Whether every epoch of `step` has run.
    pub complete: bool,
    pub config_hash: u64,
    pub config_text: String,
    pub seed: u64,
    pub counters: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Blob>,
}

impl Checkpoint {
    pub fn new(step: u8, epoch: usize, complete: bool, config: &TrainConfig) -> Self {
        Self {
            step,
            epoch,
            complete,
            config_hash: config.hash(),
            config_text: config.to_text(),
            seed: config.seed,
            counters: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// Parses the embedded config and checks it against the stored hash.
    pub fn config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig::parse(&self.config_text)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Checkpoint("config hash does not match embedded config".into()));
        }
        Ok(cfg)
    }

    pub fn put_store(&mut self, net: &str, store: &ParamStore) -> Result<()> {
        for (k, v) in store.params() {
            self.tensors.insert(format!("param/{net}/{k}"), Blob::from_tensor(v.as_tensor())?);
        }
        for (k, v) in store.buffers() {
            self.tensors.insert(format!("buffer/{net}/{k}"), Blob::from_tensor(v.as_tensor())?);
        }
        Ok(())
    }

    /// Copies every stored tensor of `net` into `store`; all entries must be present.
    pub fn load_store(&self, net: &str, store: &ParamStore) -> Result<()> {
        for (kind, names) in [
            ("param", store.params().map(|(k, _)| k.clone()).collect::<Vec<_>>()),
            ("buffer", store.buffers().map(|(k, _)| k.clone()).collect()),
        ] {
            for k in names {
                let key = format!("{kind}/{net}/{k}");
                let blob = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                store.assign(&k, &blob.to_tensor()?)?;
            }
        }
        Ok(())
    }

    /// Names of the networks with stored parameters.
    pub fn networks(&self) -> BTreeSet<String> {
        self.tensors
            .keys()
            .filter_map(|k| k.strip_prefix("param/"))
            .filter_map(|k| k.split('/').next())
            .map(str::to_string)
            .collect()
    }

    pub fn has_network(&self, net: &str) -> bool {
        let prefix = format!("param/{net}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.push(self.step);
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.push(u8::from(self.complete));
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (k, v) in &self.counters {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (k, blob) in &self.tensors {
            put_str(&mut out, k);
            out.extend_from_slice(&(blob.dims.len() as u32).to_le_bytes());
            for d in &blob.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in &blob.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config_hash = r.u64()?;
        let step = r.take(1)?[0];
        let epoch = r.u64()? as usize;
        let complete = r.take(1)?[0] != 0;
        let seed = r.u64()?;
        let config_text = r.string()?;
        let mut counters = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            counters.insert(k, r.u64()?);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(k, Blob { dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            step,
            epoch,
            complete,
            config_hash,
            config_text,
            seed,
            counters,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let mut c = Checkpoint::new(2, 7, true, &TrainConfig::toy());
        c.counters.insert("adam/e_x".into(), 42);
        c.tensors.insert(
            "param/e_x/w".into(),
            Blob {
                dims: vec![2, 3],
                data: vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 7.0],
            },
        );
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config().unwrap(), TrainConfig::toy());
        assert_eq!(back.networks().into_iter().collect::<Vec<_>>(), vec!["e_x".to_string()]);
    }

    #[test]
    fn rejects_corruption() {
        let c = Checkpoint::new(1, 0, false, &TrainConfig::toy());
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
