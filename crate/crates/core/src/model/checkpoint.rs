//! Checkpoint file: one line of compact JSON (the manifest), a `\n`, then the
//! raw little-endian `f64` blob. Manifest offsets are byte offsets into the blob.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Affine, Architecture, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "roft-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    /// `ssl`, `supervised`, `finetuned:<kind>`, `random`, ...
    pub pretraining: String,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub pretraining: String,
}

impl Checkpoint {
    pub fn new(params: ParamSet, pretraining: impl Into<String>) -> Self {
        Self {
            params,
            pretraining: pretraining.into(),
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .params
            .leaves()
            .into_iter()
            .map(|(name, t)| {
                let nbytes = t.len() * 8;
                let e = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            architecture: self.params.arch,
            pretraining: self.pretraining.clone(),
            tensors,
            blob_bytes: offset,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = self.manifest();
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.reserve(manifest.blob_bytes);
        for (_, t) in self.params.leaves() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::validation("checkpoint has no manifest terminator"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let blob = &bytes[split + 1..];
        if blob.len() != manifest.blob_bytes {
            return Err(Error::validation(format!(
                "checkpoint blob has {} bytes, manifest says {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }

        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.nbytes != n * 8 || e.offset + e.nbytes > blob.len() {
                return Err(Error::validation(format!("tensor `{}` has an inconsistent extent", e.name)));
            }
            let data = blob[e.offset..e.offset + e.nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }

        let mut params = ParamSet::init(manifest.architecture, 0)?;
        if let (Some(w), Some(_)) = (tensors.get("head.weight"), tensors.get("head.bias")) {
            params.head = Some(Affine::zeros(w.rows(), w.cols()));
        }
        let mut seen = 0;
        for (name, slot) in params.leaves_mut() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::validation(format!("checkpoint is missing `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::validation(format!(
                    "`{name}` has shape {:?}, architecture needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
            seen += 1;
        }
        if seen != tensors.len() {
            let known = params.names();
            let extra: Vec<_> = tensors.keys().filter(|k| !known.contains(k)).collect();
            return Err(Error::validation(format!("checkpoint has unknown tensors {extra:?}")));
        }
        Ok(Self {
            params,
            pretraining: manifest.pretraining,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_and_without_head() {
        let arch = Architecture {
            in_dim: 3,
            hidden: 4,
            layers: 2,
        };
        let enc = ParamSet::init(arch, 42).unwrap();
        for params in [enc.clone(), enc.with_fresh_head(3, 1)] {
            let ck = Checkpoint::new(params, "ssl");
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn manifest_offsets_tile_the_blob() {
        let p = ParamSet::init(Architecture::new(5), 0).unwrap();
        let m = Checkpoint::new(p, "supervised").manifest();
        let mut expect = 0;
        for e in &m.tensors {
            assert_eq!(e.offset, expect);
            expect += e.nbytes;
        }
        assert_eq!(expect, m.blob_bytes);
        assert!(m.tensors.iter().all(|e| !e.name.starts_with("head.")));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let p = ParamSet::init(Architecture::new(2), 0).unwrap();
        let mut bytes = Checkpoint::new(p, "ssl").to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
