//! Versioned binary container for model weights, optimizer state and the
//! run that produced them.
//!
//! Layout, all integers little-endian:
//! `WILSONCK`, `u32` version, `u32` header length, TOML header, `u32` tensor
//! count, then per tensor `u16` name length, name, `u8` rank, `u32` dims and
//! `f32` values in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Segmenter};
use crate::taxonomy::ClassId;

pub const MAGIC: &[u8; 8] = b"WILSONCK";
pub const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Step index the weights were trained for.
    pub step: usize,
    /// Class ids in channel order, background first.
    pub classes: Vec<ClassId>,
    pub model: ModelConfig,
    /// Resolved configuration of the producing run, verbatim.
    #[serde(default)]
    pub config: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(
        step: usize,
        classes: Vec<ClassId>,
        model: &Segmenter,
        optimizer: &BTreeMap<String, Tensor>,
        config: String,
    ) -> Result<Self> {
        if classes.len() != model.num_classes() {
            return Err(Error::Schema(format!(
                "{} class ids for a {}-class model",
                classes.len(),
                model.num_classes()
            )));
        }
        let mut tensors = model.tensors()?;
        for (k, v) in optimizer {
            tensors.insert(format!("{OPTIM_PREFIX}{k}"), v.clone());
        }
        Ok(Self {
            header: CheckpointHeader {
                step,
                classes,
                model: *model.config(),
                config,
            },
            tensors,
        })
    }

    pub fn model(&self) -> Result<Segmenter> {
        let params = self
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(OPTIM_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Segmenter::from_tensors(self.header.model, self.header.classes.len(), &params)
    }

    pub fn optimizer_state(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(OPTIM_PREFIX).map(|k| (k.to_string(), v.clone())))
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::format("checkpoint", format!("tensor name `{name}` too long")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::format("checkpoint", "rank too large"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::format("checkpoint", "header is not UTF-8"))?;
        let header: CheckpointHeader =
            toml::from_str(header).map_err(|e| Error::format("checkpoint", format!("header: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format("checkpoint", format!("tensor `{name}` is too large")))?;
            let raw = r.take(len)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::from_vec(values, dims, &Device::Cpu)?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
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
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    fn sample() -> Checkpoint {
        let net = Segmenter::init(ModelConfig::default(), 3, false, 5).unwrap();
        let mut optim = BTreeMap::new();
        optim.insert("decoder.classifier.bias".to_string(), Tensor::new(&[0.5f32, -1.0, 2.0], &Device::Cpu).unwrap());
        Checkpoint::from_model(0, vec![0, 1, 2], &net, &optim, "seed = 1\n".into()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.tensors.keys().collect::<Vec<_>>(), ck.tensors.keys().collect::<Vec<_>>());
        for (k, t) in &ck.tensors {
            assert_eq!(ops::to_f64_vec(t).unwrap(), ops::to_f64_vec(&back.tensors[k]).unwrap());
        }
        assert_eq!(back.optimizer_state().len(), 1);
        assert_eq!(back.model().unwrap().num_classes(), 3);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Format { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&magic), Err(Error::Format { .. })));
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(Checkpoint::decode(&version), Err(Error::Format { .. })));
    }

    #[test]
    fn class_count_must_match_model() {
        let net = Segmenter::init(ModelConfig::default(), 3, false, 5).unwrap();
        assert!(matches!(
            Checkpoint::from_model(0, vec![0, 1], &net, &BTreeMap::new(), String::new()),
            Err(Error::Schema(_))
        ));
    }
}
