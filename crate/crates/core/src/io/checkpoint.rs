//! Checkpoint file: `TURBCKPT`, a little-endian u64 header length, a JSON
//! header, then a blob of little-endian f32 values.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TurbNet};
use crate::nn::Module;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig};

pub const MAGIC: &[u8; 8] = b"TURBCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32_le";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the blob, in bytes.
    pub byte_offset: u64,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub blob_sha256: String,
    pub blob_bytes: u64,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    pub entries: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TurbNet<f32>,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub adam: Option<Adam>,
}

fn push_tensor(entries: &mut Vec<TensorEntry>, blob: &mut Vec<u8>, name: String, t: &Tensor<f32>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        dtype: DTYPE.into(),
        byte_offset: blob.len() as u64,
    });
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &TurbNet<f32>,
    train_config: Option<&TrainConfig>,
    step: u64,
    adam: Option<&Adam>,
) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    model.visit("", &mut |name, p| push_tensor(&mut entries, &mut blob, name.to_string(), &p.value));
    if let Some(a) = adam {
        for (prefix, map) in [(OPTIM_M, &a.m), (OPTIM_V, &a.v)] {
            for (name, t) in map {
                push_tensor(&mut entries, &mut blob, format!("{}{}", prefix, name), t);
            }
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        train_config: train_config.cloned(),
        step,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        blob_bytes: blob.len() as u64,
        optimizer: adam.map(|a| OptimizerState {
            t: a.t,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
        entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    w.write_all(&blob).map_err(io)?;
    w.flush().map_err(io)
}

fn read_parts(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let hend = 16u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))? as usize;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::json("checkpoint header", e))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found == 0 || found > FORMAT_VERSION {
        return Err(Error::Version {
            kind: "checkpoint",
            found,
            supported: FORMAT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| Error::json("checkpoint header", e))?;
    let blob = bytes.split_off(hend);
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != header.blob_sha256 {
        return Err(Error::Digest {
            expected: header.blob_sha256,
            actual,
        });
    }
    if blob.len() as u64 != header.blob_bytes {
        return Err(Error::Checkpoint(format!("blob is {} bytes, header says {}", blob.len(), header.blob_bytes)));
    }
    let mut end = 0u64;
    let mut seen = HashSet::new();
    for e in &header.entries {
        if e.dtype != DTYPE {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.byte_offset < end {
            return Err(Error::Checkpoint(format!("{}: offset {} overlaps or is out of order", e.name, e.byte_offset)));
        }
        end = e.byte_offset + e.byte_len();
        if end > header.blob_bytes {
            return Err(Error::Checkpoint(format!("{}: extends past the blob", e.name)));
        }
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate entry {}", e.name)));
        }
    }
    Ok((header, blob))
}

/// Reads and verifies only the header.
pub fn load_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    Ok(read_parts(path.as_ref())?.0)
}

fn tensor_at(blob: &[u8], e: &TensorEntry) -> Tensor<f32> {
    let start = e.byte_offset as usize;
    let bytes = &blob[start..start + e.byte_len() as usize];
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::from_vec(&e.shape, data).expect("entry length matches shape")
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let (header, blob) = read_parts(path.as_ref())?;
    let mut tensors: BTreeMap<&str, &TensorEntry> = header.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut model = TurbNet::new(&header.model_config, &Rng::new(0))?;
    let mut err = None;
    model.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some(e) if e.shape == p.value.shape() => p.value = tensor_at(&blob, e),
            Some(e) => {
                err = Some(Error::Checkpoint(format!(
                    "{}: stored shape {:?} conflicts with config shape {:?}",
                    name,
                    e.shape,
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing parameter {}", name))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let adam = header.optimizer.as_ref().map(|o| {
        let mut a = Adam {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            t: o.t,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        };
        for (name, e) in std::mem::take(&mut tensors) {
            if let Some(n) = name.strip_prefix(OPTIM_M) {
                a.m.insert(n.to_string(), tensor_at(&blob, e));
            } else if let Some(n) = name.strip_prefix(OPTIM_V) {
                a.v.insert(n.to_string(), tensor_at(&blob, e));
            } else {
                tensors.insert(name, e);
            }
        }
        a
    });
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("entry {} matches no parameter", name)));
    }
    Ok(Checkpoint {
        model,
        train_config: header.train_config,
        step: header.step,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::perturb;

    fn model() -> TurbNet<f32> {
        let mut m = TurbNet::new(&ModelConfig::micro(), &Rng::new(3)).unwrap();
        perturb(&mut m, &mut Rng::new(4), 0.1);
        m
    }

    fn params(m: &TurbNet<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        m.visit("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&cfg);
        adam.t = 7;
        m.visit("", &mut |n, p| {
            adam.m.insert(n.to_string(), p.value.scale(0.5));
            adam.v.insert(n.to_string(), p.value.map(|v| v * v));
        });
        save_checkpoint(&path, &m, Some(&cfg), 42, Some(&adam)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let (a, b) = (params(&m), params(&ck.model));
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb), "{}", na);
        }
        assert_eq!(ck.step, 42);
        assert_eq!(ck.train_config, Some(cfg));
        assert_eq!(ck.adam, Some(adam));
        assert_eq!(ck.model.config, m.config);
    }

    #[test]
    fn header_lists_every_parameter_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&path, &m, None, 0, None).unwrap();
        let h = load_checkpoint_header(&path).unwrap();
        let names: Vec<_> = h.entries.iter().map(|e| e.name.clone()).collect();
        assert_eq!(names, m.param_names());
        let mut end = 0;
        for e in &h.entries {
            assert_eq!(e.byte_offset, end);
            end += e.byte_len();
        }
        assert_eq!(end, h.blob_bytes);
        assert!(load_checkpoint(&path).unwrap().adam.is_none());
    }

    #[test]
    fn truncated_blob_is_digest_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model(), None, 0, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Digest { .. })));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model(), None, 0, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut patched = bytes[..16 + hlen].to_vec();
        let header = String::from_utf8(patched.split_off(16)).unwrap();
        let header = header.replace("\"format_version\":1", "\"format_version\":9");
        patched.extend_from_slice(header.as_bytes());
        patched.extend_from_slice(&bytes[16 + hlen..]);
        std::fs::write(&path, &patched).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn shape_conflict_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = model();
        m.config.base_channels = 8;
        save_checkpoint(&path, &m, None, 0, None).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("conflicts"), "{}", err);
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
