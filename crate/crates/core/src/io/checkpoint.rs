//! Named-tensor checkpoints.
//!
//! Layout: magic `CYCK1\n`, a `u32` LE header length, a JSON header holding the
//! format version, network kind, metadata and an index of
//! `{name, shape, dtype, offset, length}` entries, then the concatenated
//! little-endian payloads. Offsets are relative to the first payload byte.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CYCK1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Dwinet,
    Adcnet,
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkKind::Dwinet => "dwinet",
            NetworkKind::Adcnet => "adcnet",
        })
    }
}

impl FromStr for NetworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dwinet" => Ok(NetworkKind::Dwinet),
            "adcnet" => Ok(NetworkKind::Adcnet),
            other => Err(Error::InvalidArgument(format!("unknown network {other:?} (expected dwinet or adcnet)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Little-endian payload.
    pub bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.width());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        NamedTensor { name: name.into(), shape: t.shape().to_vec(), dtype: T::DTYPE, bytes }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {} is {:?}, requested {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data = self.bytes.chunks_exact(T::DTYPE.width()).map(T::read_le).collect();
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    /// Configuration the network was trained with.
    pub config: serde_json::Value,
    /// Hex SHA-256 of the compact JSON serialization of `config`.
    pub config_digest: String,
}

impl CheckpointMeta {
    pub fn new(seed: u64, epoch: usize, config: serde_json::Value) -> Self {
        let config_digest = config_digest(&config);
        CheckpointMeta { seed, epoch, config, config_digest }
    }
}

pub fn config_digest(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json values serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub network_kind: NetworkKind,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    network_kind: NetworkKind,
    metadata: CheckpointMeta,
    tensors: Vec<IndexEntry>,
}

impl Checkpoint {
    /// Captures every parameter and buffer of `module`.
    pub fn from_module<T: Scalar>(kind: NetworkKind, module: &(impl Module<T> + ?Sized), meta: CheckpointMeta) -> Self {
        let mut tensors: Vec<NamedTensor> =
            module.params().iter().map(|p| NamedTensor::from_tensor(&p.name, &p.value)).collect();
        tensors.extend(module.buffers().iter().map(|b| NamedTensor::from_tensor(&b.name, &b.value)));
        Checkpoint { format_version: FORMAT_VERSION, network_kind: kind, meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies tensors into `module`. Names for which `keep` returns true are
    /// left at the module's current values and are not required to exist in
    /// the checkpoint. Everything is validated before anything is written.
    pub fn load_into<T: Scalar>(
        &self,
        expected: NetworkKind,
        module: &mut (impl Module<T> + ?Sized),
        keep: impl Fn(&str) -> bool,
    ) -> Result<()> {
        if self.network_kind != expected {
            return Err(Error::NetworkKindMismatch {
                expected: expected.to_string(),
                found: self.network_kind.to_string(),
            });
        }
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut targets: Vec<(String, Vec<usize>)> =
            module.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        targets.extend(module.buffers().iter().map(|b| (b.name.clone(), b.value.shape().to_vec())));
        let target_names: HashSet<&str> = targets.iter().map(|(n, _)| n.as_str()).collect();

        let mut staged: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, shape) in &targets {
            if keep(name) {
                continue;
            }
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from checkpoint")))?;
            if &t.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {:?}, network {shape:?}",
                    t.shape
                )));
            }
            staged.insert(name.clone(), t.to_tensor()?);
        }
        if let Some(extra) = self.tensors.iter().find(|t| !target_names.contains(t.name.as_str()) && !keep(&t.name)) {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor {} has no counterpart in the network",
                extra.name
            )));
        }
        for p in module.params_mut() {
            if let Some(v) = staged.remove(&p.name) {
                p.value = v;
            }
        }
        for b in module.buffers_mut() {
            if let Some(v) = staged.remove(&b.name) {
                b.value = v;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut index = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {}", t.name)));
            }
            let length = t.shape.iter().product::<usize>() * t.dtype.width();
            if t.bytes.len() != length {
                return Err(Error::PayloadLength { expected: length, actual: t.bytes.len() });
            }
            index.push(IndexEntry { name: t.name.clone(), shape: t.shape.clone(), dtype: t.dtype, offset, length });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            format_version: self.format_version,
            network_kind: self.network_kind,
            metadata: self.meta.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(10 + header.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 10 {
            return Err(Error::Truncated("header length missing".into()));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = &bytes[10..];
        if body.len() < hlen {
            return Err(Error::Truncated(format!("header needs {hlen} bytes, file has {}", body.len())));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Header(format!("unreadable checkpoint header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has format_version {}, reader supports {FORMAT_VERSION}",
                header.format_version
            )));
        }
        let payload = &body[hlen..];
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in header.tensors {
            if !seen.insert(e.name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {}", e.name)));
            }
            let length = e.shape.iter().product::<usize>() * e.dtype.width();
            if e.length != length || e.offset != expected_offset {
                return Err(Error::Checkpoint(format!("index entry for {} is inconsistent", e.name)));
            }
            let end = e.offset + e.length;
            if end > payload.len() {
                return Err(Error::PayloadLength { expected: end, actual: payload.len() });
            }
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                dtype: e.dtype,
                bytes: payload[e.offset..end].to_vec(),
            });
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::PayloadLength { expected: expected_offset, actual: payload.len() });
        }
        if header.metadata.config_digest != config_digest(&header.metadata.config) {
            return Err(Error::Checkpoint("config digest does not match the embedded config".into()));
        }
        Ok(Checkpoint {
            format_version: header.format_version,
            network_kind: header.network_kind,
            meta: header.metadata,
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
