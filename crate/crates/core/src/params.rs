//! Named parameter collections and the `MCFE1` checkpoint container.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! b"MCFE1" | u32 LE manifest length | UTF-8 JSON manifest | f64 LE payloads
//! ```
//!
//! Tensor byte offsets in the manifest are relative to the first payload byte.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MCFE1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Classifier,
    Generator,
    Discriminator,
}

/// Ordered, named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub role: Role,
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every tensor on `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(n, t)| {
                let id = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (n.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    /// Serialized `MCFE1` bytes; `config` is echoed verbatim in the manifest.
    pub fn to_bytes(&self, config: &serde_json::Value) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 8;
        }
        let manifest = Manifest {
            role: self.role,
            config: config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::Checkpoint("manifest larger than 4 GiB".into()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let json_end = 9 + len;
        if bytes.len() < json_end {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[9..json_end])?;
        let payload = &bytes[json_end..];
        let mut params = ModelParams::new(manifest.role);
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + n * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` out of bounds", entry.name)));
            }
            let data = payload[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        Ok((params, manifest.config))
    }

    pub fn save(&self, path: &Path, config: &serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 over the raw parameter values, in order, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    role: Role,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Node ids of a [`ModelParams`] bound to one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<(String, NodeId)>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Points `name` at another node.
    pub fn set(&mut self, name: &str, id: NodeId) {
        match self.ids.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = id,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ids.iter().map(|(_, id)| *id)
    }
}

/// He-normal conv/linear weight of the given shape; `fan_in` is the product
/// of every axis except the first for 4-D kernels, the first axis for
/// `[in, out]` matrices.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Adds a 3x3-or-1x1 conv layer `{prefix}.w`, `{prefix}.b` to `params`.
pub fn push_conv<R: Rng>(
    params: &mut ModelParams,
    rng: &mut R,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    params.insert(
        format!("{prefix}.w"),
        he_normal(rng, &[c_out, c_in, k, k], c_in * k * k),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
}
