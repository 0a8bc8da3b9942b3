//! Binary container for named `f32` arrays, and the checkpoint built on it.
//!
//! Layout: magic `WJDD`, version (`u32` LE), header length (`u64` LE), a
//! JSON header, then the little-endian `f32` payloads back to back.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, Network, ParamSet};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::nig::LossVariant;
use crate::optim::AdamState;
use crate::prior::PriorConfig;

pub const MAGIC: &[u8; 4] = b"WJDD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload section, in `f32` elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ManifestEntry>,
}

pub fn write_container(meta: serde_json::Value, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::Shape(format!("array {} does not match its shape {:?}", a.name, a.shape)));
        }
        entries.push(ManifestEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            offset,
            len: a.data.len(),
        });
        offset += a.data.len();
    }
    let header = serde_json::to_vec(&Header { meta, arrays: entries }).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for a in arrays {
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a WJDD container"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported container version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    let hbytes = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let payload = &body[hlen..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Checkpoint(format!("array {} has inconsistent shape", e.name)));
        }
        let raw = payload
            .get(4 * e.offset..4 * (e.offset + e.len))
            .ok_or_else(|| Error::Checkpoint(format!("array {} runs past the payload", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(NamedArray {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    Ok((header.meta, arrays))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub lr: f64,
    pub loss_variant: LossVariant,
    pub prior: PriorConfig,
    pub seed: u64,
    #[serde(default)]
    pub best_val_psnr: Option<f64>,
    /// Plateau schedule state: best validation PSNR and evaluations since it.
    #[serde(default)]
    pub plateau_best: Option<f64>,
    #[serde(default)]
    pub plateau_wait: usize,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        TrainingMeta {
            step: 0,
            lr: 5e-4,
            loss_variant: LossVariant::default(),
            prior: PriorConfig::default(),
            seed: 0,
            best_val_psnr: None,
            plateau_best: None,
            plateau_wait: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    net_config: NetConfig,
    training_meta: TrainingMeta,
    #[serde(default)]
    adam_step: Option<u64>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: TrainingMeta,
    pub optimizer: Option<AdamState>,
}

fn to_arrays(prefix: &str, p: &ParamSet) -> Vec<NamedArray> {
    p.names
        .iter()
        .zip(&p.shapes)
        .zip(&p.values)
        .map(|((n, s), v)| NamedArray {
            name: format!("{prefix}{n}"),
            shape: s.clone(),
            data: v.iter().map(|&x| x as f32).collect(),
        })
        .collect()
}

fn from_arrays(template: &ParamSet, prefix: &str, arrays: &[NamedArray]) -> Result<ParamSet> {
    let mut out = ParamSet::zeros_like(template);
    for (i, name) in template.names.iter().enumerate() {
        let full = format!("{prefix}{name}");
        let a = arrays
            .iter()
            .find(|a| a.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {full}")))?;
        if a.shape != template.shapes[i] {
            return Err(Error::Checkpoint(format!(
                "array {full} has shape {:?}, architecture needs {:?}",
                a.shape, template.shapes[i]
            )));
        }
        out.values[i] = a.data.iter().map(|&v| v as f64).collect();
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(network: Network, meta: TrainingMeta) -> Self {
        Checkpoint {
            network,
            meta,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            net_config: *self.network.config(),
            training_meta: self.meta.clone(),
            adam_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let mut arrays = to_arrays("", self.network.params());
        if let Some(o) = &self.optimizer {
            arrays.extend(to_arrays(ADAM_M, &o.m));
            arrays.extend(to_arrays(ADAM_V, &o.v));
        }
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_container(meta, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, arrays) = read_container(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("checkpoint header: {e}")))?;
        let template = Network::new(meta.net_config)?;
        let params = from_arrays(template.params(), "", &arrays)?;
        let expected = template.params().names.len() * if meta.adam_step.is_some() { 3 } else { 1 };
        if arrays.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, architecture needs {expected}",
                arrays.len()
            )));
        }
        let optimizer = match meta.adam_step {
            Some(step) => Some(AdamState {
                step,
                m: from_arrays(template.params(), ADAM_M, &arrays)?,
                v: from_arrays(template.params(), ADAM_V, &arrays)?,
            }),
            None => None,
        };
        Ok(Checkpoint {
            network: Network::from_params(meta.net_config, params)?,
            meta: meta.training_meta,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
