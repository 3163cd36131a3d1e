//! Self-describing checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"INSCKPT\n"            8-byte magic
//! u32                     format version (1)
//! u64                     header length in bytes
//! header                  UTF-8 JSON, see `Header`
//! data                    f32 LE values of every array, in header order
//! ```
//!
//! Every array entry in the header carries a group (`param`, `frozen`,
//! `adam_m`, `adam_v`), its name, shape and element offset into `data`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ins_autograd::{Adam, AdamConfig, ParamSet, Tensor};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{InsError, Result};
use crate::fields::{FieldConfig, InsField};

pub const MAGIC: &[u8; 8] = b"INSCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Stylize,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Stylize => "stylize",
        })
    }
}

impl FromStr for Phase {
    type Err = InsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "stylize" => Ok(Phase::Stylize),
            other => Err(InsError::Argument(format!("unknown phase `{other}`"))),
        }
    }
}

/// Trained field plus everything needed to resume or audit a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: InsField,
    /// Content-module copy that produces the distillation target; never
    /// updated once taken.
    pub frozen: Option<ParamSet>,
    pub optimizer: Adam,
    /// Optimizer steps taken so far across all phases.
    pub step: u64,
    pub phase: Phase,
    /// Snapshot of the training configuration that produced this state.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    field: FieldConfig,
    step: u64,
    phase: Phase,
    config: serde_json::Value,
    adam: AdamHeader,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

const GROUPS: [&str; 4] = ["param", "frozen", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let empty = ParamSet::new();
        let sets: [&ParamSet; 4] = [
            self.field.params(),
            self.frozen.as_ref().unwrap_or(&empty),
            &self.optimizer.m,
            &self.optimizer.v,
        ];
        let mut arrays = vec![];
        let mut data: Vec<u8> = vec![];
        let mut offset = 0;
        for (group, set) in GROUPS.iter().zip(sets) {
            for (name, t) in set.iter() {
                arrays.push(ArrayEntry {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
                for v in t.iter() {
                    data.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.optimizer.config;
        let header = Header {
            field: self.field.config().clone(),
            step: self.step,
            phase: self.phase,
            config: self.config.clone(),
            adam: AdamHeader {
                beta1,
                beta2,
                eps,
                t: self.optimizer.t.clone(),
            },
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| InsError::Corrupted(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(InsError::Corrupted(format!(
                "unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| InsError::Corrupted(format!("header: {e}")))?;
        let data = &body[hlen..];
        if !data.len().is_multiple_of(4) {
            return Err(bad("data section is not a whole number of f32 values"));
        }

        let mut sets: [ParamSet; 4] = Default::default();
        for entry in &header.arrays {
            let slot = GROUPS
                .iter()
                .position(|g| *g == entry.group)
                .ok_or_else(|| InsError::Corrupted(format!("unknown group `{}`", entry.group)))?;
            let len: usize = entry.shape.iter().product();
            let (start, end) = (entry.offset * 4, (entry.offset + len) * 4);
            if end > data.len() {
                return Err(InsError::Corrupted(format!(
                    "array `{}` runs past the end of the data",
                    entry.name
                )));
            }
            let values: Vec<f64> = data[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(InsError::Corrupted(format!(
                    "{} array `{}` holds non-finite values",
                    entry.group, entry.name
                )));
            }
            let t = Tensor::from_shape_vec(IxDyn(&entry.shape), values).expect("sized above");
            sets[slot].insert(entry.name.clone(), t);
        }
        let [params, frozen, m, v] = sets;
        let field = InsField::from_parts(header.field, params)?;
        let frozen = (!frozen.is_empty()).then_some(frozen);
        let optimizer = Adam {
            config: AdamConfig {
                beta1: header.adam.beta1,
                beta2: header.adam.beta2,
                eps: header.adam.eps,
            },
            m,
            v,
            t: header.adam.t,
        };
        Ok(Self {
            field,
            frozen,
            optimizer,
            step: header.step,
            phase: header.phase,
            config: header.config,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| InsError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| InsError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| InsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| InsError::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}
