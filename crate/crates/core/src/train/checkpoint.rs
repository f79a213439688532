//! FFCK container.
//!
//! ```text
//! "FFCK" | u32 version | u32 tensor count
//! per tensor: u16 name length | name | u8 tag | u8 dtype | u8 rank | u64 dims… | payload
//! u32 trailer length | trailer JSON
//! ```
//!
//! Integers and floats are little-endian. The tag's low bits hold the
//! weight group; bit 7 marks normalization buffers and bit 6 optimizer
//! moments, which are named `opt.{d,g}.{m,v}/<parameter>`.

use std::collections::BTreeMap;
use std::path::Path;

use fenestra_nn::{Adam, AdamConfig, Group, ParamKind, ParameterStore, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{AdamSpec, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FFCK";
const DTYPE_F32: u8 = 0;
const BUFFER_BIT: u8 = 0x80;
const MOMENT_BIT: u8 = 0x40;
const GROUP_MASK: u8 = 0x3f;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated in {tensor}")]
    Truncated { tensor: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Weights, optimizer states and the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub store: ParameterStore<f32>,
    pub opt_d: Option<Adam<f32>>,
    pub opt_g: Option<Adam<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    config: TrainConfig,
    epoch: usize,
    opt_d: Option<OptimizerMeta>,
    opt_g: Option<OptimizerMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    steps: u64,
    adam: AdamSpec,
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut tensors: Vec<(String, u8, &Tensor<f32>)> = Vec::new();
    for (name, e) in ck.store.iter() {
        let bit = if e.kind == ParamKind::Buffer { BUFFER_BIT } else { 0 };
        tensors.push((name.clone(), e.group.tag() | bit, &e.tensor));
    }
    for (side, opt) in [("d", &ck.opt_d), ("g", &ck.opt_g)] {
        let Some(opt) = opt else { continue };
        for moment in ["m", "v"] {
            for name in opt.names() {
                let group = ck.store.entry(name).map_or(0, |e| e.group.tag());
                let t = if moment == "m" { opt.first_moment(name) } else { opt.second_moment(name) };
                let t = t.expect("listed name");
                tensors.push((format!("opt.{side}.{moment}/{name}"), group | MOMENT_BIT, t));
            }
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tag, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&[tag, DTYPE_F32, t.shape().len() as u8]);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = |o: &Option<Adam<f32>>| {
        o.as_ref().map(|a| OptimizerMeta {
            steps: a.steps(),
            adam: a.config.into(),
        })
    };
    let trailer = Trailer {
        config: ck.config,
        epoch: ck.epoch,
        opt_d: meta(&ck.opt_d),
        opt_g: meta(&ck.opt_g),
    };
    let json = serde_json::to_vec(&trailer).expect("plain data serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { tensor: what.to_string() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[derive(Default)]
struct Moments {
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "header").map_err(|_| CheckpointError::Format("shorter than the magic".into()))? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("header")?;
    let mut store = ParameterStore::new();
    let mut moments: BTreeMap<&str, Moments> = BTreeMap::new();
    for i in 0..count {
        let placeholder = format!("tensor #{i}");
        let len = r.u16(&placeholder)? as usize;
        let name = std::str::from_utf8(r.take(len, &placeholder)?)
            .map_err(|_| CheckpointError::Format(format!("{placeholder}: name is not UTF-8")))?
            .to_string();
        let tag = r.u8(&name)?;
        let dtype = r.u8(&name)?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Format(format!("{name}: unknown dtype {dtype}")));
        }
        let rank = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64(&name)?).map_err(|_| CheckpointError::Format(format!("{name}: dimension overflow")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Format(format!("{name}: size overflow")))?;
        let payload = r.take(numel, &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
        let group = Group::from_tag(tag & GROUP_MASK).ok_or_else(|| CheckpointError::Format(format!("{name}: unknown group tag {tag}")))?;

        if tag & MOMENT_BIT != 0 {
            let (slot, param) = name
                .split_once('/')
                .ok_or_else(|| CheckpointError::Format(format!("{name}: malformed optimizer entry")))?;
            let (side, which) = match slot {
                "opt.d.m" => ("d", 0),
                "opt.d.v" => ("d", 1),
                "opt.g.m" => ("g", 0),
                "opt.g.v" => ("g", 1),
                _ => return Err(CheckpointError::Format(format!("{name}: malformed optimizer entry"))),
            };
            let entry = moments.entry(side).or_default();
            let map = if which == 0 { &mut entry.m } else { &mut entry.v };
            map.insert(param.to_string(), tensor);
        } else {
            let kind = if tag & BUFFER_BIT != 0 { ParamKind::Buffer } else { ParamKind::Trainable };
            store
                .insert(&name, group, kind, tensor)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
        }
    }
    let len = r.u32("trailer")? as usize;
    let json = r.take(len, "trailer")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!("{} bytes after the trailer", bytes.len() - r.pos)));
    }
    let trailer: Trailer = serde_json::from_slice(json).map_err(|e| CheckpointError::Format(format!("trailer: {e}")))?;

    let mut rebuild = |side: &str, meta: Option<OptimizerMeta>| -> Result<Option<Adam<f32>>> {
        let parts = moments.remove(side);
        match (meta, parts) {
            (None, None) => Ok(None),
            (Some(meta), parts) => {
                let parts = parts.unwrap_or_default();
                if let Some(name) = parts.m.keys().find(|n| !store.contains(n)) {
                    return Err(CheckpointError::Format(format!("optimizer state for unknown parameter {name}")));
                }
                Adam::from_parts(AdamConfig::from(meta.adam), meta.steps, parts.m, parts.v)
                    .map(Some)
                    .map_err(|e| CheckpointError::Format(format!("optimizer {side}: {e}")))
            }
            (None, Some(_)) => Err(CheckpointError::Format(format!("optimizer {side} moments without metadata"))),
        }
    };
    let opt_d = rebuild("d", trailer.opt_d)?;
    let opt_g = rebuild("g", trailer.opt_g)?;
    Ok(Checkpoint {
        config: trailer.config,
        epoch: trailer.epoch,
        store,
        opt_d,
        opt_g,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(ck)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(&bytes)
}
