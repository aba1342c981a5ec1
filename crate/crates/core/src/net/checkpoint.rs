//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! | bytes | field                                              |
//! |-------|----------------------------------------------------|
//! | 4     | magic `S A F C`                                    |
//! | 2     | version, u16 = 1                                   |
//! | 4     | completed epochs, u32                              |
//! | 4     | number of blocks, u32                              |
//! | ...   | blocks: u16 name length, name, u8 ndims, u32 dims, f32 data |
//!
//! Parameter blocks use the group names of [`ModelParams`]; optimizer state
//! blocks carry the same names prefixed with `momentum.`.

use super::ModelParams;
use crate::error::{Error, Result};
use crate::io::{write_all, ByteCursor};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SAFC";
const CHECKPOINT_VERSION: u16 = 1;
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// SGD velocity per parameter, present for resumable checkpoints.
    pub momentum: Option<Vec<f64>>,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            momentum: None,
            epoch: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups = self.params.groups();
        let blocks = groups.len() * if self.momentum.is_some() { 2 } else { 1 };
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(blocks as u32).to_le_bytes());
        let mut put = |name: &str, shape: &[usize], values: &[f64]| -> Result<()> {
            for &v in values {
                if v as f32 as f64 != v {
                    return Err(Error::Numerical(format!("{name} holds a value not representable as f32: {v}")));
                }
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            Ok(())
        };
        for g in groups {
            put(g.name, &g.shape, &self.params.values()[g.range()])?;
        }
        if let Some(m) = &self.momentum {
            for g in groups {
                put(&format!("{MOMENTUM_PREFIX}{}", g.name), &g.shape, &m[g.range()])?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing checkpoint magic".into()));
        }
        let version = cur.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let epoch = cur.u32()?;
        let blocks = cur.u32()? as usize;
        let template = ModelParams::zeros();
        let mut values = vec![None; template.len()];
        let mut momentum: Option<Vec<Option<f64>>> = None;
        for _ in 0..blocks {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?
                .to_string();
            let ndims = cur.u8()? as usize;
            let shape = (0..ndims).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (target, base) = match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(rest) => (momentum.get_or_insert_with(|| vec![None; template.len()]), rest),
                None => (&mut values, name.as_str()),
            };
            let group = template
                .group_by_name(base)
                .ok_or_else(|| Error::Format(format!("unknown checkpoint block {name:?}")))?;
            if group.shape != shape {
                return Err(Error::Format(format!(
                    "block {name:?} has shape {shape:?}, expected {:?}",
                    group.shape
                )));
            }
            let raw = cur.take(4 * group.len())?;
            for (slot, c) in target[group.range()].iter_mut().zip(raw.chunks_exact(4)) {
                if slot.is_some() {
                    return Err(Error::Format(format!("duplicate checkpoint block {name:?}")));
                }
                *slot = Some(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", cur.remaining())));
        }
        let complete = |v: Vec<Option<f64>>, what: &str| -> Result<Vec<f64>> {
            v.into_iter()
                .enumerate()
                .map(|(i, x)| {
                    x.ok_or_else(|| {
                        let g = template.group_of(i).map_or("?", |g| g.name);
                        Error::Format(format!("checkpoint lacks {what} block {g:?}"))
                    })
                })
                .collect()
        };
        let params = ModelParams::from_parts(complete(values, "parameter")?).expect("layout-sized vector");
        let momentum = momentum.map(|m| complete(m, "momentum")).transpose()?;
        Ok(Self { params, momentum, epoch })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_all(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
