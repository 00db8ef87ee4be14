//! Binary checkpoint format and checkpoint averaging.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ICTC"  u32 version=1  u32 count
//! count × { u32 name_len, name (UTF-8), u8 rank, rank × u32 extent,
//!           product(extents) × f32 }
//! u32 config_len, config echo (UTF-8)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"ICTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoints disagree: {0}")]
    Mismatch(String),
    #[error("no checkpoints to average")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
    /// Run config text the parameters were trained under.
    pub config: String,
}

impl Checkpoint {
    /// Rounds every parameter to binary32.
    pub fn from_params(params: &ParamStore, config: &str) -> Self {
        let entries = params
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            entries,
            config: config.to_string(),
        }
    }

    pub fn to_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let data = e.values.iter().map(|&v| f64::from(v)).collect();
            store.add(e.name.clone(), Tensor::new(&e.shape, data).expect("validated shape"));
        }
        store
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let len32 = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| CheckpointError::Malformed(format!("{what} too large")))
        };
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&len32(self.entries.len(), "parameter count")?.to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&len32(e.name.len(), "name")?.to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.shape.len() as u8])?;
            for &d in &e.shape {
                w.write_all(&len32(d, "extent")?.to_le_bytes())?;
            }
            for v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&len32(self.config.len(), "config")?.to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = cur.u32()? as usize;
        let mut entries: Vec<CheckpointEntry> = Vec::new();
        for _ in 0..count {
            let name = cur.string()?;
            if entries.iter().any(|e| e.name == name) {
                return Err(CheckpointError::Malformed(format!("duplicate parameter `{name}`")));
            }
            let rank = cur.take(1)?[0] as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(CheckpointError::Malformed(format!("rank {rank} for `{name}`")));
            }
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| CheckpointError::Malformed(format!("shape {shape:?} for `{name}`")))?;
            let payload = cur.take(
                n.checked_mul(4)
                    .ok_or_else(|| CheckpointError::Malformed("payload size".into()))?,
            )?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(CheckpointEntry { name, shape, values });
        }
        let config = cur.string()?;
        if cur.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { entries, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }
}

/// Elementwise mean of parameters with identical names and shapes. The
/// config echo of the last input is kept. Each coordinate is summed in
/// sorted order, so the result does not depend on input order.
pub fn average_checkpoints(inputs: &[Checkpoint]) -> Result<Checkpoint, CheckpointError> {
    let last = inputs.last().ok_or(CheckpointError::Empty)?;
    let first = &inputs[0];
    for ck in inputs {
        if ck.entries.len() != first.entries.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} vs {} parameters",
                ck.entries.len(),
                first.entries.len()
            )));
        }
        for (a, b) in ck.entries.iter().zip(&first.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(CheckpointError::Mismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
    }
    let n = inputs.len() as f64;
    let mut column = vec![0.0f64; inputs.len()];
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(ei, e)| {
            let values = (0..e.values.len())
                .map(|i| {
                    for (slot, ck) in column.iter_mut().zip(inputs) {
                        *slot = f64::from(ck.entries[ei].values[i]);
                    }
                    column.sort_unstable_by(f64::total_cmp);
                    (column.iter().sum::<f64>() / n) as f32
                })
                .collect();
            CheckpointEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values,
            }
        })
        .collect();
    Ok(Checkpoint {
        entries,
        config: last.config.clone(),
    })
}
