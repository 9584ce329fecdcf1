//! `MDP1` checkpoint format.
//!
//! ```text
//! magic   "MDP1"
//! repeated until EOF:
//!   u32   name length in bytes
//!   [u8]  name (UTF-8)
//!   u32   rank
//!   u32   dim × rank
//!   f64   value × product(dims)
//! ```
//!
//! All integers and floats are little-endian. Values are always stored as
//! doubles regardless of the model's element type.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDP1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::format("checkpoint", format!("{what} {v} exceeds u32")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for e in &self.entries {
            let expected: usize = e.shape.iter().product();
            if expected != e.values.len() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "{}: shape {:?} vs {} values",
                        e.name,
                        e.shape,
                        e.values.len()
                    ),
                ));
            }
            out.extend_from_slice(&u32_of(e.name.len(), "name length")?);
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&u32_of(e.shape.len(), "rank")?);
            for &d in &e.shape {
                out.extend_from_slice(&u32_of(d, "dimension")?);
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic, expected MDP1"));
        }
        let mut entries = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::format("checkpoint", format!("parameter name: {e}")))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = cur.take(count.checked_mul(8).ok_or_else(|| {
                Error::format("checkpoint", format!("{name}: shape {shape:?} overflows"))
            })?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CheckpointEntry {
                name,
                shape,
                values,
            });
        }
        Ok(Checkpoint { entries })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format("checkpoint", format!("truncated at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
