//! In-memory labelled dataset and its `MDPD` file format.
//!
//! ```text
//! magic   "MDPD"
//! u32     n        rows
//! u32     d        features per row
//! u32     classes
//! f64     n×d features, row-major
//! u32     n labels
//! ```
//!
//! Everything little-endian. The same encoding carries shards through
//! [`Communicator::scatter`](crate::comm::Communicator::scatter).

use std::fs;
use std::ops::Range;
use std::path::Path;

pub mod synth;

use crate::autograd::Tensor;
use crate::element::Element;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MDPD";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    dims: usize,
    n_classes: usize,
}

impl Dataset {
    /// Validates shapes and label range. Zero rows is allowed here because a
    /// shard may legitimately be empty; [`Dataset::load`] rejects empty files.
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u32>,
        dims: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if dims == 0 {
            return Err(Error::Config("dataset needs at least one feature".into()));
        }
        if features.len() != labels.len() * dims {
            return Err(Error::Shape {
                op: "Dataset::new",
                lhs: vec![features.len()],
                rhs: vec![labels.len(), dims],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Index {
                op: "Dataset::new",
                index: bad as usize,
                bound: n_classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            dims,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dims);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            dims: self.dims,
            n_classes: self.n_classes,
        }
    }

    /// Rows `range` as an input tensor and label vector.
    pub fn batch<T: Element>(&self, range: Range<usize>) -> Result<(Tensor<T>, Vec<usize>)> {
        if range.end > self.len() || range.start > range.end {
            return Err(Error::Index {
                op: "Dataset::batch",
                index: range.end,
                bound: self.len(),
            });
        }
        let x = self.features[range.start * self.dims..range.end * self.dims]
            .iter()
            .map(|&v| T::from_f64(v))
            .collect();
        let labels = self.labels[range.clone()]
            .iter()
            .map(|&l| l as usize)
            .collect();
        Ok((Tensor::from_vec(vec![range.len(), self.dims], x)?, labels))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.features.len() * 8 + self.labels.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::format("dataset", detail);
        if bytes.len() < 16 || &bytes[..4] != DATASET_MAGIC {
            return Err(bad("bad magic, expected MDPD".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (n, d, classes) = (word(4), word(8), word(12));
        let feat_bytes = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| bad(format!("{n}×{d} overflows")))?;
        let expected = 16 + feat_bytes + n * 4;
        if bytes.len() != expected {
            return Err(bad(format!(
                "{n}×{d} dataset needs {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let features = bytes[16..16 + feat_bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = bytes[16 + feat_bytes..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dataset::new(features, labels, d, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads an `MDPD` file; an empty dataset is a configuration error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ds = Self::from_bytes(&fs::read(path)?)?;
        if ds.is_empty() {
            return Err(Error::Config(format!(
                "dataset {} is empty",
                path.display()
            )));
        }
        Ok(ds)
    }
}
