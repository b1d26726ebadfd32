//! IDX container format: big-endian, magic `00 00 <type> <ndims>` followed by
//! `ndims` u32 dimensions and the payload. Only unsigned-byte data (`0x08`)
//! is accepted.

use std::path::Path;

use super::RawBatch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Length {
            expected: 4,
            found: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(format!(
            "bad IDX magic {:02x} {:02x}",
            bytes[0], bytes[1]
        )));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!(
            "unsupported IDX data type 0x{:02x} (only unsigned bytes)",
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::Format("IDX file declares zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Length {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let expected = header + count;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..expected].to_vec(),
    })
}

impl IdxArray {
    /// First dimension is the item count; the rest are flattened row-major
    /// and scaled from bytes to [0, 1].
    pub fn into_batch(self) -> Result<RawBatch> {
        let n = self.dims[0];
        if self.dims.len() == 1 {
            let labels: Vec<usize> = self.data.iter().map(|&b| b as usize).collect();
            let samples = self.data.iter().map(|&b| vec![f64::from(b)]).collect();
            return RawBatch::new(samples)?.with_labels(labels);
        }
        let width: usize = self.dims[1..].iter().product();
        let samples = if width == 0 {
            vec![Vec::new(); n]
        } else {
            self.data
                .chunks_exact(width)
                .map(|c| c.iter().map(|&b| f64::from(b) / 255.0).collect())
                .collect()
        };
        let mut batch = RawBatch::new(samples)?;
        if self.dims.len() == 3 {
            batch.image_shape = Some((self.dims[1], self.dims[2]));
        }
        Ok(batch)
    }
}

/// Reads an IDX file. Image files (two or more dimensions) give one vector per
/// item; one-dimensional label files give one raw scalar per item, also
/// exposed as `labels`.
pub fn load_idx(path: impl AsRef<Path>) -> Result<RawBatch> {
    parse_idx(&std::fs::read(path)?)?.into_batch()
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let arr = parse_idx(&std::fs::read(path)?)?;
    if arr.dims.len() != 1 {
        return Err(Error::Format(format!(
            "label file must be one-dimensional, found {} dimensions",
            arr.dims.len()
        )));
    }
    Ok(arr.data.iter().map(|&b| b as usize).collect())
}

/// Image file plus matching label file.
pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<RawBatch> {
    load_idx(images)?.with_labels(load_idx_labels(labels)?)
}
