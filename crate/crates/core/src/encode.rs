//! Patch embeddings `z = f(x)` and their EMB1 interchange format.
//!
//! EMB1 layout: one JSON header line `{"magic":"EMB1","d":..,"n":..,"provenance":..}`
//! terminated by `\n`, followed by `n` records of
//! `u16 id_len | id bytes (utf-8) | u32 patch_index | u8 normal_flag | d x f32`,
//! all little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Patch, EMPHYSEMA_THRESHOLD_HU};

pub const HIST_BINS: usize = 16;
pub const HIST_LO: f64 = -1024.0;
pub const HIST_HI: f64 = 0.0;
/// Handcrafted features per channel: histogram, mean, std, LAA fraction, gradient.
pub const FEATURES_PER_CHANNEL: usize = HIST_BINS + 4;

const MAGIC: &str = "EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub patient_id: String,
    pub patch_index: u32,
    pub normal_flag: bool,
}

impl Embedding {
    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::of(f64::from(v))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Handcrafted,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub d: usize,
    pub rows: Vec<Embedding>,
    pub provenance: Provenance,
}

impl EmbeddingSet {
    pub fn new(d: usize, provenance: Provenance) -> Self {
        EmbeddingSet {
            d,
            rows: Vec::new(),
            provenance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if row.values.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: row.values.len(),
                });
            }
            if row.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "embedding ({}, {})",
                    row.patient_id, row.patch_index
                )));
            }
            if !seen.insert((row.patient_id.as_str(), row.patch_index)) {
                return Err(Error::DuplicateKey {
                    patient_id: row.patient_id.clone(),
                    patch_index: row.patch_index,
                });
            }
        }
        Ok(())
    }

    /// Rows flagged normal, converted to the model scalar.
    pub fn normal_matrix<T: Scalar>(&self) -> Vec<Vec<T>> {
        self.rows
            .iter()
            .filter(|r| r.normal_flag)
            .map(Embedding::to_scalars)
            .collect()
    }

    /// Rows grouped by patient, in order of first appearance.
    pub fn by_patient(&self) -> Vec<(&str, Vec<&Embedding>)> {
        let mut groups: Vec<(&str, Vec<&Embedding>)> = Vec::new();
        let mut slot = std::collections::HashMap::new();
        for row in &self.rows {
            let i = *slot.entry(row.patient_id.as_str()).or_insert_with(|| {
                groups.push((row.patient_id.as_str(), Vec::new()));
                groups.len() - 1
            });
            groups[i].1.push(row);
        }
        groups
    }
}

fn channel_features(values: &[f32], size: usize, out: &mut Vec<f32>) {
    let n = values.len() as f64;
    let bin_width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
    let mut hist = [0usize; HIST_BINS];
    let mut in_range = 0usize;
    let mut sum = 0.0;
    let mut below = 0usize;
    for &v in values {
        let v = f64::from(v);
        sum += v;
        if v < EMPHYSEMA_THRESHOLD_HU {
            below += 1;
        }
        if (HIST_LO..=HIST_HI).contains(&v) {
            let bin = (((v - HIST_LO) / bin_width) as usize).min(HIST_BINS - 1);
            hist[bin] += 1;
            in_range += 1;
        }
    }
    let mean = sum / n;
    let var = values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;

    // forward differences over voxels that have all three forward neighbours
    let mut grad_sum = 0.0;
    let mut grad_n = 0usize;
    if size > 1 {
        let at = |x: usize, y: usize, z: usize| f64::from(values[(z * size + y) * size + x]);
        for z in 0..size - 1 {
            for y in 0..size - 1 {
                for x in 0..size - 1 {
                    let c = at(x, y, z);
                    let dx = at(x + 1, y, z) - c;
                    let dy = at(x, y + 1, z) - c;
                    let dz = at(x, y, z + 1) - c;
                    grad_sum += (dx * dx + dy * dy + dz * dz).sqrt();
                    grad_n += 1;
                }
            }
        }
    }

    for count in hist {
        let density = if in_range == 0 {
            0.0
        } else {
            count as f64 / (in_range as f64 * bin_width)
        };
        out.push(density as f32);
    }
    out.push(mean as f32);
    out.push(var.sqrt() as f32);
    out.push((below as f64 / n) as f32);
    out.push(if grad_n == 0 {
        0.0
    } else {
        (grad_sum / grad_n as f64) as f32
    });
}

/// Deterministic texture/intensity descriptor used in place of a trained
/// encoder: per channel a 16-bin density histogram over [-1024, 0] HU, mean,
/// standard deviation, fraction below -950 HU and mean forward-difference
/// gradient magnitude.
///
/// Everything except the gradient term ignores voxel storage order.
pub fn handcrafted_features(patch: &Patch) -> Vec<f32> {
    let mut out = Vec::with_capacity(patch.channels * FEATURES_PER_CHANNEL);
    for c in 0..patch.channels {
        channel_features(patch.channel(c), patch.size, &mut out);
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    d: usize,
    n: usize,
    provenance: Provenance,
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    set.validate()?;
    let header = Header {
        magic: MAGIC.into(),
        d: set.d,
        n: set.rows.len(),
        provenance: set.provenance,
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::json("EMB1 header", e))?;
    buf.push(b'\n');
    for row in &set.rows {
        let id = row.patient_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::invalid(format!("patient id longer than {} bytes", u16::MAX)))?;
        buf.extend(len.to_le_bytes());
        buf.extend(id);
        buf.extend(row.patch_index.to_le_bytes());
        buf.push(u8::from(row.normal_flag));
        for v in &row.values {
            buf.extend(v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn truncated() -> Error {
    Error::Format("payload size mismatch".into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(truncated());
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("EMB1 header line missing".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::json("EMB1 header", e))?;
    if header.magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected {MAGIC}", header.magic)));
    }
    let mut cur = Cursor {
        bytes: &bytes[newline + 1..],
    };
    let mut rows = Vec::with_capacity(header.n.min(1 << 20));
    for _ in 0..header.n {
        let len = u16::from_le_bytes(cur.array()?) as usize;
        let patient_id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("patient id is not utf-8".into()))?
            .to_string();
        let patch_index = u32::from_le_bytes(cur.array()?);
        let normal_flag = match cur.array::<1>()?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("normal flag must be 0 or 1, found {other}"))),
        };
        let values = cur
            .take(header.d * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        rows.push(Embedding {
            values,
            patient_id,
            patch_index,
            normal_flag,
        });
    }
    if !cur.bytes.is_empty() {
        return Err(truncated());
    }
    let set = EmbeddingSet {
        d: header.d,
        rows,
        provenance: header.provenance,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embeddings(set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}
