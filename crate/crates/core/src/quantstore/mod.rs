//! Per-dimension 8-bit quantization of embeddings and the key-value store
//! that holds quantized document vectors.
//!
//! Store file layout (little-endian):
//!
//! ```text
//! magic "PEMB" | u32 version | u32 dim | u64 count
//! dim × f64 s_min | dim × f64 s_max | dim × f64 Q
//! count × (u64 doc_id | u8 index[dim])      sorted by doc_id
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{BinReader, BinWriter};
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Number of equal intervals the calibrated range is divided into.
pub const LEVELS: u32 = 255;

const MAGIC: &[u8; 4] = b"PEMB";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationParams<T> {
    pub s_min: Vec<T>,
    pub s_max: Vec<T>,
    /// Interval length `(s_max - s_min) / 255` per dimension.
    pub q: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuantizedVector {
    pub indices: Vec<u8>,
}

impl<T: Scalar> QuantizationParams<T> {
    pub fn new(s_min: Vec<T>, s_max: Vec<T>) -> Result<Self> {
        if s_min.len() != s_max.len() || s_min.is_empty() {
            return Err(Error::Shape("s_min and s_max must have the same non-zero length".into()));
        }
        if let Some(i) = (0..s_min.len()).find(|&i| !(s_max[i] > s_min[i]) || !(s_max[i] - s_min[i]).is_finite()) {
            return contract(format!("dimension {} has an empty or non-finite range", i));
        }
        let levels = T::of(LEVELS as f64);
        let q = s_min.iter().zip(&s_max).map(|(lo, hi)| (*hi - *lo) / levels).collect();
        Ok(Self { s_min, s_max, q })
    }

    pub fn dim(&self) -> usize {
        self.s_min.len()
    }

    pub fn levels(&self) -> u32 {
        LEVELS
    }
}

/// Per-dimension min/max over a sample. Constant dimensions are widened by a
/// small epsilon; their indices are returned alongside the parameters.
pub fn calibrate<T: Scalar>(vectors: &[Vec<T>]) -> Result<(QuantizationParams<T>, Vec<usize>)> {
    let Some(first) = vectors.first() else {
        return contract("calibration needs at least one vector");
    };
    let dim = first.len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("calibration vectors must share a non-zero dimension".into()));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in calibration sample".into()));
    }
    let mut s_min = first.clone();
    let mut s_max = first.clone();
    for v in &vectors[1..] {
        for i in 0..dim {
            s_min[i] = s_min[i].min(v[i]);
            s_max[i] = s_max[i].max(v[i]);
        }
    }
    let mut widened = Vec::new();
    for i in 0..dim {
        if !(s_max[i] > s_min[i]) {
            let eps = T::of(1e-6) * T::one().max(s_min[i].abs());
            s_min[i] -= eps;
            s_max[i] += eps;
            widened.push(i);
        }
    }
    Ok((QuantizationParams::new(s_min, s_max)?, widened))
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("vector of width {} for {}-dimensional params", got, want)));
    }
    Ok(())
}

/// `QI = ⌊(r - s_min) / Q⌋`, clamped to `0..=255`. Values at or above `s_max`
/// map to 255 even when rounding leaves the quotient just under it.
pub fn quantize<T: Scalar>(v: &[T], p: &QuantizationParams<T>) -> Result<QuantizedVector> {
    check_dim(v.len(), p.dim())?;
    let top = T::of(LEVELS as f64);
    let indices = v
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if r >= p.s_max[i] {
                return LEVELS as u8;
            }
            let qi = ((r - p.s_min[i]) / p.q[i]).floor();
            if qi.is_nan() || qi <= T::zero() {
                0
            } else {
                qi.min(top).to_u8().unwrap_or(0)
            }
        })
        .collect();
    Ok(QuantizedVector { indices })
}

/// `r̃ = QI·Q + Q/2 + s_min`.
pub fn dequantize<T: Scalar>(qv: &QuantizedVector, p: &QuantizationParams<T>) -> Result<Vec<T>> {
    check_dim(qv.indices.len(), p.dim())?;
    let half = T::of(0.5);
    Ok(qv
        .indices
        .iter()
        .enumerate()
        .map(|(i, &qi)| T::of(qi as f64) * p.q[i] + p.q[i] * half + p.s_min[i])
        .collect())
}

/// Quantized document vectors keyed by doc id, sharing one set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore<T> {
    params: QuantizationParams<T>,
    entries: BTreeMap<u64, QuantizedVector>,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn new(params: QuantizationParams<T>) -> Self {
        Self {
            params,
            entries: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &QuantizationParams<T> {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn put(&mut self, doc_id: u64, qv: QuantizedVector) -> Result<()> {
        check_dim(qv.indices.len(), self.params.dim())?;
        if self.entries.contains_key(&doc_id) {
            return contract(format!("doc id {} already stored", doc_id));
        }
        self.entries.insert(doc_id, qv);
        Ok(())
    }

    /// Quantizes and stores a float embedding.
    pub fn put_embedding(&mut self, doc_id: u64, v: &[T]) -> Result<()> {
        let qv = quantize(v, &self.params)?;
        self.put(doc_id, qv)
    }

    pub fn get(&self, doc_id: u64) -> Result<&QuantizedVector> {
        self.entries
            .get(&doc_id)
            .ok_or_else(|| Error::NotFound(format!("doc id {} is not in the embedding store", doc_id)))
    }

    pub fn get_dequantized(&self, doc_id: u64) -> Result<Vec<T>> {
        dequantize(self.get(doc_id)?, &self.params)
    }

    /// Bytes one record occupies on disk: the id plus one byte per dimension.
    pub fn record_bytes(&self) -> usize {
        8 + self.params.dim()
    }

    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut w = BinWriter::new(out);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u32(self.params.dim() as u32)?;
        w.u64(self.entries.len() as u64)?;
        for list in [&self.params.s_min, &self.params.s_max, &self.params.q] {
            for v in list {
                w.f64(v.to_f64_lossy())?;
            }
        }
        for (id, qv) in &self.entries {
            w.u64(*id)?;
            w.bytes(&qv.indices)?;
        }
        w.finish()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BinReader::new(input);
        r.header(MAGIC, VERSION)?;
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 || dim > 1 << 20 {
            return Err(Error::Format(format!("implausible dimension {}", dim)));
        }
        let mut read_vec = || (0..dim).map(|_| r.f64().map(T::of)).collect::<Result<Vec<T>>>();
        let s_min = read_vec()?;
        let s_max = read_vec()?;
        let q = read_vec()?;
        if (0..dim).any(|i| !(s_max[i] > s_min[i])) {
            return Err(Error::Format("stored range is empty".into()));
        }
        let params = QuantizationParams { s_min, s_max, q };
        let mut entries = BTreeMap::new();
        let mut last = None;
        for _ in 0..count {
            let id = r.u64()?;
            if last.is_some_and(|l| id <= l) {
                return Err(Error::Format("records are not sorted by doc id".into()));
            }
            last = Some(id);
            entries.insert(id, QuantizedVector { indices: r.bytes(dim)? });
        }
        r.expect_end()?;
        Ok(Self { params, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
