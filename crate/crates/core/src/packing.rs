//! `SKQ1`: bit-exact storage for a mixed-precision quantized layer.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic "SKQ1" | version u16 | n u32 | m u32 | b_min u8 | b_max u8
//! bits[n] u8                 (original row order)
//! permutation[n] u32         (packed position -> original row)
//! alpha[m] f32
//! for b in b_min..=b_max:
//!     rows u32
//!     codebooks  rows x 2^b x f16
//!     labels     ceil(rows * m * b / 32) x u32
//! crc32 u32                  (of every preceding byte)
//! ```
//!
//! Rows are grouped by bit width, ascending, and keep their original order
//! inside a group. Within a group the labels form one continuous bit
//! stream: row-major, `b` bits per label, least significant bit first,
//! packed into 32-bit words with the last word zero-padded. Labels may
//! straddle word boundaries.

use half::f16;

use crate::allocation::check_bit_range;
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::scaling::{Codebooks, LabelMatrix, ScalingVector};

pub const PACK_MAGIC: [u8; 4] = *b"SKQ1";
pub const PACK_VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 1 + 1;

/// A quantized layer as stored: half-precision codebooks padded to exactly
/// `2^bits[i]` entries per row and a single-precision scaling vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub n: usize,
    pub m: usize,
    pub b_min: u8,
    pub b_max: u8,
    pub bits: Vec<u8>,
    pub labels: LabelMatrix,
    pub codebooks: Vec<Vec<f16>>,
    pub alpha: Vec<f32>,
}

impl QuantizedLayer {
    /// Rounds full-precision codebooks to binary16 (nearest, ties to even)
    /// and pads each row by repeating its last centroid.
    pub fn new(
        b_min: u8,
        b_max: u8,
        bits: Vec<u8>,
        labels: LabelMatrix,
        codebooks: &Codebooks,
        alpha: &ScalingVector,
    ) -> Result<Self> {
        let (n, m) = labels.shape();
        if codebooks.rows.len() != n || bits.len() != n {
            return Err(shape_err(format!(
                "{} codebook rows and {} bit widths for {n} label rows",
                codebooks.rows.len(),
                bits.len()
            )));
        }
        let mut books = Vec::with_capacity(n);
        for (i, (row, &b)) in codebooks.rows.iter().zip(&bits).enumerate() {
            let size = 1usize << b;
            if row.is_empty() || row.len() > size {
                return Err(Error::InvalidArgument(format!(
                    "row {i}: {} centroids do not fit {b} bits",
                    row.len()
                )));
            }
            let mut h: Vec<f16> = row.iter().map(|&c| f16::from_f64(c)).collect();
            let last = *h.last().unwrap();
            h.resize(size, last);
            books.push(h);
        }
        let layer = QuantizedLayer {
            n,
            m,
            b_min,
            b_max,
            bits,
            labels,
            codebooks: books,
            alpha: alpha.as_slice().iter().map(|&a| a as f32).collect(),
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        check_bit_range(self.b_min, self.b_max)?;
        if self.bits.len() != self.n || self.codebooks.len() != self.n || self.alpha.len() != self.m {
            return Err(shape_err("bits, codebooks and alpha must match the layer shape"));
        }
        if self.labels.shape() != (self.n, self.m) {
            return Err(shape_err(format!("labels {:?} for a {}x{} layer", self.labels.shape(), self.n, self.m)));
        }
        for (i, &b) in self.bits.iter().enumerate() {
            if b < self.b_min || b > self.b_max {
                return Err(Error::Format(format!(
                    "row {i} has {b} bits outside [{}, {}]",
                    self.b_min, self.b_max
                )));
            }
            if self.codebooks[i].len() != 1usize << b {
                return Err(Error::Format(format!(
                    "row {i}: codebook has {} entries, expected {}",
                    self.codebooks[i].len(),
                    1usize << b
                )));
            }
            if let Some(c) = self.codebooks[i].iter().find(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("row {i}: centroid {c} not representable in binary16")));
            }
            if let Some(&l) = self.labels.row(i).iter().find(|&&l| (l as usize) >= 1usize << b) {
                return Err(Error::Format(format!("row {i}: label {l} does not fit {b} bits")));
            }
        }
        if let Some(a) = self.alpha.iter().find(|a| !a.is_finite() || **a <= 0.0) {
            return Err(Error::InvalidArgument(format!("scale {a} must be finite and positive")));
        }
        Ok(())
    }

    /// Packed position -> original row: ascending bit width, stable.
    pub fn permutation(&self) -> Vec<u32> {
        permutation_for(&self.bits)
    }

    pub fn average_bits(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.n as f64
    }
}

fn permutation_for(bits: &[u8]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..bits.len() as u32).collect();
    order.sort_by_key(|&i| bits[i as usize]);
    order
}

/// Bytes in the `SKQ1` layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBlob(pub Vec<u8>);

impl PackedBlob {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }
}

fn label_words(rows: usize, m: usize, bits: u8) -> usize {
    rows.saturating_mul(m).saturating_mul(bits as usize).div_ceil(32)
}

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    filled: u32,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut Vec<u8>) -> Self {
        BitWriter { out, acc: 0, filled: 0 }
    }

    fn push(&mut self, value: u32, bits: u8) {
        self.acc |= (value as u64) << self.filled;
        self.filled += bits as u32;
        if self.filled >= 32 {
            self.out.extend_from_slice(&(self.acc as u32).to_le_bytes());
            self.acc >>= 32;
            self.filled -= 32;
        }
    }

    fn finish(self) {
        if self.filled > 0 {
            self.out.extend_from_slice(&(self.acc as u32).to_le_bytes());
        }
    }
}

pub fn pack(layer: &QuantizedLayer) -> Result<PackedBlob> {
    layer.validate()?;
    let (n, m) = (layer.n, layer.m);
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(&PACK_MAGIC);
    out.extend_from_slice(&PACK_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(n, "row count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m, "column count")?.to_le_bytes());
    out.push(layer.b_min);
    out.push(layer.b_max);
    out.extend_from_slice(&layer.bits);
    let perm = layer.permutation();
    for p in &perm {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for a in &layer.alpha {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for b in layer.b_min..=layer.b_max {
        let group: Vec<usize> = perm.iter().map(|&p| p as usize).filter(|&i| layer.bits[i] == b).collect();
        out.extend_from_slice(&(group.len() as u32).to_le_bytes());
        for &i in &group {
            for c in &layer.codebooks[i] {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        let mut w = BitWriter::new(&mut out);
        for &i in &group {
            for &l in layer.labels.row(i) {
                w.push(l, b);
            }
        }
        w.finish();
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(PackedBlob(out))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "{what}: need {len} bytes at offset {}, blob has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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
}

pub fn unpack(blob: &PackedBlob) -> Result<QuantizedLayer> {
    let bytes = blob.as_bytes();
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != PACK_MAGIC {
        return Err(Error::BadMagic { expected: PACK_MAGIC, found: magic });
    }
    let version = r.u16("version")?;
    if version != PACK_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.u32("row count")? as usize;
    let m = r.u32("column count")? as usize;
    let b_min = r.u8("b_min")?;
    let b_max = r.u8("b_max")?;
    check_bit_range(b_min, b_max).map_err(|e| Error::Format(e.to_string()))?;
    // every weight needs at least b_min bits; reject absurd headers before allocating
    let min_label_bytes = n.saturating_mul(m).saturating_mul(b_min as usize) / 8;
    if min_label_bytes > bytes.len() {
        return Err(Error::Truncated(format!(
            "a {n}x{m} layer needs at least {min_label_bytes} label bytes, blob has {}",
            bytes.len()
        )));
    }
    let bits = r.take(n, "bit allocation")?.to_vec();
    let perm: Vec<u32> = r
        .take(n.checked_mul(4).ok_or_else(|| Error::Format("row count overflows".into()))?, "permutation")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let alpha: Vec<f32> = r
        .take(m.checked_mul(4).ok_or_else(|| Error::Format("column count overflows".into()))?, "alpha")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut codebooks: Vec<Vec<f16>> = vec![Vec::new(); n];
    let mut labels = vec![0u32; n * m];
    let mut position = 0usize;
    for b in b_min..=b_max {
        let rows = r.u32("group row count")? as usize;
        if position + rows > n {
            return Err(Error::Format(format!("bit groups list more than {n} rows")));
        }
        let members = &perm[position..position + rows];
        let size = 1usize << b;
        let raw = r.take(rows.saturating_mul(size * 2), "codebooks")?;
        for (k, &orig) in members.iter().enumerate() {
            let orig = orig as usize;
            if orig >= n {
                return Err(Error::Format(format!("permutation entry {orig} out of range")));
            }
            codebooks[orig] = raw[k * size * 2..(k + 1) * size * 2]
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]))
                .collect();
        }
        let words = r.take(label_words(rows, m, b).saturating_mul(4), "label words")?;
        let mask = (1u64 << b) - 1;
        let mut bitpos = 0usize;
        for &orig in members {
            for j in 0..m {
                let word = bitpos / 32;
                let shift = bitpos % 32;
                let lo = u32::from_le_bytes(words[word * 4..word * 4 + 4].try_into().unwrap()) as u64;
                let hi = if shift + b as usize > 32 {
                    (u32::from_le_bytes(words[word * 4 + 4..word * 4 + 8].try_into().unwrap()) as u64) << 32
                } else {
                    0
                };
                labels[orig as usize * m + j] = (((lo | hi) >> shift) & mask) as u32;
                bitpos += b as usize;
            }
        }
        position += rows;
    }
    if position != n {
        return Err(Error::Format(format!("bit groups cover {position} of {n} rows")));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if perm != permutation_for(&bits) {
        return Err(Error::Format("row permutation does not group rows by bit width".into()));
    }

    let layer = QuantizedLayer { n, m, b_min, b_max, bits, labels: LabelMatrix::new(n, m, labels)?, codebooks, alpha };
    layer.validate()?;
    Ok(layer)
}

/// `Wq[i][j] = f64(codebook[i][label]) * f64(alpha[j])`.
pub fn dequantize(layer: &QuantizedLayer) -> Result<Matrix> {
    layer.validate()?;
    let mut out = Matrix::zeros(layer.n, layer.m);
    for i in 0..layer.n {
        let book = &layer.codebooks[i];
        let row = out.row_mut(i);
        for (j, &l) in layer.labels.row(i).iter().enumerate() {
            row[j] = book[l as usize].to_f64() * layer.alpha[j] as f64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SizeReport {
    pub label_bytes: usize,
    pub codebook_bytes: usize,
    pub alpha_bytes: usize,
    /// Header, allocation, permutation, group counts and checksum.
    pub overhead_bytes: usize,
    pub total_bytes: usize,
    /// `Σ bits[i] * m / (n * m)`: the average allocated width.
    pub label_bits_per_weight: f64,
    /// Every stored bit divided by the number of weights.
    pub effective_bits_per_weight: f64,
}

pub fn size_report(layer: &QuantizedLayer) -> SizeReport {
    let (n, m) = (layer.n, layer.m);
    let groups = (layer.b_max - layer.b_min + 1) as usize;
    let mut label_bytes = 0;
    let mut codebook_bytes = 0;
    for b in layer.b_min..=layer.b_max {
        let rows = layer.bits.iter().filter(|&&x| x == b).count();
        label_bytes += label_words(rows, m, b) * 4;
        codebook_bytes += rows * (1usize << b) * 2;
    }
    let alpha_bytes = 4 * m;
    let overhead_bytes = HEADER_BYTES + n + 4 * n + 4 * groups + 4;
    let total_bytes = label_bytes + codebook_bytes + alpha_bytes + overhead_bytes;
    let weights = (n * m).max(1) as f64;
    let logical_label_bits: f64 = layer.bits.iter().map(|&b| b as f64 * m as f64).sum();
    SizeReport {
        label_bytes,
        codebook_bytes,
        alpha_bytes,
        overhead_bytes,
        total_bytes,
        label_bits_per_weight: logical_label_bits / weights,
        effective_bits_per_weight: total_bytes as f64 * 8.0 / weights,
    }
}
