//! Bit-exact serialization of quantized distilled datasets (`.qadd`).
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "QADD" | version u8 | m u32 | d u32 | classes u32
//! kind u8 | bits u8 | k u8 | alpha f64 | gamma f64 | level_count u16
//! norm_len u32 | norm payload (channels u32, then mean/denom f64 pairs)
//! labels   — ceil(log2(classes)) bits each, LSB-first, byte-aligned block
//! payload  — ceil(log2(level_count)) bits per element, LSB-first,
//!            final byte zero-padded
//! ```
//!
//! Payload bit count is exactly `m * d * ceil(log2(level_count))`, which
//! makes the storage budget physically auditable.

use crate::distill::{DistilledDataset, Provenance};
use crate::error::{Error, Result};
use crate::quant::{NormStats, QuantKind, QuantizerSpec};

pub const PACK_MAGIC: [u8; 4] = *b"QADD";
pub const PACK_VERSION: u8 = 1;

/// Tolerance for accepting a stored sample as a codebook level.
const ON_CODEBOOK_TOL: f64 = 1e-9;

/// Storage budget of Eq.-style accounting: `M * D * b` bits.
pub fn bit_budget(m: u64, d: u64, bits: u64) -> u64 {
    m * d * bits
}

/// Bits needed to index `n` distinct values.
pub fn index_width(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - ((n - 1) as u64).leading_zeros()
    }
}

fn kind_to_byte(kind: QuantKind) -> u8 {
    match kind {
        QuantKind::UniformSte => 0,
        QuantKind::UniformFsq => 1,
        QuantKind::UniformAun => 2,
        QuantKind::Apot => 3,
        QuantKind::Passthrough => 0xff,
    }
}

fn kind_from_byte(b: u8) -> Result<QuantKind> {
    match b {
        0 => Ok(QuantKind::UniformSte),
        1 => Ok(QuantKind::UniformFsq),
        2 => Ok(QuantKind::UniformAun),
        3 => Ok(QuantKind::Apot),
        other => Err(Error::CorruptHeader(format!(
            "unknown quantizer kind byte {other:#04x}"
        ))),
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    /// Appends the low `width` bits of `value`, LSB-first within bytes.
    fn push(&mut self, value: u64, width: u32) {
        for i in 0..width {
            let byte_idx = self.bit / 8;
            if byte_idx == self.bytes.len() {
                self.bytes.push(0);
            }
            let bit = ((value >> i) & 1) as u8;
            self.bytes[byte_idx] |= bit << (self.bit % 8);
            self.bit += 1;
        }
    }

    fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, bit: 0 }
    }

    fn read(&mut self, width: u32) -> Result<u64> {
        let end = self.bit + width as usize;
        if end > self.bytes.len() * 8 {
            return Err(Error::Truncated {
                needed: end.div_ceil(8),
                found: self.bytes.len(),
            });
        }
        let mut value = 0u64;
        for i in 0..width {
            let b = (self.bytes[self.bit / 8] >> (self.bit % 8)) & 1;
            value |= (b as u64) << i;
            self.bit += 1;
        }
        let _ = end;
        Ok(value)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                needed: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn norm_block(stats: &Option<NormStats>) -> Vec<u8> {
    match stats {
        None => Vec::new(),
        Some(s) => {
            let mut out = Vec::with_capacity(4 + s.mean.len() * 16);
            out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
            for (m, d) in s.mean.iter().zip(&s.denom) {
                out.extend_from_slice(&m.to_le_bytes());
                out.extend_from_slice(&d.to_le_bytes());
            }
            out
        }
    }
}

fn header_bytes(ds: &DistilledDataset, gamma: f64, level_count: usize) -> Vec<u8> {
    let norm = norm_block(&ds.norm_stats);
    let mut out = Vec::with_capacity(42 + norm.len());
    out.extend_from_slice(&PACK_MAGIC);
    out.push(PACK_VERSION);
    out.extend_from_slice(&(ds.m as u32).to_le_bytes());
    out.extend_from_slice(&(ds.d as u32).to_le_bytes());
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    out.push(kind_to_byte(ds.spec.kind));
    out.push(ds.spec.bits);
    out.push(if ds.spec.kind == QuantKind::Apot {
        ds.spec.apot_base_bits
    } else {
        0
    });
    out.extend_from_slice(&ds.spec.alpha.to_le_bytes());
    out.extend_from_slice(&gamma.to_le_bytes());
    out.extend_from_slice(&(level_count as u16).to_le_bytes());
    out.extend_from_slice(&(norm.len() as u32).to_le_bytes());
    out.extend_from_slice(&norm);
    out
}

/// Serializes a discretized dataset. Stored samples must already lie on
/// the spec's codebook; off-codebook values are refused rather than
/// silently re-projected.
pub fn pack(ds: &DistilledDataset) -> Result<Vec<u8>> {
    if ds.spec.kind == QuantKind::Passthrough {
        return Err(Error::PassthroughPack);
    }
    ds.spec.validate()?;
    let cb = ds.spec.codebook()?;
    let gamma = ds.spec.gamma()?;
    let mut out = header_bytes(ds, gamma, cb.len());

    let label_width = index_width(ds.classes);
    let mut labels = BitWriter::new();
    for &l in &ds.labels {
        labels.push(l as u64, label_width);
    }
    out.extend_from_slice(&labels.into_bytes());

    let w = index_width(cb.len());
    let mut payload = BitWriter::new();
    for (i, &v) in ds.samples.iter().enumerate() {
        let idx = cb
            .index_of(v, ON_CODEBOOK_TOL)
            .ok_or_else(|| {
                let nearest = cb.project(v);
                Error::OffCodebook {
                    sample: i / ds.d,
                    element: i % ds.d,
                    value: v,
                    residual: (v - nearest).abs(),
                }
            })?;
        payload.push(idx as u64, w);
    }
    out.extend_from_slice(&payload.into_bytes());
    Ok(out)
}

/// Reconstructs a dataset from `.qadd` bytes. The codebook is rebuilt from
/// the header parameters; stored gamma and level count must agree with the
/// reconstruction.
pub fn unpack(bytes: &[u8]) -> Result<DistilledDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != PACK_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = cur.u8()?;
    if version != PACK_VERSION {
        return Err(Error::BadVersion(version));
    }
    let m = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let classes = cur.u32()? as usize;
    let kind = kind_from_byte(cur.u8()?)?;
    let bits = cur.u8()?;
    let k = cur.u8()?;
    let alpha = cur.f64()?;
    let gamma = cur.f64()?;
    let level_count = cur.u16()? as usize;
    let norm_len = cur.u32()? as usize;
    let norm = cur.take(norm_len)?;
    let norm_stats = if norm_len == 0 {
        None
    } else {
        let mut nc = Cursor {
            bytes: norm,
            pos: 0,
        };
        let channels = nc.u32()? as usize;
        if norm_len != 4 + channels * 16 {
            return Err(Error::CorruptHeader(format!(
                "normalization block length {norm_len} does not match {channels} channels"
            )));
        }
        let mut mean = Vec::with_capacity(channels);
        let mut denom = Vec::with_capacity(channels);
        for _ in 0..channels {
            mean.push(nc.f64()?);
            denom.push(nc.f64()?);
        }
        Some(NormStats { mean, denom })
    };

    let mut spec = match kind {
        QuantKind::Apot => QuantizerSpec::apot(bits, k, alpha),
        kind => QuantizerSpec::new(kind, bits, alpha),
    };
    spec.normalize = norm_stats.is_some();
    spec.validate()
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let cb = spec.codebook()?;
    if cb.len() != level_count {
        return Err(Error::CorruptHeader(format!(
            "level count {level_count} does not match reconstructed codebook of {}",
            cb.len()
        )));
    }
    let recomputed_gamma = spec.gamma()?;
    if (recomputed_gamma - gamma).abs() > 1e-12 {
        return Err(Error::CorruptHeader(format!(
            "stored gamma {gamma} does not match derived {recomputed_gamma}"
        )));
    }

    let label_width = index_width(classes);
    let label_bytes = (m * label_width as usize).div_ceil(8);
    let mut labels = Vec::with_capacity(m);
    {
        let mut reader = BitReader::new(cur.take(label_bytes)?);
        for _ in 0..m {
            let l = reader.read(label_width)? as usize;
            if l >= classes {
                return Err(Error::CorruptHeader(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            labels.push(l);
        }
    }

    let w = index_width(cb.len());
    let payload_bytes = (m * d * w as usize).div_ceil(8);
    let mut samples = Vec::with_capacity(m * d);
    {
        let mut reader = BitReader::new(cur.take(payload_bytes)?);
        for _ in 0..m * d {
            let idx = reader.read(w)? as usize;
            if idx >= cb.len() {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    levels: cb.len(),
                });
            }
            samples.push(cb.levels()[idx]);
        }
    }

    Ok(DistilledDataset {
        samples,
        m,
        d,
        classes,
        labels,
        spec,
        norm_stats,
        discretized: true,
        provenance: Provenance {
            config_hash: 0,
            seed: 0,
        },
    })
}

/// Exact bit accounting of a dataset's serialized form (unpadded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitCounts {
    pub payload_bits: u64,
    pub label_bits: u64,
    pub header_bits: u64,
    pub total_bits: u64,
    /// Stored index width per element.
    pub index_width: u32,
}

/// Bit counts of the packed form. Payload bits are the Eq.-style budget
/// `m * d * ceil(log2(level_count))`; labels and header are reported
/// separately and `include_header` controls whether the header joins the
/// total. Pass-through datasets are accounted at native 64-bit width.
pub fn measure_bits(ds: &DistilledDataset, include_header: bool) -> Result<BitCounts> {
    let (w, level_count) = match ds.spec.kind {
        QuantKind::Passthrough => (64u32, 0usize),
        _ => {
            let cb = ds.spec.codebook()?;
            (index_width(cb.len()), cb.len())
        }
    };
    let payload_bits = bit_budget(ds.m as u64, ds.d as u64, w as u64);
    let label_bits = ds.m as u64 * index_width(ds.classes) as u64;
    let header_bits = if ds.spec.kind == QuantKind::Passthrough {
        0
    } else {
        8 * header_bytes(ds, ds.spec.gamma()?, level_count).len() as u64
    };
    let total_bits = payload_bits + label_bits + if include_header { header_bits } else { 0 };
    Ok(BitCounts {
        payload_bits,
        label_bits,
        header_bits,
        total_bits,
        index_width: w,
    })
}
