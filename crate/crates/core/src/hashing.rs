//! Binary codes: threshold binarization, Gaussian LSH, bit packing and the
//! on-disk code and feature file formats.
//!
//! Bit `k` of a code lives in byte `k / 8` at bit position `k % 8`
//! (least-significant first). Unused high bits of the last byte are zero.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const CODE_MAGIC: &[u8; 4] = b"CBH1";
pub const FEATURE_MAGIC: &[u8; 4] = b"CBHF";
const FORMAT_VERSION: u16 = 1;
const NO_LABEL: u16 = 0xFFFF;

#[derive(Debug, Error)]
pub enum HashError {
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("code {index} has {got} bits, expected {expected}")]
    Ragged { index: usize, expected: usize, got: usize },
    #[error("sizes must be at least 1")]
    ZeroSize,
    #[error("{0} parallel sequences differ in length")]
    Parallel(&'static str),
    #[error("packed code has {got} bytes, {expected} needed, or non-zero pad bits")]
    BadPacking { expected: usize, got: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported format version {0}")]
    Version(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    bytes: Vec<u8>,
    len: usize,
}

impl BinaryCode {
    pub fn zeros(len: usize) -> Self {
        BinaryCode {
            bytes: vec![0; len.div_ceil(8)],
            len,
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (k, &b) in bits.iter().enumerate() {
            if b {
                code.bytes[k / 8] |= 1 << (k % 8);
            }
        }
        code
    }

    /// Wraps packed bytes; rejects wrong byte counts and set pad bits.
    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self, HashError> {
        let expected = len.div_ceil(8);
        let pad_ok = match (len % 8, bytes.last()) {
            (0, _) | (_, None) => true,
            (r, Some(&last)) => last >> r == 0,
        };
        if bytes.len() != expected || !pad_ok {
            return Err(HashError::BadPacking {
                expected,
                got: bytes.len(),
            });
        }
        Ok(BinaryCode { bytes, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, k: usize) -> bool {
        assert!(k < self.len, "bit {k} out of range for {}-bit code", self.len);
        self.bytes[k / 8] >> (k % 8) & 1 == 1
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|k| self.bit(k)).collect()
    }

    /// The code as an integer key, bit `k` at value `1 << k`. `None` past 64 bits.
    pub fn to_u64(&self) -> Option<u64> {
        if self.len > 64 {
            return None;
        }
        let mut buf = [0u8; 8];
        buf[..self.bytes.len()].copy_from_slice(&self.bytes);
        Some(u64::from_le_bytes(buf))
    }

    pub fn from_u64(value: u64, len: usize) -> Self {
        assert!(len <= 64);
        let masked = if len == 64 { value } else { value & ((1u64 << len) - 1) };
        BinaryCode {
            bytes: masked.to_le_bytes()[..len.div_ceil(8)].to_vec(),
            len,
        }
    }

    /// `+1.0` for set bits, `-1.0` otherwise.
    pub fn to_signs(&self) -> Vec<f64> {
        (0..self.len).map(|k| if self.bit(k) { 1.0 } else { -1.0 }).collect()
    }

    pub fn complement(&self) -> Self {
        let bits: Vec<bool> = self.to_bits().iter().map(|b| !b).collect();
        Self::from_bits(&bits)
    }

    pub fn hamming(&self, other: &BinaryCode) -> Option<u32> {
        (self.len == other.len).then(|| popcount_xor(&self.bytes, &other.bytes))
    }
}

pub(crate) fn popcount_xor(a: &[u8], b: &[u8]) -> u32 {
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    let mut d = 0;
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        d += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        d += (x ^ y).count_ones();
    }
    d
}

/// Bit `k` is set iff `features[k] >= 0`.
pub fn binarize(features: &[f64]) -> Result<BinaryCode, HashError> {
    let mut code = BinaryCode::zeros(features.len());
    for (k, &x) in features.iter().enumerate() {
        if !x.is_finite() {
            return Err(HashError::NonFinite(k));
        }
        if x >= 0.0 {
            code.bytes[k / 8] |= 1 << (k % 8);
        }
    }
    Ok(code)
}

/// Feature map for the rectified L2 baseline: pushes every coordinate half
/// a unit away from zero, keeping its sign.
pub fn rectify_fc_plus(features: &[f64]) -> Vec<f64> {
    features
        .iter()
        .map(|&x| if x >= 0.0 { x + 0.5 } else { x - 0.5 })
        .collect()
}

/// Packs equal-length bit vectors into one contiguous buffer, `ceil(len/8)`
/// bytes per code.
pub fn pack_codes(codes: &[Vec<bool>]) -> Result<(Vec<u8>, usize), HashError> {
    let len = codes.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(codes.len() * len.div_ceil(8));
    for (i, c) in codes.iter().enumerate() {
        if c.len() != len {
            return Err(HashError::Ragged {
                index: i,
                expected: len,
                got: c.len(),
            });
        }
        out.extend_from_slice(BinaryCode::from_bits(c).as_bytes());
    }
    Ok((out, len))
}

pub fn unpack_codes(packed: &[u8], len: usize) -> Result<Vec<Vec<bool>>, HashError> {
    let per = len.div_ceil(8);
    if per == 0 {
        return if packed.is_empty() {
            Ok(Vec::new())
        } else {
            Err(HashError::BadPacking { expected: 0, got: packed.len() })
        };
    }
    if !packed.len().is_multiple_of(per) {
        return Err(HashError::BadPacking {
            expected: per,
            got: packed.len() % per,
        });
    }
    packed
        .chunks_exact(per)
        .map(|c| BinaryCode::from_bytes(c.to_vec(), len).map(|c| c.to_bits()))
        .collect()
}

/// Gaussian random-projection hash: `bits` rows of `dim` i.i.d. N(0, 1)
/// entries, thresholds at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LshModel {
    pub dim: usize,
    pub bits: usize,
    /// Row-major `[bits x dim]`.
    pub projections: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub seed: u64,
}

impl LshModel {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.projections[k * self.dim..(k + 1) * self.dim]
    }
}

pub fn make_lsh(dim: usize, bits: usize, seed: u64) -> Result<LshModel, HashError> {
    if dim == 0 || bits == 0 {
        return Err(HashError::ZeroSize);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projections = (0..dim * bits).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(LshModel {
        dim,
        bits,
        projections,
        thresholds: vec![0.0; bits],
        seed,
    })
}

/// Bit `k` is set iff `row_k . feature >= threshold_k`.
pub fn lsh_encode(model: &LshModel, feature: &[f64]) -> Result<BinaryCode, HashError> {
    if feature.len() != model.dim {
        return Err(HashError::DimensionMismatch {
            expected: model.dim,
            got: feature.len(),
        });
    }
    let mut code = BinaryCode::zeros(model.bits);
    for k in 0..model.bits {
        let proj: f64 = model.row(k).iter().zip(feature).map(|(a, b)| a * b).sum();
        if !proj.is_finite() {
            return Err(HashError::NonFinite(k));
        }
        if proj >= model.thresholds[k] {
            code.bytes[k / 8] |= 1 << (k % 8);
        }
    }
    Ok(code)
}

/// Codes of one length with their item ids and optional class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BinaryCodeSet {
    pub bits: usize,
    pub codes: Vec<BinaryCode>,
    pub item_ids: Vec<u32>,
    pub labels: Vec<Option<u16>>,
}

impl BinaryCodeSet {
    pub fn new(bits: usize) -> Self {
        BinaryCodeSet {
            bits,
            ..Default::default()
        }
    }

    pub fn push(&mut self, id: u32, label: Option<u16>, code: BinaryCode) -> Result<(), HashError> {
        if code.len() != self.bits {
            return Err(HashError::Ragged {
                index: self.codes.len(),
                expected: self.bits,
                got: code.len(),
            });
        }
        self.codes.push(code);
        self.item_ids.push(id);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn validate(&self) -> Result<(), HashError> {
        if self.item_ids.len() != self.codes.len() || self.labels.len() != self.codes.len() {
            return Err(HashError::Parallel("code set"));
        }
        for (i, c) in self.codes.iter().enumerate() {
            if c.len() != self.bits {
                return Err(HashError::Ragged {
                    index: i,
                    expected: self.bits,
                    got: c.len(),
                });
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), HashError> {
        self.validate()?;
        w.write_all(CODE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.bits as u32).to_le_bytes())?;
        for ((code, id), label) in self.codes.iter().zip(&self.item_ids).zip(&self.labels) {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&label.unwrap_or(NO_LABEL).to_le_bytes())?;
            w.write_all(code.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, HashError> {
        let (count, bits) = read_header(&mut r, CODE_MAGIC, "code")?;
        let mut set = BinaryCodeSet::new(bits);
        let mut bytes = vec![0u8; bits.div_ceil(8)];
        for _ in 0..count {
            let (id, label) = read_item_header(&mut r)?;
            r.read_exact(&mut bytes)?;
            set.push(id, label, BinaryCode::from_bytes(bytes.clone(), bits)?)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), HashError> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, HashError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Real-valued feature vectors (row-major) with ids and optional labels.
///
/// File layout mirrors the code file: magic `"CBHF"`, u16 version, u32
/// count, u32 dim, then per item u32 id, u16 label, `dim` little-endian f64.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub dim: usize,
    pub values: Vec<f64>,
    pub item_ids: Vec<u32>,
    pub labels: Vec<Option<u16>>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        FeatureSet {
            dim,
            ..Default::default()
        }
    }

    pub fn push(&mut self, id: u32, label: Option<u16>, feature: &[f64]) -> Result<(), HashError> {
        if feature.len() != self.dim {
            return Err(HashError::DimensionMismatch {
                expected: self.dim,
                got: feature.len(),
            });
        }
        self.values.extend_from_slice(feature);
        self.item_ids.push(id);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim.max(1)).take(self.len())
    }

    pub fn map_rows(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> FeatureSet {
        let mut out = FeatureSet::new(self.dim);
        for (i, row) in self.rows().enumerate() {
            out.push(self.item_ids[i], self.labels[i], &f(row)).expect("same dim");
        }
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), HashError> {
        if self.values.len() != self.len() * self.dim || self.labels.len() != self.len() {
            return Err(HashError::Parallel("feature set"));
        }
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (i, row) in self.rows().enumerate() {
            w.write_all(&self.item_ids[i].to_le_bytes())?;
            w.write_all(&self.labels[i].unwrap_or(NO_LABEL).to_le_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, HashError> {
        let (count, dim) = read_header(&mut r, FEATURE_MAGIC, "feature")?;
        let mut set = FeatureSet::new(dim);
        let mut row = vec![0.0; dim];
        let mut b = [0u8; 8];
        for _ in 0..count {
            let (id, label) = read_item_header(&mut r)?;
            for v in row.iter_mut() {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            set.push(id, label, &row)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), HashError> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, HashError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], what: &'static str) -> Result<(usize, usize), HashError> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(HashError::BadMagic(what));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(HashError::Version(version));
    }
    let mut n = [0u8; 4];
    r.read_exact(&mut n)?;
    let count = u32::from_le_bytes(n) as usize;
    r.read_exact(&mut n)?;
    Ok((count, u32::from_le_bytes(n) as usize))
}

fn read_item_header<R: Read>(r: &mut R) -> Result<(u32, Option<u16>), HashError> {
    let mut id = [0u8; 4];
    r.read_exact(&mut id)?;
    let mut label = [0u8; 2];
    r.read_exact(&mut label)?;
    let label = u16::from_le_bytes(label);
    Ok((u32::from_le_bytes(id), (label != NO_LABEL).then_some(label)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn binarize_threshold() {
        let c = binarize(&[-0.3, 0.0, 2.1]).unwrap();
        assert_eq!(c.to_bits(), bits("011"));
        assert_eq!(c.len(), 3);
        assert!(matches!(binarize(&[1.0, f64::NAN]), Err(HashError::NonFinite(1))));
        assert!(matches!(binarize(&[f64::NEG_INFINITY]), Err(HashError::NonFinite(0))));
    }

    #[test]
    fn binarize_signs_round_trip() {
        let c = BinaryCode::from_bits(&bits("1001110"));
        assert_eq!(binarize(&c.to_signs()).unwrap(), c);
    }

    #[test]
    fn rectify() {
        assert_eq!(rectify_fc_plus(&[0.3, -0.3, 0.0]), vec![0.8, -0.8, 0.5]);
    }

    #[test]
    fn packing() {
        let (packed, len) = pack_codes(&[bits("1101")]).unwrap();
        assert_eq!((packed, len), (vec![0x0B], 4));
        let twelve = BinaryCode::from_bits(&[true; 12]);
        assert_eq!(twelve.as_bytes(), &[0xFF, 0x0F]);
        assert!(matches!(
            pack_codes(&[bits("10"), bits("101")]),
            Err(HashError::Ragged { index: 1, expected: 2, got: 3 })
        ));
        assert!(BinaryCode::from_bytes(vec![0x10], 4).is_err());
        assert!(BinaryCode::from_bytes(vec![0x01, 0], 4).is_err());
        assert_eq!(unpack_codes(&[0x0B, 0x02], 4).unwrap(), vec![bits("1101"), bits("0100")]);
    }

    #[test]
    fn u64_keys() {
        let c = BinaryCode::from_bits(&bits("101000001"));
        assert_eq!(c.to_u64(), Some(0b1_0000_0101));
        assert_eq!(BinaryCode::from_u64(0b1_0000_0101, 9), c);
        assert_eq!(BinaryCode::from_u64(u64::MAX, 64).to_u64(), Some(u64::MAX));
        assert_eq!(BinaryCode::zeros(65).to_u64(), None);
    }

    #[test]
    fn lsh_basics() {
        let a = make_lsh(5, 7, 3).unwrap();
        assert_eq!(a, make_lsh(5, 7, 3).unwrap());
        assert_ne!(a, make_lsh(5, 7, 4).unwrap());
        assert!(make_lsh(0, 4, 0).is_err());
        assert_eq!(make_lsh(3072, 48, 0).unwrap().projections.len(), 48 * 3072);

        let identity = LshModel {
            dim: 2,
            bits: 2,
            projections: vec![1.0, 0.0, 0.0, 1.0],
            thresholds: vec![0.0; 2],
            seed: 0,
        };
        assert_eq!(lsh_encode(&identity, &[1.0, -1.0]).unwrap().to_bits(), bits("10"));
        assert_eq!(lsh_encode(&a, &[0.0; 5]).unwrap().to_bits(), vec![true; 7]);
        assert!(matches!(
            lsh_encode(&a, &[0.0; 4]),
            Err(HashError::DimensionMismatch { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn code_file_round_trip() {
        let mut set = BinaryCodeSet::new(12);
        set.push(7, Some(3), BinaryCode::from_bits(&bits("110000000011"))).unwrap();
        set.push(9, None, BinaryCode::zeros(12)).unwrap();
        assert!(set.push(1, None, BinaryCode::zeros(11)).is_err());
        let mut buf = Vec::new();
        set.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CBH1");
        assert_eq!(buf.len(), 4 + 2 + 4 + 4 + 2 * (4 + 2 + 2));
        assert_eq!(&buf[18..22], &[3, 0, 0x03, 0x0C]);
        assert_eq!(&buf[26..28], &[0xFF, 0xFF]);
        assert_eq!(BinaryCodeSet::read(buf.as_slice()).unwrap(), set);
        buf[0] = b'Z';
        assert!(matches!(BinaryCodeSet::read(buf.as_slice()), Err(HashError::BadMagic(_))));
    }

    #[test]
    fn feature_file_round_trip() {
        let mut set = FeatureSet::new(3);
        set.push(1, Some(0), &[0.5, -1.25, 3.0]).unwrap();
        set.push(4, None, &[f64::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        set.write(&mut buf).unwrap();
        let back = FeatureSet::read(buf.as_slice()).unwrap();
        assert_eq!(back.item_ids, set.item_ids);
        assert_eq!(back.labels, set.labels);
        assert!(back.values.iter().zip(&set.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(set.map_rows(rectify_fc_plus).row(0), &[1.0, -1.75, 3.5]);
    }
}
