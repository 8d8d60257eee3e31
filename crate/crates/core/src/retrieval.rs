//! Hamming ranking, radius-bounded hash-table lookup and Euclidean ranking.
//!
//! Ties in every ranking are broken by ascending item id.

use std::collections::HashMap;

use thiserror::Error;

use crate::hashing::{popcount_xor, BinaryCode, BinaryCodeSet, FeatureSet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("code length mismatch: {expected} vs {got} bits")]
    LengthMismatch { expected: usize, got: usize },
    #[error("hash table keys hold at most 64 bits, codes have {0}")]
    TooLong(usize),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub fn hamming_distance(a: &BinaryCode, b: &BinaryCode) -> Result<u32, RetrievalError> {
    a.hamming(b).ok_or(RetrievalError::LengthMismatch {
        expected: a.len(),
        got: b.len(),
    })
}

/// Item ids in ranked order with their distances.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<D> {
    pub ids: Vec<u32>,
    pub distances: Vec<D>,
}

impl<D> RankedList<D> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.ids.truncate(k);
        self.distances.truncate(k);
    }
}

/// Exhaustive ranking of `codes` by Hamming distance to `query`.
pub fn hamming_rank(codes: &BinaryCodeSet, query: &BinaryCode) -> Result<RankedList<u32>, RetrievalError> {
    if query.len() != codes.bits {
        return Err(RetrievalError::LengthMismatch {
            expected: codes.bits,
            got: query.len(),
        });
    }
    let q = query.as_bytes();
    let mut order: Vec<(u32, u32)> = codes
        .codes
        .iter()
        .zip(&codes.item_ids)
        .map(|(c, &id)| (popcount_xor(c.as_bytes(), q), id))
        .collect();
    order.sort_unstable();
    Ok(RankedList {
        ids: order.iter().map(|&(_, id)| id).collect(),
        distances: order.iter().map(|&(d, _)| d).collect(),
    })
}

/// Exhaustive ranking by squared Euclidean distance.
pub fn l2_rank(features: &FeatureSet, query: &[f64]) -> Result<RankedList<f64>, RetrievalError> {
    if query.len() != features.dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: features.dim,
            got: query.len(),
        });
    }
    let mut order: Vec<(f64, u32)> = features
        .rows()
        .zip(&features.item_ids)
        .map(|(row, &id)| {
            let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, id)
        })
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankedList {
        ids: order.iter().map(|&(_, id)| id).collect(),
        distances: order.iter().map(|&(d, _)| d).collect(),
    })
}

/// Items whose codes lie within `r` bits of `query`, by a linear scan.
/// Works for any code length. Result ids are ascending.
pub fn filter_within_radius(codes: &BinaryCodeSet, query: &BinaryCode, r: u32) -> Result<Vec<u32>, RetrievalError> {
    if query.len() != codes.bits {
        return Err(RetrievalError::LengthMismatch {
            expected: codes.bits,
            got: query.len(),
        });
    }
    let mut ids: Vec<u32> = codes
        .codes
        .iter()
        .zip(&codes.item_ids)
        .filter(|(c, _)| popcount_xor(c.as_bytes(), query.as_bytes()) <= r)
        .map(|(_, &id)| id)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Lookup table from code value to the ids of items carrying that code.
#[derive(Debug, Clone, Default)]
pub struct HammingIndex {
    bits: usize,
    items: usize,
    table: HashMap<u64, Vec<u32>>,
}

impl HammingIndex {
    pub fn build(codes: &BinaryCodeSet) -> Result<Self, RetrievalError> {
        if codes.bits > 64 {
            return Err(RetrievalError::TooLong(codes.bits));
        }
        let mut table: HashMap<u64, Vec<u32>> = HashMap::new();
        for (code, &id) in codes.codes.iter().zip(&codes.item_ids) {
            let key = code.to_u64().expect("at most 64 bits");
            table.entry(key).or_default().push(id);
        }
        for bucket in table.values_mut() {
            bucket.sort_unstable();
        }
        Ok(HammingIndex {
            bits: codes.bits,
            items: codes.len(),
            table,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }

    pub fn bucket_count(&self) -> usize {
        self.table.len()
    }

    pub fn bucket(&self, key: u64) -> &[u32] {
        self.table.get(&key).map_or(&[], Vec::as_slice)
    }

    pub fn buckets(&self) -> impl Iterator<Item = (u64, &[u32])> {
        self.table.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Every item within `r` bits of `query`, found by probing each key
    /// that differs from the query in at most `r` positions. Ids ascending.
    pub fn lookup_within_radius(&self, query: &BinaryCode, r: u32) -> Result<Vec<u32>, RetrievalError> {
        if query.len() != self.bits {
            return Err(RetrievalError::LengthMismatch {
                expected: self.bits,
                got: query.len(),
            });
        }
        let key = query.to_u64().expect("index codes fit in 64 bits");
        let mut out = Vec::new();
        let r = (r as usize).min(self.bits);
        if self.table.len() <= probe_count(self.bits, r as u32) as usize {
            // fewer buckets than probes: checking each bucket is cheaper
            for (&k, ids) in &self.table {
                if (k ^ key).count_ones() as usize <= r {
                    out.extend_from_slice(ids);
                }
            }
        } else {
            let mut positions = Vec::with_capacity(r);
            self.probe(key, 0, r, &mut positions, &mut out);
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Same as [`lookup_within_radius`](Self::lookup_within_radius) but
    /// always enumerates masks, returning the ids and the number of probes.
    pub fn lookup_by_probing(&self, query: &BinaryCode, r: u32) -> Result<(Vec<u32>, u64), RetrievalError> {
        if query.len() != self.bits {
            return Err(RetrievalError::LengthMismatch {
                expected: self.bits,
                got: query.len(),
            });
        }
        let key = query.to_u64().expect("index codes fit in 64 bits");
        let mut out = Vec::new();
        let r = (r as usize).min(self.bits);
        let probes = self.probe(key, 0, r, &mut Vec::with_capacity(r), &mut out);
        out.sort_unstable();
        Ok((out, probes))
    }

    fn probe(&self, key: u64, start: usize, remaining: usize, flipped: &mut Vec<usize>, out: &mut Vec<u32>) -> u64 {
        let mask = flipped.iter().fold(0u64, |m, &b| m | 1 << b);
        if let Some(ids) = self.table.get(&(key ^ mask)) {
            out.extend_from_slice(ids);
        }
        let mut probes = 1;
        if remaining > 0 {
            for b in start..self.bits {
                flipped.push(b);
                probes += self.probe(key, b + 1, remaining - 1, flipped, out);
                flipped.pop();
            }
        }
        probes
    }
}

/// Number of keys within distance `r` of a `bits`-bit key:
/// `C(bits, 0) + ... + C(bits, r)`.
pub fn probe_count(bits: usize, r: u32) -> u64 {
    let mut total = 0u64;
    let mut c = 1u64;
    for i in 0..=(r as u64).min(bits as u64) {
        total += c;
        c = c * (bits as u64 - i) / (i + 1);
    }
    total
}

/// Radius search that uses the table for codes of at most 64 bits and a
/// linear scan beyond.
#[derive(Debug)]
pub enum RadiusSearcher<'a> {
    Table(HammingIndex),
    Scan(&'a BinaryCodeSet),
}

impl<'a> RadiusSearcher<'a> {
    pub fn new(codes: &'a BinaryCodeSet) -> Self {
        match HammingIndex::build(codes) {
            Ok(index) => RadiusSearcher::Table(index),
            Err(_) => RadiusSearcher::Scan(codes),
        }
    }

    pub fn search(&self, query: &BinaryCode, r: u32) -> Result<Vec<u32>, RetrievalError> {
        match self {
            RadiusSearcher::Table(index) => index.lookup_within_radius(query, r),
            RadiusSearcher::Scan(codes) => filter_within_radius(codes, query, r),
        }
    }
}
