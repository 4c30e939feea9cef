//! One-shot global pruning: a single threshold over the concatenated
//! importance scores, a binary mask with an exact retention count, and
//! in-place application to the model.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fileio::{put_f64, put_string, put_u32, put_u64, Reader};
use crate::importance::ScoreMap;
use crate::models::Model;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

/// Binary retention mask over all prunable parameters, with the global
/// bookkeeping that produced it. Exactly `retained` entries are ones.
#[derive(Debug, Clone)]
pub struct PruneMask {
    entries: Vec<MaskEntry>,
    pub target_sparsity: f64,
    pub retained: usize,
    pub threshold: f64,
    pub total: usize,
}

impl PruneMask {
    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn keep_flags(&self, name: &str) -> Option<&[bool]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.keep.as_slice())
    }

    pub fn ones(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.keep.iter().filter(|&&k| k).count())
            .sum()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.retained as f64 / self.total as f64
    }
}

/// Global top-k threshold: concatenate every score, keep k = floor((1-p) * D).
/// Returns (tau, k) where tau is the k-th largest score.
pub fn global_threshold<T: Scalar>(scores: &ScoreMap<T>, p: f64) -> Result<(f64, usize)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "sparsity must be in [0,1), got {p}"
        )));
    }
    let d = scores.total_count();
    if d == 0 {
        return Err(Error::contract("empty score map"));
    }
    let k = ((1.0 - p) * d as f64).floor() as usize;
    if k == 0 {
        return Err(Error::config(format!(
            "sparsity {p} retains zero of {d} weights"
        )));
    }
    let mut v = Vec::with_capacity(d);
    for (name, t) in scores.iter() {
        for &s in t.data() {
            let s = s.as_f64();
            if !(s >= 0.0) {
                return Err(Error::contract(format!(
                    "score {s} in {name} is negative or NaN; finalize scores first"
                )));
            }
            v.push(s);
        }
    }
    v.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    Ok((v[k - 1], k))
}

/// Materialize the binary mask for a (tau, k) pair produced by
/// [`global_threshold`] on the same scores. Entries above tau are retained;
/// ties at tau are retained in ascending global flat index order until the
/// count is exactly k.
pub fn build_mask<T: Scalar>(scores: &ScoreMap<T>, tau: f64, k: usize) -> Result<PruneMask> {
    let d = scores.total_count();
    let mut above = 0usize;
    let mut at = 0usize;
    for (_, t) in scores.iter() {
        for &s in t.data() {
            let s = s.as_f64();
            if s > tau {
                above += 1;
            } else if s == tau {
                at += 1;
            }
        }
    }
    if above > k || above + at < k {
        return Err(Error::contract(format!(
            "threshold {tau} cannot yield exactly {k} retained ({above} above, {at} at)"
        )));
    }
    let mut remaining_ties = k - above;
    let mut entries = Vec::with_capacity(scores.len());
    for (name, t) in scores.iter() {
        let keep: Vec<bool> = t
            .data()
            .iter()
            .map(|&s| {
                let s = s.as_f64();
                if s > tau {
                    true
                } else if s == tau && remaining_ties > 0 {
                    remaining_ties -= 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        entries.push(MaskEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            keep,
        });
    }
    let mask = PruneMask {
        entries,
        target_sparsity: 1.0 - k as f64 / d as f64,
        retained: k,
        threshold: tau,
        total: d,
    };
    debug_assert_eq!(mask.ones(), k);
    Ok(mask)
}

/// W <- W (.) M in place on every prunable parameter; biases untouched.
pub fn apply_mask<T: Scalar>(model: &mut Model<T>, mask: &PruneMask) -> Result<()> {
    for p in model.params_mut() {
        if !p.prunable {
            continue;
        }
        let Some(keep) = mask.keep_flags(&p.name) else {
            return Err(Error::contract(format!(
                "mask has no entry for prunable parameter {}",
                p.name
            )));
        };
        if keep.len() != p.tensor.numel() {
            return Err(Error::contract(format!(
                "mask length {} != parameter size {} for {}",
                keep.len(),
                p.tensor.numel(),
                p.name
            )));
        }
        let data = p.tensor.data_mut();
        for (v, &k) in data.iter_mut().zip(keep) {
            if !k {
                *v = T::zero();
            }
        }
    }
    Ok(())
}

/// Fraction of prunable weight entries that are exactly zero.
pub fn measure_sparsity<T: Scalar>(model: &Model<T>) -> f64 {
    let mut zeros = 0usize;
    let mut total = 0usize;
    for p in model.params().iter().filter(|p| p.prunable) {
        total += p.tensor.numel();
        zeros += p.tensor.data().iter().filter(|&&v| v == T::zero()).count();
    }
    if total == 0 {
        return 0.0;
    }
    zeros as f64 / total as f64
}

// ── Mask file format ────────────────────────────────────────────────────
//
// Magic `SDMK`, u32 version = 1, f64 target sparsity, u64 retained count,
// f64 threshold, u32 entry count, then per entry: name, u32 rank,
// u32 extents, and the bitmap packed LSB-first in row-major order, padded to
// a byte boundary.

const MAGIC: &[u8; 4] = b"SDMK";
const VERSION: u32 = 1;

pub fn save_mask(mask: &PruneMask, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_f64(&mut out, mask.target_sparsity);
    put_u64(&mut out, mask.retained as u64);
    put_f64(&mut out, mask.threshold);
    put_u32(&mut out, mask.entries.len() as u32);
    for e in &mask.entries {
        put_string(&mut out, &e.name);
        put_u32(&mut out, e.shape.len() as u32);
        for &d in &e.shape {
            put_u32(&mut out, d as u32);
        }
        let mut byte = 0u8;
        for (i, &k) in e.keep.iter().enumerate() {
            if k {
                byte |= 1 << (i % 8);
            }
            if i % 8 == 7 {
                out.push(byte);
                byte = 0;
            }
        }
        if e.keep.len() % 8 != 0 {
            out.push(byte);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<PruneMask> {
    let mut r = Reader::open(path)?;
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let target_sparsity = r.read_f64()?;
    let retained = r.read_u64()? as usize;
    let threshold = r.read_f64()?;
    let count = r.read_u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut total = 0usize;
    for _ in 0..count {
        let name = r.read_string()?;
        let rank = r.read_u32()? as usize;
        if rank > 8 {
            return Err(r.err(format!("implausible mask rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.read_bytes(numel.div_ceil(8))?;
        let keep: Vec<bool> = (0..numel)
            .map(|i| bytes[i / 8] >> (i % 8) & 1 == 1)
            .collect();
        total += numel;
        entries.push(MaskEntry { name, shape, keep });
    }
    r.done()?;
    let mask = PruneMask {
        entries,
        target_sparsity,
        retained,
        threshold,
        total,
    };
    if mask.ones() != retained {
        return Err(r.err(format!(
            "mask claims {retained} retained but bitmap has {}",
            mask.ones()
        )));
    }
    Ok(mask)
}
