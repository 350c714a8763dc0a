//! `(n, k)` information dispersal: any `k` of `n` fragments rebuild the payload.
//!
//! The code is systematic Reed-Solomon over GF(2^8) (polynomial `0x11d`). The
//! generator is an `n x k` Vandermonde matrix over the points `0, 1, ..., n-1`,
//! right-multiplied by the inverse of its top `k x k` block. Fragments
//! `0..k` therefore carry the zero-padded payload verbatim and fragments
//! `k..n` carry parity; every `k`-row subset of the generator is invertible.
//! With `k = 1` every fragment is a full copy of the payload.
//!
//! # Header layout
//!
//! Every serialized fragment starts with a fixed [`HEADER_LEN`]-byte header,
//! all integers big-endian:
//!
//! | offset | width | field           |
//! |-------:|------:|-----------------|
//! |      0 |     8 | item id         |
//! |      8 |     1 | fragment index  |
//! |      9 |     1 | n               |
//! |     10 |     1 | k               |
//! |     11 |     8 | original size   |
//! |     19 |     8 | version         |
//!
//! followed by `ceil(original_size / k)` data bytes.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Serialized header size in bytes.
pub const HEADER_LEN: usize = 27;

/// Largest supported fragment count.
pub const MAX_FRAGMENTS: u8 = 255;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DispersalError {
    #[error("invalid dispersal parameters n={n} k={k}: need 1 <= k <= n <= 255")]
    BadParameters { n: u8, k: u8 },
    #[error("cannot disperse an empty payload")]
    EmptyPayload,
    #[error("need {needed} distinct fragments, got {got}")]
    InsufficientFragments { needed: u8, got: usize },
    #[error("corrupt fragment: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FragmentHeader {
    pub item_id: u64,
    pub index: u8,
    pub n: u8,
    pub k: u8,
    pub original_size: u64,
    pub version: u64,
}

impl FragmentHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..8].copy_from_slice(&self.item_id.to_be_bytes());
        out[8] = self.index;
        out[9] = self.n;
        out[10] = self.k;
        out[11..19].copy_from_slice(&self.original_size.to_be_bytes());
        out[19..27].copy_from_slice(&self.version.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DispersalError> {
        if bytes.len() < HEADER_LEN {
            return Err(DispersalError::Corrupt(format!(
                "header needs {HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let be64 = |r: std::ops::Range<usize>| u64::from_be_bytes(bytes[r].try_into().expect("8 bytes"));
        let header = FragmentHeader {
            item_id: be64(0..8),
            index: bytes[8],
            n: bytes[9],
            k: bytes[10],
            original_size: be64(11..19),
            version: be64(19..27),
        };
        if header.k == 0 || header.k > header.n || header.index >= header.n {
            return Err(DispersalError::Corrupt(format!(
                "inconsistent header index={} n={} k={}",
                header.index, header.n, header.k
            )));
        }
        Ok(header)
    }

    /// Data bytes per fragment.
    pub fn shard_len(&self) -> usize {
        (self.original_size as usize).div_ceil(usize::from(self.k))
    }

    fn same_set(&self, other: &FragmentHeader) -> bool {
        (self.item_id, self.n, self.k, self.original_size, self.version)
            == (other.item_id, other.n, other.k, other.original_size, other.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedFragment {
    pub header: FragmentHeader,
    pub data: Vec<u8>,
}

impl EncodedFragment {
    /// Header plus data, the exact on-wire representation.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DispersalError> {
        let header = FragmentHeader::from_bytes(bytes)?;
        let data = bytes[HEADER_LEN..].to_vec();
        if data.len() != header.shard_len() {
            return Err(DispersalError::Corrupt(format!(
                "fragment {} carries {} data bytes, expected {}",
                header.index,
                data.len(),
                header.shard_len()
            )));
        }
        Ok(EncodedFragment { header, data })
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.data.len()
    }
}

/// All `n` fragments of one dispersed payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentSet {
    pub n: u8,
    pub k: u8,
    pub original_size: u64,
    pub fragments: Vec<EncodedFragment>,
}

impl FragmentSet {
    /// Bytes stored across all fragments divided by the payload size.
    pub fn blowup(&self) -> f64 {
        let stored: usize = self.fragments.iter().map(|f| f.data.len()).sum();
        stored as f64 / self.original_size as f64
    }
}

/// Identity stamped into every fragment header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FragmentTag {
    pub item_id: u64,
    pub version: u64,
}

/// [`split_tagged`] with a zero tag.
pub fn split(payload: &[u8], n: u8, k: u8) -> Result<FragmentSet, DispersalError> {
    split_tagged(payload, n, k, FragmentTag::default())
}

pub fn split_tagged(payload: &[u8], n: u8, k: u8, tag: FragmentTag) -> Result<FragmentSet, DispersalError> {
    if k == 0 || k > n {
        return Err(DispersalError::BadParameters { n, k });
    }
    if payload.is_empty() {
        return Err(DispersalError::EmptyPayload);
    }
    let k_us = usize::from(k);
    let shard_len = payload.len().div_ceil(k_us);
    let mut padded = payload.to_vec();
    padded.resize(shard_len * k_us, 0);
    let data_shards: Vec<&[u8]> = padded.chunks(shard_len).collect();

    let generator = generator_matrix(n, k);
    let fragments = (0..n)
        .map(|index| {
            let row = &generator[usize::from(index)];
            let data = if usize::from(index) < k_us {
                data_shards[usize::from(index)].to_vec()
            } else {
                combine(row, &data_shards, shard_len)
            };
            EncodedFragment {
                header: FragmentHeader {
                    item_id: tag.item_id,
                    index,
                    n,
                    k,
                    original_size: payload.len() as u64,
                    version: tag.version,
                },
                data,
            }
        })
        .collect();
    Ok(FragmentSet {
        n,
        k,
        original_size: payload.len() as u64,
        fragments,
    })
}

/// Rebuilds the original payload from any `k` distinct fragments of one set.
pub fn reconstruct(fragments: &[EncodedFragment]) -> Result<Vec<u8>, DispersalError> {
    let first = fragments.first().ok_or(DispersalError::InsufficientFragments { needed: 1, got: 0 })?;
    let header = first.header;
    if header.k == 0 || header.k > header.n {
        return Err(DispersalError::Corrupt(format!("bad header n={} k={}", header.n, header.k)));
    }
    let shard_len = header.shard_len();
    let mut chosen: Vec<&EncodedFragment> = Vec::with_capacity(usize::from(header.k));
    let mut seen = BTreeSet::new();
    for f in fragments {
        if !f.header.same_set(&header) {
            return Err(DispersalError::Corrupt(format!(
                "fragment {} does not belong to the same set as fragment {}",
                f.header.index, header.index
            )));
        }
        if f.header.index >= header.n || f.data.len() != shard_len {
            return Err(DispersalError::Corrupt(format!("fragment {} is malformed", f.header.index)));
        }
        if seen.insert(f.header.index) && chosen.len() < usize::from(header.k) {
            chosen.push(f);
        }
    }
    if chosen.len() < usize::from(header.k) {
        return Err(DispersalError::InsufficientFragments {
            needed: header.k,
            got: seen.len(),
        });
    }
    chosen.sort_by_key(|f| f.header.index);

    let k = usize::from(header.k);
    let mut out = Vec::with_capacity(shard_len * k);
    if chosen.iter().enumerate().all(|(i, f)| usize::from(f.header.index) == i) {
        for f in &chosen {
            out.extend_from_slice(&f.data);
        }
    } else {
        let generator = generator_matrix(header.n, header.k);
        let sub: Vec<Vec<u8>> = chosen.iter().map(|f| generator[usize::from(f.header.index)].clone()).collect();
        let decode = invert(sub).ok_or_else(|| DispersalError::Corrupt("singular decode matrix".into()))?;
        let shards: Vec<&[u8]> = chosen.iter().map(|f| f.data.as_slice()).collect();
        for row in &decode {
            out.extend_from_slice(&combine(row, &shards, shard_len));
        }
    }
    out.truncate(header.original_size as usize);
    Ok(out)
}

/// Sum over `i` of `coeffs[i] * shards[i]`, bytewise in GF(256).
fn combine(coeffs: &[u8], shards: &[&[u8]], len: usize) -> Vec<u8> {
    let tables = gf();
    let mut acc = vec![0u8; len];
    for (&c, shard) in coeffs.iter().zip(shards) {
        if c == 0 {
            continue;
        }
        let row = &tables.mul[usize::from(c)];
        for (a, &b) in acc.iter_mut().zip(shard.iter()) {
            *a ^= row[usize::from(b)];
        }
    }
    acc
}

struct Gf {
    exp: [u8; 512],
    log: [u8; 256],
    mul: Vec<[u8; 256]>,
}

fn gf() -> &'static Gf {
    static TABLES: OnceLock<Gf> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut exp = [0u8; 512];
        let mut log = [0u8; 256];
        let mut x: u16 = 1;
        for (i, e) in exp.iter_mut().take(255).enumerate() {
            *e = x as u8;
            log[x as usize] = i as u8;
            x <<= 1;
            if x & 0x100 != 0 {
                x ^= 0x11d;
            }
        }
        for i in 255..512 {
            exp[i] = exp[i - 255];
        }
        let mut mul = vec![[0u8; 256]; 256];
        for a in 1..256 {
            for b in 1..256 {
                mul[a][b] = exp[usize::from(log[a]) + usize::from(log[b])];
            }
        }
        Gf { exp, log, mul }
    })
}

fn gf_mul(a: u8, b: u8) -> u8 {
    gf().mul[usize::from(a)][usize::from(b)]
}

fn gf_inv(a: u8) -> u8 {
    debug_assert!(a != 0);
    let t = gf();
    t.exp[255 - usize::from(t.log[usize::from(a)])]
}

fn gf_pow(base: u8, e: usize) -> u8 {
    if e == 0 {
        return 1;
    }
    if base == 0 {
        return 0;
    }
    let t = gf();
    t.exp[(usize::from(t.log[usize::from(base)]) * e) % 255]
}

/// Systematic `n x k` generator: identity on top, parity rows below.
fn generator_matrix(n: u8, k: u8) -> Vec<Vec<u8>> {
    let (n, k) = (usize::from(n), usize::from(k));
    let vandermonde: Vec<Vec<u8>> = (0..n).map(|r| (0..k).map(|c| gf_pow(r as u8, c)).collect()).collect();
    let top_inv = invert(vandermonde[..k].to_vec()).expect("Vandermonde over distinct points is invertible");
    vandermonde
        .iter()
        .map(|row| {
            (0..k)
                .map(|c| (0..k).fold(0u8, |acc, i| acc ^ gf_mul(row[i], top_inv[i][c])))
                .collect()
        })
        .collect()
}

/// Gauss-Jordan inversion over GF(256).
fn invert(mut m: Vec<Vec<u8>>) -> Option<Vec<Vec<u8>>> {
    let size = m.len();
    let mut inv: Vec<Vec<u8>> = (0..size).map(|r| (0..size).map(|c| u8::from(r == c)).collect()).collect();
    for col in 0..size {
        let pivot = (col..size).find(|&r| m[r][col] != 0)?;
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let scale = gf_inv(m[col][col]);
        for c in 0..size {
            m[col][c] = gf_mul(m[col][c], scale);
            inv[col][c] = gf_mul(inv[col][c], scale);
        }
        for r in 0..size {
            if r != col && m[r][col] != 0 {
                let factor = m[r][col];
                for c in 0..size {
                    m[r][c] ^= gf_mul(factor, m[col][c]);
                    inv[r][c] ^= gf_mul(factor, inv[col][c]);
                }
            }
        }
    }
    Some(inv)
}
