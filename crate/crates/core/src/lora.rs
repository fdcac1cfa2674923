//! Low-rank adapter factors, their application and merging, and the
//! `P2PAD1` adapter file.
//!
//! A factor pair `(A, B)` with `A: r×d_in` and `B: d_out×r` adds
//! `(alpha/r)·B·A` to a frozen `d_out×d_in` weight.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::base_lm::{LMConfig, ModuleName};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

const MAGIC: &[u8; 6] = b"P2PAD1";

/// One adapted projection: module `m` at layer `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PositionIndex {
    pub module: ModuleName,
    pub layer: usize,
}

impl PositionIndex {
    pub fn new(module: ModuleName, layer: usize) -> Self {
        Self { module, layer }
    }
}

impl Ord for PositionIndex {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.layer, self.module.as_str()).cmp(&(other.layer, other.module.as_str()))
    }
}

impl PartialOrd for PositionIndex {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for PositionIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.module.as_str(), self.layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraFactors {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::Invalid("LoRA factors must be matrices".into()));
        }
        let (r, d_in) = (a.rows(), a.cols());
        let d_out = b.rows();
        if b.cols() != r {
            return Err(Error::RankMismatch {
                expected: r,
                found: b.cols(),
            });
        }
        if r > d_in.min(d_out) {
            return Err(Error::Invalid(format!(
                "rank {r} exceeds min(d_in, d_out) = {}",
                d_in.min(d_out)
            )));
        }
        if !a.is_finite() || !b.is_finite() || !alpha.is_finite() {
            return Err(Error::Invalid("non-finite LoRA factor".into()));
        }
        Ok(Self { a, b, alpha })
    }

    /// The usual starting point: `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn standard_init(
        rank: usize,
        d_in: usize,
        d_out: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let a = Tensor::from_fn(&[rank, d_in], |_| normal.sample(rng));
        Self::new(a, Tensor::zeros(&[d_out, rank]), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Dense `(alpha/r)·B·A`, shaped like the weight it adapts.
    pub fn delta(&self) -> Tensor {
        let mut d = self.b.matmul(&self.a).expect("factor shapes checked");
        let s = self.scale();
        d.data_mut().iter_mut().for_each(|x| *x *= s);
        d
    }
}

/// `(alpha/r)·B(Ax)` in `O(r·(d_in + d_out))`.
pub fn delta_apply(x: &[f64], f: &LoraFactors) -> Result<Vec<f64>> {
    if x.len() != f.d_in() {
        return Err(Error::Dimension {
            what: "delta_apply input",
            expected: f.d_in(),
            found: x.len(),
        });
    }
    let ax: Vec<f64> = (0..f.rank())
        .map(|i| f.a.row(i).iter().zip(x).map(|(a, x)| a * x).sum())
        .collect();
    let s = f.scale();
    Ok((0..f.d_out())
        .map(|o| s * f.b.row(o).iter().zip(&ax).map(|(b, v)| b * v).sum::<f64>())
        .collect())
}

/// `W0 + (alpha/r)·B·A`.
pub fn merge(w0: &Tensor, f: &LoraFactors) -> Result<Tensor> {
    if w0.shape() != [f.d_out(), f.d_in()] {
        return Err(Error::Dimension {
            what: "merge weight rows",
            expected: f.d_out(),
            found: w0.rows(),
        });
    }
    let delta = f.delta();
    let data = w0
        .data()
        .iter()
        .zip(delta.data())
        .map(|(w, d)| w + d)
        .collect();
    Ok(Tensor::new(w0.shape(), data)?)
}

/// Every adapter for one model, keyed by position.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    entries: BTreeMap<PositionIndex, LoraFactors>,
    rank: usize,
    alpha: f64,
    base_checksum: u32,
}

impl AdapterSet {
    pub fn new(entries: BTreeMap<PositionIndex, LoraFactors>, base_checksum: u32) -> Result<Self> {
        let first = entries
            .values()
            .next()
            .ok_or_else(|| Error::Invalid("empty adapter set".into()))?;
        let (rank, alpha) = (first.rank(), first.alpha);
        for f in entries.values() {
            if f.rank() != rank {
                return Err(Error::RankMismatch {
                    expected: rank,
                    found: f.rank(),
                });
            }
            if f.alpha != alpha {
                return Err(Error::Invalid("alpha differs across entries".into()));
            }
        }
        Ok(Self {
            entries,
            rank,
            alpha,
            base_checksum,
        })
    }

    /// Factors with `B = 0` everywhere; the base model's own behaviour.
    pub fn zeros(config: &LMConfig, rank: usize, alpha: f64, base_checksum: u32) -> Result<Self> {
        let entries = config
            .positions()
            .into_iter()
            .map(|p| {
                let (d_in, d_out) = p.module.dims(config);
                let f = LoraFactors::new(
                    Tensor::zeros(&[rank, d_in]),
                    Tensor::zeros(&[d_out, rank]),
                    alpha,
                )?;
                Ok((p, f))
            })
            .collect::<Result<_>>()?;
        Self::new(entries, base_checksum)
    }

    pub fn entries(&self) -> &BTreeMap<PositionIndex, LoraFactors> {
        &self.entries
    }

    pub fn get(&self, p: &PositionIndex) -> Option<&LoraFactors> {
        self.entries.get(p)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn base_checksum(&self) -> u32 {
        self.base_checksum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keys must be exactly the model's positions, with matching shapes.
    pub fn validate_for(&self, config: &LMConfig) -> Result<()> {
        let expected = config.positions();
        for p in self.entries.keys() {
            if !expected.contains(p) || p.layer >= config.n_layers {
                return Err(Error::UnknownPosition(p.to_string()));
            }
        }
        for p in &expected {
            let f = self
                .entries
                .get(p)
                .ok_or_else(|| Error::MissingPosition(p.to_string()))?;
            let (d_in, d_out) = p.module.dims(config);
            if f.d_in() != d_in || f.d_out() != d_out {
                return Err(Error::Dimension {
                    what: "adapter factor",
                    expected: d_in * d_out,
                    found: f.d_in() * f.d_out(),
                });
            }
        }
        Ok(())
    }

    /// Frobenius distance between the dense deltas of two sets over the
    /// same positions.
    pub fn delta_distance(&self, other: &AdapterSet) -> Result<f64> {
        let mut total = 0.0;
        for (p, f) in &self.entries {
            let g = other
                .entries
                .get(p)
                .ok_or_else(|| Error::MissingPosition(p.to_string()))?;
            let (a, b) = (f.delta(), g.delta());
            if a.shape() != b.shape() {
                return Err(Error::Invalid(format!("shape differs at {p}")));
            }
            total += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        Ok(total.sqrt())
    }

    fn write_header(&self) -> Writer {
        let mut w = Writer::new(MAGIC);
        w.usize(self.rank);
        w.f64(self.alpha);
        w.u32(self.base_checksum);
        w.usize(self.entries.len());
        for (p, f) in &self.entries {
            w.usize(p.layer);
            w.str(p.module.as_str());
            w.usize(f.d_in());
            w.usize(f.d_out());
        }
        w
    }

    /// Bytes before the factor data.
    pub fn header_len(&self) -> usize {
        self.write_header().len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = self.write_header();
        for f in self.entries.values() {
            w.f64s(f.a.data());
            w.f64s(f.b.data());
        }
        w.finish()
    }

    /// Parses a set and checks it was generated for the base with
    /// `base_checksum`.
    pub fn from_bytes(bytes: &[u8], base_checksum: u32) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, "adapter")?;
        let rank = r.usize()?;
        let alpha = r.f64()?;
        let file_checksum = r.u32()?;
        if file_checksum != base_checksum {
            return Err(Error::BaseChecksum {
                file: file_checksum,
                base: base_checksum,
            });
        }
        let n = r.usize()?;
        let mut shapes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let layer = r.usize()?;
            let name = r.str()?;
            let module: ModuleName = name.parse().map_err(|_| r.error(format!("bad module {name:?}")))?;
            let d_in = r.usize()?;
            let d_out = r.usize()?;
            shapes.push((PositionIndex::new(module, layer), d_in, d_out));
        }
        let mut entries = BTreeMap::new();
        for (p, d_in, d_out) in shapes {
            let a = Tensor::new(&[rank, d_in], r.f64s(rank * d_in)?)?;
            let b = Tensor::new(&[d_out, rank], r.f64s(d_out * rank)?)?;
            if entries.insert(p, LoraFactors::new(a, b, alpha)?).is_some() {
                return Err(r.error(format!("duplicate position {p}")));
            }
        }
        r.finish()?;
        Self::new(entries, file_checksum)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, base_checksum: u32) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, base_checksum)
    }
}
