//! Ordered, named parameter collections and their binary serialization.
//!
//! A [`ParamSet`] is the unit that flows through the whole pipeline: model
//! weights, per-parameter gradients, masks, and noise draws are all
//! `ParamSet`-shaped, so aggregation and the defenses can treat them
//! uniformly as one flat sequence of named scalars.
//!
//! The on-disk format is a flat little-endian binary: magic `FLPS`, version,
//! tensor count, then per tensor the name (length-prefixed), rank, dims as
//! 64-bit integers, and the data as 64-bit reals. Used for checkpoints and
//! attack fixtures.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FLPS";
const VERSION: u32 = 1;

/// Ordered list of named tensors. Order is stable and significant: scalar
/// addressing, aggregation, and serialization all walk entries in insertion
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Like [`ParamSet::get`] but an absent name is an error.
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.get_mut(name) {
            Some(t) => {
                if t.shape() != tensor.shape() {
                    return Err(Error::shape(
                        "ParamSet::set",
                        format!("{:?}", t.shape()),
                        format!("{:?}", tensor.shape()),
                    ));
                }
                *t = tensor;
                Ok(())
            }
            None => Err(Error::Config(format!("no parameter named {name:?}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Same names and shapes, all values `v`.
    pub fn filled_like(&self, v: f64) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::filled(t.shape(), v)))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.map(&f)))
                .collect(),
        }
    }

    /// Elementwise combination; the two sets must agree on names, order, and
    /// shapes.
    pub fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "ParamSet::zip_with",
                format!("{} tensors", self.len()),
                format!("{} tensors", other.len()),
            ));
        }
        let mut out = ParamSet::new();
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::shape("ParamSet::zip_with", na, nb));
            }
            out.entries.push((na.clone(), ta.zip(tb, &f)?));
        }
        Ok(out)
    }

    /// Visit every scalar as a flat sequence, in entry order.
    pub fn scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    // ── binary serialization ─────────────────────────────────────────────

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let path = path.as_ref();
        let mut r = Cursor {
            inner: BufReader::new(File::open(path)?),
            offset: 0,
            path: path.display().to_string(),
        };
        Self::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn read_from(r: &mut Cursor<impl Read>) -> Result<ParamSet> {
        let magic = r.bytes::<4>("magic")?;
        if &magic != MAGIC {
            return Err(r.bad("magic mismatch, not a parameter file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.bad(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            if name_len > 1 << 16 {
                return Err(r.bad(format!("implausible name length {name_len}")));
            }
            let name_bytes = r.vec(name_len, "name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| r.bad("name not UTF-8"))?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.bad(format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 1 << 28 {
                return Err(r.bad(format!("implausible element count {numel}")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.bytes::<8>("data")?));
            }
            let tensor = Tensor::new(shape, data).map_err(|e| r.bad(e.to_string()))?;
            out.push(name, tensor).map_err(|e| r.bad(e.to_string()))?;
        }
        Ok(out)
    }
}

/// Byte-counting reader so malformed files are rejected with an offset.
struct Cursor<R> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.bad(format!("unexpected end of file reading {what}")))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.bad(format!("unexpected end of file reading {what}")))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>(what)?))
    }

    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.offset,
            detail: detail.into(),
        }
    }
}
