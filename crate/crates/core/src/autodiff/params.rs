//! Named parameter store and its binary checkpoint format.
//!
//! ```text
//! b"SDPTCKPT" | u32 version | u32 count
//! per parameter: u32 name_len | name utf8 | u32 rank | rank x u64 dims | f64 values
//! ```
//!
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Member of the shared set whose gradients go through the multi-task
    /// solver.
    pub shared: bool,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    items: Vec<Parameter>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, shared: bool) -> usize {
        assert!(self.index_of(name).is_none(), "duplicate parameter `{name}`");
        self.items.push(Parameter {
            name: name.to_string(),
            value,
            shared,
        });
        self.items.len() - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.items.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.items[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.items[i].value)
    }

    pub fn at(&self, i: usize) -> &Parameter {
        &self.items[i]
    }

    /// Number of scalars, optionally restricted to the shared set.
    pub fn scalar_count(&self, shared_only: bool) -> usize {
        self.items
            .iter()
            .filter(|p| p.shared || !shared_only)
            .map(|p| p.value.len())
            .sum()
    }

    /// Register every parameter on `tape`, returning their handles in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.items
            .iter()
            .map(|p| tape.param_with(&p.name, &p.value, p.shared))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        for p in &self.items {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Decode a checkpoint. Every parameter is marked shared; use
    /// [`Parameters::load_values`] to restore into a store with known layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut out = Parameters::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if out.index_of(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            out.insert(&name, Tensor::new(shape, data)?, true);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrite values from `other`, which must hold exactly the same names
    /// and shapes.
    pub fn load_values(&mut self, other: &Parameters) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        for p in &mut self.items {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{}`", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Parameters {
        let mut p = Parameters::new();
        p.insert("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, f64::MIN_POSITIVE]).unwrap(), true);
        p.insert("head.0", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(), false);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let back = Parameters::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back.get("w"), p.get("w"));
        assert_eq!(back.get("head.0"), p.get("head.0"));
        let mut q = sample();
        q.iter_mut().for_each(|x| x.value.data_mut().fill(0.0));
        q.load_values(&back).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn rejects_corruption() {
        let mut b = sample().to_bytes();
        assert!(Parameters::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(matches!(Parameters::from_bytes(&b), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut other = Parameters::new();
        other.insert("w", Tensor::zeros(vec![4]), true);
        other.insert("head.0", Tensor::zeros(vec![3]), true);
        assert!(sample().load_values(&other).is_err());
    }
}
