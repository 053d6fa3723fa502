use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"UPL1";

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    grad: Option<Tensor>,
}

/// Named trainable tensors with their accumulated gradients.
///
/// Iteration order is the lexicographic order of names, which keeps
/// checkpoints and optimizer updates reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

/// Gradients produced by one backward pass, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub(crate) fn from_map(grads: BTreeMap<String, Tensor>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `other` into `self` (in name order).
    pub fn merge(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(existing) => existing.add_assign(g),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` already exists"
            )));
        }
        self.params
            .insert(name.to_string(), Param { value, grad: None });
        Ok(())
    }

    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)).
    pub fn init_weight<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn init_zeros(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(&[len]))
    }

    pub fn init_ones(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(name, Tensor::filled(&[len], 1.0))
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn has_gradients(&self) -> bool {
        self.params.values().any(|p| p.grad.is_some())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "accumulate",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.value.shape()),
                ));
            }
            match &mut p.grad {
                Some(existing) => existing.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, Option<&Tensor>)> {
        self.params
            .iter_mut()
            .map(|(k, p)| (k.as_str(), &mut p.value, p.grad.as_ref()))
    }

    /// Serializes values (not gradients) in the `UPL1` checkpoint layout:
    /// magic, u32 record count, then per record u32 name length, UTF-8
    /// name, u32 rank, u64 extents, f64 payload. All little-endian.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            store
                .insert(&name, Tensor::new(shape, data)?)
                .map_err(|_| Error::Checkpoint(format!("duplicate parameter `{name}`")))?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last record".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.params {
            match other.value(name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter `{name}`")))
                }
                Some(v) if v.shape() != p.value.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        v.shape(),
                        p.value.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.params.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
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
