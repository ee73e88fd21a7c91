//! Named parameter storage and its binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"RSNN"
//! u32    version (1)
//! u32    parameter count
//! per parameter:
//!   u16  name length, then UTF-8 name bytes
//!   u8   rank, then u32 per dimension
//!   f64  payload, row-major
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARAM_MAGIC: &[u8; 4] = b"RSNN";
pub const PARAM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    /// Adam first and second moments.
    m: Vec<f64>,
    v: Vec<f64>,
    /// Excluded from weight decay (biases, norms, SSM dynamics).
    no_decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, false)
    }

    /// Registers a parameter that weight decay must not touch.
    pub fn add_no_decay(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, true)
    }

    fn insert(&mut self, name: String, value: Tensor, no_decay: bool) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("parameter name too long"));
        }
        let id = ParamId(self.entries.len());
        let n = value.len();
        self.entries.push(Entry {
            name: name.clone(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            no_decay,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Overwrites a parameter's values; the shape is fixed.
    pub fn set_value(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if data.len() != e.value.len() {
            return Err(Error::shape(format!("parameter {} has {} values", e.name, e.value.len())));
        }
        e.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.entries[id.0].value.data_mut()
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn no_decay(&self, id: ParamId) -> bool {
        self.entries[id.0].no_decay
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.entries[id.0].grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g *= factor;
            }
        }
    }

    /// Mutable access to value, gradient and both moment buffers.
    pub(crate) fn optimizer_view(&mut self, id: ParamId) -> (&mut [f64], &[f64], &mut [f64], &mut [f64], bool) {
        let e = &mut self.entries[id.0];
        (e.value.data_mut(), &e.grad, &mut e.m, &mut e.v, e.no_decay)
    }

    /// Copies values (not optimizer state) from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::shape("parameter stores differ in size"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::shape(format!("parameter {} differs", a.name)));
            }
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            write_named_tensor(&mut w, &e.name, &e.value)?;
        }
        Ok(())
    }

    /// Reads a parameter file. Every parameter is registered with decay on;
    /// use [`ParamStore::load_values`] to fill an existing layout instead.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != PARAM_MAGIC {
            return Err(Error::Format("not a parameter file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != PARAM_VERSION {
            return Err(Error::Version {
                found: version,
                expected: PARAM_VERSION,
            });
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let (name, value) = read_named_tensor(&mut r)?;
            store.add(name, value)?;
        }
        Ok(store)
    }

    /// Loads values from a file into this store's existing layout.
    pub fn load_values<R: Read>(&mut self, r: R) -> Result<()> {
        let other = ParamStore::read(r)?;
        self.copy_values_from(&other)
    }
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

/// One `(name, rank, dims, payload)` record of the parameter encoding.
pub(crate) fn write_named_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
        return Err(Error::invalid("tensor name or rank too large"));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_named_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(truncated)?;
    let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(truncated)?;
    let shape = (0..rank[0])
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload).map_err(truncated)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}
