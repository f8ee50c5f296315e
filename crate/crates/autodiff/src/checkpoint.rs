//! Binary parameter file.
//!
//! Layout (little-endian): magic `EGFK`, version `u32`, entry count `u32`,
//! then per entry: name length `u32`, UTF-8 name bytes, rank `u32`,
//! `rank` dims as `u32`, and the values as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;

pub const MAGIC: &[u8; 4] = b"EGFK";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "#adam.m";
const ADAM_V: &str = "#adam.v";
const ADAM_T: &str = "#adam.t";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn from_f64(name: impl Into<String>, dims: &[usize], data: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn write_entries(w: &mut impl Write, entries: &[Entry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let n: usize = e.dims.iter().product();
        if n != e.data.len() {
            return Err(TensorError::Checkpoint(format!("{}: dims {:?} vs {} values", e.name, e.dims, e.data.len())));
        }
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for &d in &e.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries(r: &mut impl Read) -> Result<Vec<Entry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(Entry { name, dims, data });
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_entries(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    read_entries(&mut BufReader::new(File::open(path)?))
}

impl ParamStore {
    /// Parameters, buffers and (optionally) optimizer state as entries.
    /// Optimizer state is stored under `<name>#adam.m`, `#adam.v`, `#adam.t`.
    pub fn to_entries(&self, with_optimizer: bool) -> Vec<Entry> {
        let mut out = Vec::new();
        for (_, p) in self.params() {
            out.push(Entry::from_f64(&p.name, &p.shape, &p.data));
            if with_optimizer {
                out.push(Entry::from_f64(format!("{}{ADAM_M}", p.name), &p.shape, &p.adam.m));
                out.push(Entry::from_f64(format!("{}{ADAM_V}", p.name), &p.shape, &p.adam.v));
                out.push(Entry {
                    name: format!("{}{ADAM_T}", p.name),
                    dims: vec![1],
                    data: vec![p.adam.step as f32],
                });
            }
        }
        for (_, b) in self.buffers() {
            out.push(Entry::from_f64(&b.name, &b.shape, &b.data));
        }
        out
    }

    /// Loads values by name. Every parameter and buffer must be present with
    /// matching dims; optimizer entries are applied when found. Unknown
    /// names are returned so callers can read their own metadata.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<Vec<Entry>> {
        let mut seen_params = vec![false; self.len()];
        let mut seen_buffers = vec![false; self.buffers().count()];
        let mut extra = Vec::new();
        for e in entries {
            if let Some((base, suffix)) = e.name.split_once('#') {
                let Some(id) = self.find(base) else {
                    extra.push(e.clone());
                    continue;
                };
                let p = self.param_mut(id);
                match format!("#{suffix}").as_str() {
                    ADAM_M => p.adam.m = checked(e, &p.shape)?,
                    ADAM_V => p.adam.v = checked(e, &p.shape)?,
                    ADAM_T => p.adam.step = e.data.first().copied().unwrap_or(0.0) as u64,
                    _ => extra.push(e.clone()),
                }
            } else if let Some(id) = self.find(&e.name) {
                let p = self.param_mut(id);
                p.data = checked(e, &p.shape)?;
                seen_params[id.0] = true;
            } else if let Some(id) = self.find_buffer(&e.name) {
                let shape = self.buffer(id).shape.clone();
                let data = checked(e, &shape)?;
                self.set_buffer(id, data);
                seen_buffers[id.0] = true;
            } else {
                extra.push(e.clone());
            }
        }
        if let Some(i) = seen_params.iter().position(|s| !s) {
            let name = self.params().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
            return Err(TensorError::MissingEntry(name));
        }
        if let Some(i) = seen_buffers.iter().position(|s| !s) {
            let name = self.buffers().nth(i).map(|(_, b)| b.name.clone()).unwrap_or_default();
            return Err(TensorError::MissingEntry(name));
        }
        Ok(extra)
    }
}

fn checked(e: &Entry, shape: &[usize]) -> Result<Vec<f64>> {
    if e.dims != shape {
        return Err(TensorError::Checkpoint(format!("{}: dims {:?}, expected {:?}", e.name, e.dims, shape)));
    }
    Ok(e.to_f64())
}
