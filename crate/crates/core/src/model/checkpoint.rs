//! Binary checkpoint format.
//!
//! ```text
//! magic    4 bytes  "ELBN"
//! version  u32      1
//! count    u32      number of entries
//! entry:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank x u32)
//!   payload  product(dims) x f32
//! ```
//!
//! Every integer and float is little-endian. Parameters and BatchNorm
//! running statistics are stored in graph visiting order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::graph::LayerGraph;
use super::layers::ParamView;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"ELBN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let numel: u64 = e.dims.iter().map(|&d| d as u64).product();
        if numel != e.data.len() as u64 {
            return Err(ckpt_err(format!("`{}`: dims do not match payload", e.name)));
        }
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for d in &e.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| ckpt_err("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| ckpt_err("truncated checkpoint"))?;
    if &magic != MAGIC {
        return Err(ckpt_err("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| ckpt_err("truncated checkpoint"))?;
        let name = String::from_utf8(name).map_err(|_| ckpt_err("entry name is not UTF-8"))?;
        let rank = read_u32(&mut r)?;
        let dims = (0..rank)
            .map(|_| read_u32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| ckpt_err(format!("truncated payload for `{name}`")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ckpt_err("trailing bytes after last entry"));
    }
    Ok(out)
}

impl<T: Scalar> LayerGraph<T> {
    /// Parameters and buffers as `f32` tensors, in visiting order.
    pub fn state_dict(&mut self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |p: ParamView<'_, T>| {
            out.push(NamedTensor {
                name: p.name,
                dims: p.shape.dims().iter().map(|&d| d as u32).collect(),
                data: p.value.iter().map(|v| v.to_f32_lossy()).collect(),
            });
        });
        out
    }

    /// Loads a state produced by [`LayerGraph::state_dict`] on the same
    /// architecture. Missing, extra or reshaped entries are errors.
    pub fn load_state_dict(&mut self, entries: &[NamedTensor]) -> Result<()> {
        let mut by_name: HashMap<&str, &NamedTensor> = HashMap::new();
        for e in entries {
            if by_name.insert(&e.name, e).is_some() {
                return Err(ckpt_err(format!("duplicate entry `{}`", e.name)));
            }
        }
        // check everything before touching any value
        let mut problem = None;
        let mut seen = 0usize;
        self.visit_params(&mut |p: ParamView<'_, T>| {
            if problem.is_some() {
                return;
            }
            let dims: Vec<u32> = p.shape.dims().iter().map(|&d| d as u32).collect();
            match by_name.get(p.name.as_str()) {
                None => problem = Some(format!("missing entry `{}`", p.name)),
                Some(e) if e.dims != dims => {
                    problem = Some(format!(
                        "`{}` has dims {:?}, graph expects {:?}",
                        p.name, e.dims, dims
                    ))
                }
                Some(_) => seen += 1,
            }
        });
        if let Some(msg) = problem {
            return Err(ckpt_err(msg));
        }
        if seen != entries.len() {
            return Err(ckpt_err(format!(
                "{} entries do not belong to this graph",
                entries.len() - seen
            )));
        }
        self.visit_params(&mut |p: ParamView<'_, T>| {
            let e = by_name[p.name.as_str()];
            for (d, &s) in p.value.iter_mut().zip(&e.data) {
                *d = T::lit(s as f64);
            }
        });
        Ok(())
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        write_checkpoint(BufWriter::new(file), &self.state_dict())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path)?;
        let entries = read_checkpoint(BufReader::new(file))?;
        self.load_state_dict(&entries)
    }
}
