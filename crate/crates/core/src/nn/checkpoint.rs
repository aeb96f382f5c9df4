//! Binary container of named `f32` matrices plus JSON metadata.
//!
//! Layout (little endian): magic `MARLNET\0`, `u32` version, `u64` metadata
//! length, metadata JSON, `u32` array count, then per array `u32` name
//! length, UTF-8 name, `u64` rows, `u64` cols, `rows·cols` `f32` values.

use super::{Module, NnError};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MARLNET\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub arrays: Vec<(String, Array2<f32>)>,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint {
            metadata,
            arrays: Vec::new(),
        }
    }

    /// Appends every parameter of `module`, names prefixed by `prefix`.
    pub fn add<M: Module<f32>>(&mut self, prefix: &str, module: &M) {
        module.visit(&mut |p| {
            self.arrays
                .push((format!("{prefix}{}", p.name), p.value.clone()));
        });
    }

    /// Overwrites the parameters of `module` with the stored arrays of the
    /// same (prefixed) name. Every parameter must be present with its shape.
    pub fn load_into<M: Module<f32>>(&self, prefix: &str, module: &mut M) -> Result<(), NnError> {
        let mut err = None;
        module.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}{}", p.name);
            match self.arrays.iter().find(|(n, _)| *n == key) {
                None => err = Some(bad(format!("missing array `{key}`"))),
                Some((_, a)) if a.dim() != p.value.dim() => {
                    err = Some(bad(format!(
                        "array `{key}` has shape {:?}, expected {:?}",
                        a.dim(),
                        p.value.dim()
                    )))
                }
                Some((_, a)) => p.value.assign(a),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, a) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(a.nrows() as u64).to_le_bytes())?;
            w.write_all(&(a.ncols() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(a.len() * 4);
            for x in a.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta).map_err(|e| bad(e.to_string()))?;
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let n = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut raw = vec![0u8; rows * cols * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let a = Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
            arrays.push((name, a));
        }
        Ok(Checkpoint { metadata, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let f = std::fs::File::open(path)?;
        Checkpoint::read(std::io::BufReader::new(f))
    }
}
