//! Binary checkpoint format for parameter sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "ECRCKPT\0"
//! version u32      currently 1
//! count   u64      number of entries
//! entry:  name_len u32, name bytes (utf-8),
//!         ndim u32, dims u64 × ndim,
//!         values f64 × product(dims)
//! ```
//!
//! Values round-trip bit-exactly; gradients and optimizer state are not part
//! of a checkpoint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ECRCKPT\0";
const VERSION: u32 = 1;

pub fn save(params: &ParameterSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn to_bytes(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &tensor.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        params.insert(name, Tensor::new(shape, values)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

/// SHA-256 of the serialised parameter set; used to prove evaluation runs
/// leave a checkpoint untouched.
pub fn digest(params: &ParameterSet) -> String {
    let mut hasher = Sha256::new();
    hasher.update(to_bytes(params));
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
