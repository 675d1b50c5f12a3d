//! Flat binary container of named tensors.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "ETCK" | u32 version | u32 tensor count
//! per tensor: u16 name length | name (utf-8) | u8 dtype (4|8)
//!             u8 ndim | u32 extents... | payload (row-major)
//! ```
//!
//! The dtype byte records the element width in bytes of the writing build;
//! readers convert to the active `Real`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ETCK";
const VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            assert!(bytes.len() <= u16::MAX as usize, "tensor name too long");
            w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(bytes).map_err(io)?;
            w.write_all(&[std::mem::size_of::<Real>() as u8]).map_err(io)?;
            w.write_all(&[tensor.shape().len() as u8]).map_err(io)?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
            }
            for &v in tensor.data() {
                if std::mem::size_of::<Real>() == 8 {
                    w.write_all(&(v as f64).to_le_bytes()).map_err(io)?;
                } else {
                    w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let count = read_u32(&mut r).map_err(io)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r).map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 tensor name"))?;
            let mut meta = [0u8; 2];
            r.read_exact(&mut meta).map_err(io)?;
            let (dtype, ndim) = (meta[0] as usize, meta[1] as usize);
            if dtype != 4 && dtype != 8 {
                return Err(bad("unknown dtype"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r).map_err(io)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf[..dtype]).map_err(io)?;
                let v = if dtype == 8 {
                    f64::from_le_bytes(buf)
                } else {
                    f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64
                };
                data.push(v as Real);
            }
            entries.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(Checkpoint { entries })
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
