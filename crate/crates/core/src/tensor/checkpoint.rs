//! FP32 checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "KDLABCK\0"
//! version      u32
//! config hash  32 bytes (SHA-256 of the model config JSON)
//! count        u32
//! per parameter:
//!   name_len u32, name (UTF-8)
//!   ndim u32, dims u32 × ndim
//!   data f32 × prod(dims)
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KDLABCK\0";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        out.extend_from_slice(&self.config_digest);
        out.write_u32::<LittleEndian>(self.params.len() as u32).unwrap();
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.write_all(name.as_bytes()).unwrap();
            out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("checkpoint: {what}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut config_digest = [0u8; 32];
        r.read_exact(&mut config_digest).map_err(|_| bad("truncated header"))?;
        let count = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated entry"))? as usize;
            if name_len > 4096 {
                return Err(bad("implausible name length"));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated entry"))? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(bad("implausible rank"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>().map_err(|_| bad("truncated shape"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let remaining = bytes.len() - r.position() as usize;
            if numel * 4 > remaining {
                return Err(bad("truncated data"));
            }
            let mut data = vec![0f32; numel];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated data"))?;
            params.push(name, Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?);
        }
        if r.position() as usize != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config_digest,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
