//! Binary archive of named tensors plus the configuration that produced them.
//!
//! Layout, all integers little endian:
//! magic `PRIMCOMP1`, step `u64`, SHA-256 of the config text, config length
//! `u64` and UTF-8 bytes, tensor count `u64`, then per tensor a `u32` name
//! length, the name, a `u32` rank, `u64` dims and `f64` values. A SHA-256 of
//! everything before it closes the file.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::{Error, Real, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PRIMCOMP1";

/// Hex SHA-256 of a configuration text.
pub fn config_hash(config: &str) -> String {
    hex(&Sha256::digest(config.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u64::<LittleEndian>(self.step).unwrap();
        out.extend_from_slice(&Sha256::digest(self.config.as_bytes()));
        out.write_u64::<LittleEndian>(self.config.len() as u64).unwrap();
        out.extend_from_slice(self.config.as_bytes());
        out.write_u64::<LittleEndian>(self.tensors.len() as u64).unwrap();
        for (name, t) in &self.tensors {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in t.data() {
                out.write_f64::<LittleEndian>(v as f64).unwrap();
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = &bytes[..bytes.len().min(CHECKPOINT_MAGIC.len())];
        if head != CHECKPOINT_MAGIC {
            return Err(corrupt(format!(
                "bad header {:?}, expected {:?}",
                String::from_utf8_lossy(head),
                std::str::from_utf8(CHECKPOINT_MAGIC).unwrap()
            )));
        }
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
            return Err(corrupt("file truncated after header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch; file is truncated or corrupt"));
        }
        let mut r = Cursor::new(&body[CHECKPOINT_MAGIC.len()..]);
        let short = |_| corrupt("unexpected end of data");
        let step = r.read_u64::<LittleEndian>().map_err(short)?;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(short)?;
        let len = r.read_u64::<LittleEndian>().map_err(short)? as usize;
        let config = read_string(&mut r, len)?;
        if Sha256::digest(config.as_bytes()).as_slice() != hash {
            return Err(corrupt("config hash does not match the stored config"));
        }
        let count = r.read_u64::<LittleEndian>().map_err(short)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            let name = read_string(&mut r, nlen)?;
            let rank = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize).map_err(short))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel > body.len() / 8 {
                return Err(corrupt(format!("tensor {name} claims {numel} values")));
            }
            let data = (0..numel)
                .map(|_| r.read_f64::<LittleEndian>().map(|v| v as Real).map_err(short))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        if r.position() as usize != r.get_ref().len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        Ok(Self { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_string(r: &mut Cursor<&[u8]>, len: usize) -> Result<String> {
    if len > r.get_ref().len() {
        return Err(corrupt("string length exceeds file size"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| corrupt("unexpected end of data"))?;
    String::from_utf8(buf).map_err(|_| corrupt("string is not UTF-8"))
}
