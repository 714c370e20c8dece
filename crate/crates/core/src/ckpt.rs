//! "TODW" weight checkpoint container.
//!
//! Layout: magic "TODW", version u16, meta-JSON length u32 + bytes (model
//! kind, config echo, trained step counter), parameter count u32, then per
//! parameter: name (u16 length + utf8), ndim u8, extents u32 each, float32
//! little-endian data. Round-trips are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 4] = b"TODW";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "flow" or "seg".
    pub kind: String,
    /// Config echo of the owning model.
    pub config: serde_json::Value,
    /// Optimizer steps already taken; resumed runs continue from here.
    pub trained_steps: u64,
    /// Extra payload (e.g. filter calibration statistics).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &[(String, &Tensor)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let meta_bytes = serde_json::to_vec(meta)?;
    out.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&meta_bytes)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        out.write_all(name_bytes)?;
        out.write_all(&[tensor.shape().len() as u8])?;
        for &dim in tensor.shape() {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| truncated(0, 4))?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = read_u16(&mut file, 4)?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let meta_len = read_u32(&mut file, 6)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    file.read_exact(&mut meta_bytes)
        .map_err(|_| truncated(10, meta_len))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;

    let mut offset = 10 + meta_len as u64;
    let count = read_u32(&mut file, offset)?;
    offset += 4;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u16(&mut file, offset)? as usize;
        offset += 2;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)
            .map_err(|_| truncated(offset, name_len))?;
        offset += name_len as u64;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset,
            msg: "parameter name is not utf8".into(),
        })?;
        let mut ndim = [0u8; 1];
        file.read_exact(&mut ndim).map_err(|_| truncated(offset, 1))?;
        offset += 1;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut file, offset)? as usize);
            offset += 4;
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            file.read_exact(&mut buf).map_err(|_| truncated(offset, 4))?;
            *v = f32::from_le_bytes(buf);
            offset += 4;
        }
        params.push((name, Tensor::new(shape, data).expect("checkpoint shape")));
    }
    Ok((meta, params))
}

fn truncated(offset: u64, want: usize) -> Error {
    Error::Format {
        offset,
        msg: format!("truncated: expected {want} more bytes"),
    }
}

fn read_u16(file: &mut impl Read, offset: u64) -> Result<u16> {
    let mut buf = [0u8; 2];
    file.read_exact(&mut buf).map_err(|_| truncated(offset, 2))?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(file: &mut impl Read, offset: u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    file.read_exact(&mut buf).map_err(|_| truncated(offset, 4))?;
    Ok(u32::from_le_bytes(buf))
}
