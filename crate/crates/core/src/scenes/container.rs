//! "TODS" dataset container: a little-endian binary format holding
//! homogeneous (image, mask) records. Round-trips are bit-exact.
//!
//! Layout: magic "TODS", version u16, count u32, H u16, W u16, C u16,
//! K u16, then per sample C*H*W image float32s followed by H*W mask bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{class_histogram, SceneSample};
use crate::error::{Error, Result};
use crate::numerics::IGNORE_INDEX;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"TODS";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u16,
    pub count: u32,
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub classes: u16,
}

impl ContainerHeader {
    pub fn sample_bytes(&self) -> u64 {
        let pixels = u64::from(self.height) * u64::from(self.width);
        pixels * u64::from(self.channels) * 4 + pixels
    }
}

pub fn write_container(samples: &[SceneSample], classes: usize, path: &Path) -> Result<()> {
    let (c, h, w) = match samples.first() {
        Some(s) => {
            let shape = s.image.shape();
            (shape[0], shape[1], shape[2])
        }
        None => (0, 0, 0),
    };
    for s in samples {
        if s.image.shape() != [c, h, w] || s.mask.len() != h * w {
            return Err(Error::Contract(
                "write_container: heterogeneous sample shapes".into(),
            ));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(samples.len() as u32).to_le_bytes())?;
    for dim in [h, w, c, classes] {
        out.write_all(&(dim as u16).to_le_bytes())?;
    }
    for s in samples {
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&s.mask)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<ContainerHeader> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut file = BufReader::new(File::open(path)?);
    read_header_from(&mut file)
}

fn read_header_from(file: &mut impl Read) -> Result<ContainerHeader> {
    let mut magic = [0u8; 4];
    read_exact_at(file, &mut magic, 0)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }
    let version = read_u16(file, 4)?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let mut count_buf = [0u8; 4];
    read_exact_at(file, &mut count_buf, 6)?;
    let count = u32::from_le_bytes(count_buf);
    let height = read_u16(file, 10)?;
    let width = read_u16(file, 12)?;
    let channels = read_u16(file, 14)?;
    let classes = read_u16(file, 16)?;
    Ok(ContainerHeader {
        version,
        count,
        height,
        width,
        channels,
        classes,
    })
}

pub fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<SceneSample>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let declared = File::open(path)?.metadata()?.len();
    let mut file = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut file)?;
    let expected = 18 + u64::from(header.count) * header.sample_bytes();
    if declared != expected {
        return Err(Error::Format {
            offset: declared.min(expected),
            msg: format!("expected {expected} bytes for {} samples, file has {declared}", header.count),
        });
    }
    let (h, w, c, k) = (
        usize::from(header.height),
        usize::from(header.width),
        usize::from(header.channels),
        usize::from(header.classes),
    );
    let mut samples = Vec::with_capacity(header.count as usize);
    let mut offset = 18u64;
    for _ in 0..header.count {
        let mut image = vec![0.0f32; c * h * w];
        let mut buf = [0u8; 4];
        for v in image.iter_mut() {
            read_exact_at(&mut file, &mut buf, offset)?;
            *v = f32::from_le_bytes(buf);
            offset += 4;
        }
        let mut mask = vec![0u8; h * w];
        read_exact_at(&mut file, &mut mask, offset)?;
        offset += mask.len() as u64;
        for &m in &mask {
            if m != IGNORE_INDEX && usize::from(m) >= k {
                return Err(Error::Format {
                    offset,
                    msg: format!("mask value {m} out of range for {k} classes"),
                });
            }
        }
        // The condition vector is derived, not stored; filtered masks keep
        // their non-ignored histogram.
        let cond_hist = class_histogram(&mask, k)?;
        samples.push(SceneSample {
            image: Tensor::new(vec![c, h, w], image).expect("container shape"),
            mask,
            cond_hist,
        });
    }
    Ok((header, samples))
}

fn read_u16(file: &mut impl Read, offset: u64) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact_at(file, &mut buf, offset)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_exact_at(file: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<()> {
    file.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                offset,
                msg: format!("truncated: expected {} more bytes", buf.len()),
            }
        } else {
            Error::Io(e)
        }
    })
}
