//! Versioned binary container for parameter vectors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DAESCKPT"
//! version    u32
//! header_len u32      length of the JSON header in bytes
//! header     JSON     caller-defined metadata
//! count      u32      number of vectors
//! per vector: len u64, then len f64 values (IEEE-754 bits, little-endian)
//! ```
//!
//! Values are written as raw bits, so a write/read round trip is bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DAESCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint content invalid: {0}")]
    Invalid(String),
}

pub fn write_container<W: Write, H: Serialize>(
    mut out: W,
    header: &H,
    vectors: &[&[f64]],
) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(header)?;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(header.len() as u32)?;
    out.write_all(&header)?;
    out.write_u32::<LittleEndian>(vectors.len() as u32)?;
    for v in vectors {
        out.write_u64::<LittleEndian>(v.len() as u64)?;
        for &x in v.iter() {
            out.write_u64::<LittleEndian>(x.to_bits())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_container<R: Read, H: DeserializeOwned>(
    mut input: R,
) -> Result<(H, Vec<Vec<f64>>), CheckpointError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = input.read_u32::<LittleEndian>()? as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let header = serde_json::from_slice(&header)?;
    let count = input.read_u32::<LittleEndian>()? as usize;
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = input.read_u64::<LittleEndian>()? as usize;
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(f64::from_bits(input.read_u64::<LittleEndian>()?));
        }
        vectors.push(v);
    }
    Ok((header, vectors))
}

pub fn save<H: Serialize>(path: &Path, header: &H, vectors: &[&[f64]]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    write_container(BufWriter::new(File::create(&tmp)?), header, vectors)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<Vec<f64>>), CheckpointError> {
    read_container(BufReader::new(File::open(path)?))
}
