//! Self-describing binary container shared by datasets, checkpoints and
//! rollout trajectories.
//!
//! Layout: `b"FLXP"`, `u32` format version, `u64` header length, a JSON
//! header of that many bytes, then the raw little-endian body. All integers
//! are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLXP";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_container<H: Serialize>(path: &Path, header: &H, body: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a flexipatch file", path.display())));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {}",
            path.display(),
            version
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let hlen = u64::from_le_bytes(buf8) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)?;
    let header = serde_json::from_slice(&json)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    Ok((header, body))
}

pub fn f64_to_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn f32_to_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

pub fn bytes_to_f64(b: &[u8]) -> Result<Vec<f64>> {
    if b.len() % 8 != 0 {
        return Err(Error::Format("f64 body length is not a multiple of 8".into()));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn bytes_to_f32_widened(b: &[u8]) -> Result<Vec<f64>> {
    if b.len() % 4 != 0 {
        return Err(Error::Format("f32 body length is not a multiple of 4".into()));
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect())
}
