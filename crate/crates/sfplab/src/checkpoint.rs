//! Bit-exact model checkpoints.
//!
//! Binary layout (all integers little-endian): magic `SFPC`, u32 version,
//! u32 tensor count, then per tensor a u16 name length, the UTF-8 name,
//! u8 ndim, u32 dims, and a row-major 32-bit IEEE-754 payload. A sidecar
//! `<path>.json` manifest duplicates the [`ModelConfig`].
//!
//! The decoder treats its input as untrusted: it validates sizes before
//! allocating and never panics on malformed bytes.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numkernel::Matrix;

pub const MAGIC: [u8; 4] = *b"SFPC";
pub const VERSION: u32 = 1;

const MAX_TENSORS: u32 = 65_536;
const MAX_NAME_LEN: u16 = 4096;
const MAX_DIM: u32 = 1 << 24;
const MAX_ELEMENTS: u64 = 1 << 26;

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Serialize named tensors in the checkpoint wire format.
pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, &Matrix)]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[2u8])?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_checked<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Input(format!("checkpoint truncated while reading {what}")))
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_checked(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_checked(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Decode a checkpoint byte stream into named tensors.
pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Matrix)>> {
    let mut magic = [0u8; 4];
    read_exact_checked(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Input(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(r, "tensor count")?;
    if count > MAX_TENSORS {
        return Err(Error::Input(format!("implausible tensor count {count}")));
    }

    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = read_u16(r, "name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Input(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exact_checked(r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Input("tensor name is not UTF-8".into()))?;

        let mut ndim = [0u8; 1];
        read_exact_checked(r, &mut ndim, "ndim")?;
        if ndim[0] != 2 {
            return Err(Error::Input(format!(
                "tensor {name:?}: unsupported ndim {}",
                ndim[0]
            )));
        }
        let rows = read_u32(r, "rows")?;
        let cols = read_u32(r, "cols")?;
        if rows == 0 || cols == 0 || rows > MAX_DIM || cols > MAX_DIM {
            return Err(Error::Input(format!(
                "tensor {name:?}: implausible dims {rows}x{cols}"
            )));
        }
        let elements = rows as u64 * cols as u64;
        if elements > MAX_ELEMENTS {
            return Err(Error::Input(format!(
                "tensor {name:?}: {elements} elements exceeds limit"
            )));
        }
        let mut payload = vec![0u8; (elements * 4) as usize];
        read_exact_checked(r, &mut payload, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, Matrix::from_vec(rows as usize, cols as usize, data)?));
    }

    let mut trailer = [0u8; 1];
    match r.read(&mut trailer) {
        Ok(0) => Ok(tensors),
        Ok(_) => Err(Error::Input("trailing bytes after last tensor".into())),
        Err(e) => Err(e.into()),
    }
}

/// Write the checkpoint and its JSON manifest.
pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &params.tensors())?;
    std::fs::write(path, buf)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
    let manifest = serde_json::to_string_pretty(&params.config)?;
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", mpath.display())))?;
    Ok(())
}

/// Load a checkpoint plus its manifest back into [`ModelParams`].
pub fn load(path: &Path) -> Result<ModelParams> {
    let mpath = manifest_path(path);
    let manifest = std::fs::read_to_string(&mpath)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", mpath.display())))?;
    let config: ModelConfig = serde_json::from_str(&manifest)?;
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let tensors = read_tensors(&mut bytes.as_slice())?;
    ModelParams::from_tensors(config, tensors)
}
