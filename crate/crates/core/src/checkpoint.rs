//! `.gsplat` checkpoint files.
//!
//! Layout (little-endian): magic `GSPL`, version `u32 = 1`, count `u64`,
//! feature dim `u32`, SH degree `u32`, then the parameter arrays of
//! [`GaussianSet`] in declaration order as `f32`, then a CRC32 of the array
//! payload.

use std::io::{Cursor, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::scene::GaussianSet;
use crate::sh;

pub const MAGIC: &[u8; 4] = b"GSPL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Malformed(String),
}

pub fn encode(set: &GaussianSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u64::<LittleEndian>(set.len() as u64).unwrap();
    out.write_u32::<LittleEndian>(set.feature_dim as u32).unwrap();
    out.write_u32::<LittleEndian>(set.sh_degree as u32).unwrap();
    let header_len = out.len();
    for array in [
        &set.positions,
        &set.log_scales,
        &set.rotations,
        &set.opacity_logits,
        &set.colors_sh,
        &set.features,
    ] {
        for v in array.iter() {
            out.write_f32::<LittleEndian>(*v as f32).unwrap();
        }
    }
    let crc = crc32fast::hash(&out[header_len..]);
    out.write_u32::<LittleEndian>(crc).unwrap();
    out
}

pub fn decode(bytes: &[u8]) -> Result<GaussianSet, CheckpointError> {
    let eof = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    };
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Cursor::new(&bytes[4..]);
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }
    let n = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let f = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let degree = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if degree > sh::MAX_DEGREE || f == 0 {
        return Err(CheckpointError::Malformed(format!(
            "feature dim {f}, sh degree {degree}"
        )));
    }
    let header_len = 4 + r.position() as usize;
    let b = sh::num_coeffs(degree);
    let per_gaussian = 3 + 3 + 4 + 1 + 3 * b + f;
    let floats = n
        .checked_mul(per_gaussian)
        .ok_or_else(|| CheckpointError::Malformed("count overflow".into()))?;
    let payload_len = floats * 4;
    if bytes.len() != header_len + payload_len + 4 {
        return Err(CheckpointError::Truncated);
    }
    let payload = &bytes[header_len..header_len + payload_len];
    let stored = u32::from_le_bytes(bytes[header_len + payload_len..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut r = Cursor::new(payload);
    let mut take = |count: usize| -> Vec<f64> {
        (0..count)
            .map(|_| r.read_f32::<LittleEndian>().unwrap() as f64)
            .collect()
    };
    Ok(GaussianSet {
        sh_degree: degree,
        feature_dim: f,
        positions: take(3 * n),
        log_scales: take(3 * n),
        rotations: take(4 * n),
        opacity_logits: take(n),
        colors_sh: take(3 * b * n),
        features: take(f * n),
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn save(set: &GaussianSet, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(set))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GaussianSet, CheckpointError> {
    decode(&std::fs::read(path)?)
}
