//! Feature maps, text embeddings and their binary interchange formats.
//!
//! `FMAP` (little-endian): magic `FMAP`, version `u32 = 1`, height `u32`,
//! width `u32`, dim `u32`, dtype `u8` (0 = f32, 1 = f16), source tag as a
//! `u16`-length-prefixed UTF-8 string, row-major `H×W×F` payload, then a
//! CRC32 of every preceding byte.
//!
//! `TEMB`: magic `TEMB`, version `u32 = 1`, dim `u32`, label as a
//! `u16`-length-prefixed UTF-8 string, `dim` f32 values, CRC32 of every
//! preceding byte.

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::image_buf::Image;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const TEMB_MAGIC: &[u8; 4] = b"TEMB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, expected {0}")]
    BadMagic(&'static str),
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }
}

/// `height × width × dim` feature vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub source_tag: String,
}

impl FeatureMap {
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn to_image(&self) -> Image {
        Image::from_data(
            self.width,
            self.height,
            self.dim,
            self.data.iter().map(|v| *v as f64).collect(),
        )
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.dim == 0 {
            return Err(FeatureError::Malformed("feature dim must be >= 1".into()));
        }
        if self.data.len() != self.height * self.width * self.dim {
            return Err(FeatureError::Malformed("payload size does not match header".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Malformed("non-finite feature value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub label: String,
    pub vector: Vec<f32>,
}

impl TextEmbedding {
    /// Builds an embedding scaled to unit L2 norm.
    pub fn normalized(label: &str, vector: &[f64]) -> Self {
        let n = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            label: label.to_string(),
            vector: vector.iter().map(|v| (v / n) as f32).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-5
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<(), FeatureError> {
    let len: u16 = s
        .len()
        .try_into()
        .map_err(|_| FeatureError::Malformed("string longer than 65535 bytes".into()))?;
    out.write_u16::<LittleEndian>(len)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String, FeatureError> {
    let len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(eof)?;
    String::from_utf8(buf).map_err(|_| FeatureError::Malformed("string is not UTF-8".into()))
}

fn eof(e: std::io::Error) -> FeatureError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        FeatureError::Truncated
    } else {
        FeatureError::Io(e)
    }
}

/// Splits off and verifies the CRC32 trailer.
fn checked_body<'a>(bytes: &'a [u8], magic: &'static [u8; 4], name: &'static str) -> Result<&'a [u8], FeatureError> {
    if bytes.len() < 4 {
        return Err(FeatureError::Truncated);
    }
    if &bytes[..4] != magic {
        return Err(FeatureError::BadMagic(name));
    }
    if bytes.len() < 8 {
        return Err(FeatureError::Truncated);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FeatureError::ChecksumMismatch { stored, computed });
    }
    Ok(body)
}

pub fn encode_fmap(map: &FeatureMap, dtype: Dtype) -> Result<Vec<u8>, FeatureError> {
    map.validate()?;
    let mut out = Vec::with_capacity(32 + map.data.len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(map.height as u32)?;
    out.write_u32::<LittleEndian>(map.width as u32)?;
    out.write_u32::<LittleEndian>(map.dim as u32)?;
    out.write_u8(dtype.code())?;
    write_str(&mut out, &map.source_tag)?;
    match dtype {
        Dtype::F32 => {
            for v in &map.data {
                out.write_f32::<LittleEndian>(*v)?;
            }
        }
        Dtype::F16 => {
            for v in &map.data {
                out.write_u16::<LittleEndian>(f16::from_f32(*v).to_bits())?;
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.write_u32::<LittleEndian>(crc)?;
    Ok(out)
}

pub fn decode_fmap(bytes: &[u8]) -> Result<FeatureMap, FeatureError> {
    let body = checked_body(bytes, FMAP_MAGIC, "FMAP")?;
    let mut r = Cursor::new(&body[4..]);
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != FORMAT_VERSION {
        return Err(FeatureError::VersionUnsupported(version));
    }
    let height = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let width = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if dim == 0 {
        return Err(FeatureError::Malformed("feature dim must be >= 1".into()));
    }
    let dtype = match r.read_u8().map_err(eof)? {
        0 => Dtype::F32,
        1 => Dtype::F16,
        other => return Err(FeatureError::Malformed(format!("unknown dtype {other}"))),
    };
    let source_tag = read_str(&mut r)?;
    let count = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| FeatureError::Malformed("dimensions overflow".into()))?;
    let width_bytes = match dtype {
        Dtype::F32 => 4,
        Dtype::F16 => 2,
    };
    let remaining = body.len() - 4 - r.position() as usize;
    if remaining != count * width_bytes {
        return Err(if remaining < count * width_bytes {
            FeatureError::Truncated
        } else {
            FeatureError::Malformed("trailing bytes after payload".into())
        });
    }
    let data = (0..count)
        .map(|_| match dtype {
            Dtype::F32 => r.read_f32::<LittleEndian>().map_err(eof),
            Dtype::F16 => r.read_u16::<LittleEndian>().map(|b| f16::from_bits(b).to_f32()).map_err(eof),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let map = FeatureMap {
        height,
        width,
        dim,
        data,
        source_tag,
    };
    map.validate()?;
    Ok(map)
}

pub fn write_fmap(map: &FeatureMap, path: &Path, dtype: Dtype) -> Result<(), FeatureError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_fmap(map, dtype)?)?;
    Ok(())
}

pub fn read_fmap(path: &Path) -> Result<FeatureMap, FeatureError> {
    decode_fmap(&std::fs::read(path)?)
}

pub fn encode_temb(emb: &TextEmbedding) -> Result<Vec<u8>, FeatureError> {
    if emb.vector.is_empty() {
        return Err(FeatureError::Malformed("embedding dim must be >= 1".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(TEMB_MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(emb.vector.len() as u32)?;
    write_str(&mut out, &emb.label)?;
    for v in &emb.vector {
        out.write_f32::<LittleEndian>(*v)?;
    }
    let crc = crc32fast::hash(&out);
    out.write_u32::<LittleEndian>(crc)?;
    Ok(out)
}

/// Decodes a `TEMB` file. Vectors are returned as stored; a norm away from
/// one is logged, not corrected.
pub fn decode_temb(bytes: &[u8]) -> Result<TextEmbedding, FeatureError> {
    let body = checked_body(bytes, TEMB_MAGIC, "TEMB")?;
    let mut r = Cursor::new(&body[4..]);
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != FORMAT_VERSION {
        return Err(FeatureError::VersionUnsupported(version));
    }
    let dim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if dim == 0 {
        return Err(FeatureError::Malformed("embedding dim must be >= 1".into()));
    }
    let label = read_str(&mut r)?;
    let remaining = body.len() - 4 - r.position() as usize;
    if remaining != dim * 4 {
        return Err(if remaining < dim * 4 {
            FeatureError::Truncated
        } else {
            FeatureError::Malformed("trailing bytes after vector".into())
        });
    }
    let vector = (0..dim)
        .map(|_| r.read_f32::<LittleEndian>().map_err(eof))
        .collect::<Result<Vec<_>, _>>()?;
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(FeatureError::Malformed("non-finite embedding value".into()));
    }
    let emb = TextEmbedding { label, vector };
    if !emb.is_unit() {
        log::warn!("embedding {:?} has norm {:.6}, expected 1", emb.label, emb.norm());
    }
    Ok(emb)
}

pub fn write_temb(emb: &TextEmbedding, path: &Path) -> Result<(), FeatureError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_temb(emb)?)?;
    Ok(())
}

pub fn read_temb(path: &Path) -> Result<TextEmbedding, FeatureError> {
    decode_temb(&std::fs::read(path)?)
}

/// `features/<backbone>/<image stem>.fmap` under `root`.
pub fn fmap_path(root: &Path, backbone: &str, image_name: &str) -> PathBuf {
    let stem = Path::new(image_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image_name.to_string());
    root.join("features").join(backbone).join(format!("{stem}.fmap"))
}

/// Lowercase ASCII slug of a prompt label, used for `prompts/<slug>.temb`.
pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("prompt");
    }
    out
}

/// Bilinear resize with edge clamping, half-pixel (align-corners = false) sampling.
pub fn resize_bilinear(map: &FeatureMap, new_h: usize, new_w: usize) -> FeatureMap {
    assert!(new_h >= 1 && new_w >= 1, "target size must be positive");
    if new_h == map.height && new_w == map.width {
        return map.clone();
    }
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = axis(new_w, map.width);
    let ys = axis(new_h, map.height);
    let d = map.dim;
    let mut data = Vec::with_capacity(new_h * new_w * d);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (p00, p01) = (map.pixel(x0, y0), map.pixel(x1, y0));
            let (p10, p11) = (map.pixel(x0, y1), map.pixel(x1, y1));
            for c in 0..d {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    FeatureMap {
        height: new_h,
        width: new_w,
        dim: d,
        data,
        source_tag: map.source_tag.clone(),
    }
}

/// Index of the nearest palette colour for every pixel; ties go to the
/// lower index.
pub fn palette_assignment(rgb: &Image, palette: &[[f64; 3]]) -> Vec<usize> {
    assert!(!palette.is_empty(), "palette must be nonempty");
    (0..rgb.width * rgb.height)
        .map(|p| {
            let px = &rgb.data[3 * p..3 * p + 3];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, col) in palette.iter().enumerate() {
                let d: f64 = (0..3).map(|c| (px[c] - col[c]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Stand-in for a learned encoder: each pixel receives the embedding of its
/// nearest palette colour.
pub fn synth_features(rgb: &Image, palette: &[([f64; 3], TextEmbedding)]) -> FeatureMap {
    let colors: Vec<[f64; 3]> = palette.iter().map(|(c, _)| *c).collect();
    let dim = palette[0].1.dim();
    assert!(palette.iter().all(|(_, e)| e.dim() == dim), "palette dims differ");
    let assign = palette_assignment(rgb, &colors);
    let data = assign
        .iter()
        .flat_map(|&k| palette[k].1.vector.iter().copied())
        .collect();
    FeatureMap {
        height: rgb.height,
        width: rgb.width,
        dim,
        data,
        source_tag: "synthetic".into(),
    }
}

/// `count` seeded random unit vectors in `dim` dimensions, mutually
/// orthogonal (Gram–Schmidt).
pub fn orthonormal_vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot fit {count} orthogonal vectors in {dim} dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}
