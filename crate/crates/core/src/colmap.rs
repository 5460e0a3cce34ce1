//! COLMAP sparse model reader/writer.
//!
//! Supports the `cameras`, `images` and `points3D` files in both the text and
//! the little-endian binary layout documented at
//! <https://colmap.github.io/format.html>. Only pinhole-family camera models are
//! accepted; 2D keypoints and 3D point tracks are read and dropped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("file ended before the declared records were read")]
    TruncatedFile,
    #[error("unsupported camera model {0}")]
    UnsupportedCameraModel(String),
    #[error("malformed record at {location}: {reason}")]
    MalformedRecord { location: String, reason: String },
    #[error("non-finite value at {0}")]
    NonFiniteValue(String),
    #[error("missing model file {0}")]
    MissingFile(String),
    #[error("image {image} references unknown camera {camera_id}")]
    InconsistentReferences { image: String, camera_id: u32 },
    #[error("camera centres span zero extent")]
    DegenerateExtent,
    #[error("invalid split rule: {0}")]
    InvalidSplit(String),
}

type Result<T> = std::result::Result<T, ColmapError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFormat {
    Text,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
    SimpleRadial,
}

impl CameraModel {
    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
            CameraModel::SimpleRadial => "SIMPLE_RADIAL",
        }
    }

    fn from_name(name: &str) -> Result<Self> {
        match name {
            "SIMPLE_PINHOLE" => Ok(CameraModel::SimplePinhole),
            "PINHOLE" => Ok(CameraModel::Pinhole),
            "SIMPLE_RADIAL" => Ok(CameraModel::SimpleRadial),
            other => Err(ColmapError::UnsupportedCameraModel(other.to_string())),
        }
    }

    /// COLMAP's numeric model id used by the binary format.
    pub fn id(self) -> i32 {
        match self {
            CameraModel::SimplePinhole => 0,
            CameraModel::Pinhole => 1,
            CameraModel::SimpleRadial => 2,
        }
    }

    fn from_id(id: i32) -> Result<Self> {
        match id {
            0 => Ok(CameraModel::SimplePinhole),
            1 => Ok(CameraModel::Pinhole),
            2 => Ok(CameraModel::SimpleRadial),
            other => Err(ColmapError::UnsupportedCameraModel(
                binary_model_name(other).to_string(),
            )),
        }
    }

    fn num_params(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
            CameraModel::SimpleRadial => 4,
        }
    }
}

fn binary_model_name(id: i32) -> &'static str {
    match id {
        3 => "RADIAL",
        4 => "OPENCV",
        5 => "OPENCV_FISHEYE",
        6 => "FULL_OPENCV",
        7 => "FOV",
        8 => "SIMPLE_RADIAL_FISHEYE",
        9 => "RADIAL_FISHEYE",
        10 => "THIN_PRISM_FISHEYE",
        _ => "UNKNOWN",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Zero unless the model is `SIMPLE_RADIAL`.
    pub radial_k1: f64,
}

impl CameraIntrinsics {
    fn from_params(
        camera_id: u32,
        model: CameraModel,
        width: u64,
        height: u64,
        params: &[f64],
        location: &str,
    ) -> Result<Self> {
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ColmapError::NonFiniteValue(location.to_string()));
        }
        let (fx, fy, cx, cy, k1) = match model {
            CameraModel::SimplePinhole => (params[0], params[0], params[1], params[2], 0.0),
            CameraModel::Pinhole => (params[0], params[1], params[2], params[3], 0.0),
            CameraModel::SimpleRadial => (params[0], params[0], params[1], params[2], params[3]),
        };
        let malformed = |reason: &str| ColmapError::MalformedRecord {
            location: location.to_string(),
            reason: reason.to_string(),
        };
        if width == 0 || height == 0 || width > u32::MAX as u64 || height > u32::MAX as u64 {
            return Err(malformed("image dimensions out of range"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(malformed("focal length must be positive"));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(malformed("principal point outside the image"));
        }
        if k1.abs() > 1e-6 {
            log::warn!(
                "camera {camera_id}: radial k1 = {k1} ignored; images are treated as undistorted"
            );
        }
        Ok(Self {
            camera_id,
            model,
            width: width as u32,
            height: height as u32,
            fx,
            fy,
            cx,
            cy,
            radial_k1: k1,
        })
    }

    fn params(&self) -> Vec<f64> {
        match self.model {
            CameraModel::SimplePinhole => vec![self.fx, self.cx, self.cy],
            CameraModel::Pinhole => vec![self.fx, self.fy, self.cx, self.cy],
            CameraModel::SimpleRadial => vec![self.fx, self.cx, self.cy, self.radial_k1],
        }
    }
}

/// World-to-camera pose of one registered image.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub image_id: u32,
    /// Unit quaternion `(w, x, y, z)`.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub image_name: String,
}

impl CameraPose {
    pub fn rotation(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.qvec;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.tvec)
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Stem of the image name, used as the view identifier.
    pub fn view_id(&self) -> String {
        Path::new(&self.image_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_name.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparsePoints {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub point_ids: Vec<u64>,
}

impl SparsePoints {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRule {
    /// Every k-th image in name order (indices 0, k, 2k, ...) is held out.
    EveryKth(usize),
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::EveryKth(8)
    }
}

impl std::str::FromStr for SplitRule {
    type Err = ColmapError;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s
            .trim()
            .strip_prefix("every_kth(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| ColmapError::InvalidSplit(s.to_string()))?;
        let k = inner
            .trim()
            .parse::<usize>()
            .map_err(|_| ColmapError::InvalidSplit(s.to_string()))?;
        SplitRule::every_kth(k)
    }
}

impl std::fmt::Display for SplitRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitRule::EveryKth(k) => write!(f, "every_kth({k})"),
        }
    }
}

impl SplitRule {
    pub fn every_kth(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(ColmapError::InvalidSplit(format!("k must be >= 2, got {k}")));
        }
        Ok(SplitRule::EveryKth(k))
    }

    fn is_test(&self, sorted_index: usize) -> bool {
        match *self {
            SplitRule::EveryKth(k) => sorted_index.is_multiple_of(k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub intrinsics: BTreeMap<u32, CameraIntrinsics>,
    pub train_views: Vec<CameraPose>,
    pub test_views: Vec<CameraPose>,
    pub points: SparsePoints,
    pub scene_extent: f64,
}

impl SceneInputs {
    pub fn all_views(&self) -> impl Iterator<Item = &CameraPose> {
        self.train_views.iter().chain(self.test_views.iter())
    }
}

// ---------------------------------------------------------------------------
// Text format

fn data_lines(bytes: &[u8]) -> Result<Vec<(usize, &str)>> {
    let text = std::str::from_utf8(bytes).map_err(|e| ColmapError::MalformedRecord {
        location: "file".into(),
        reason: format!("invalid UTF-8: {e}"),
    })?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l))
        .collect())
}

fn field<T: std::str::FromStr>(tokens: &[&str], idx: usize, line: usize, what: &str) -> Result<T> {
    let tok = tokens.get(idx).ok_or_else(|| ColmapError::MalformedRecord {
        location: format!("line {line}"),
        reason: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| ColmapError::MalformedRecord {
        location: format!("line {line}"),
        reason: format!("cannot parse {what} from {tok:?}"),
    })
}

fn finite(v: f64, location: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ColmapError::NonFiniteValue(location()))
    }
}

fn parse_cameras_text(bytes: &[u8]) -> Result<Vec<CameraIntrinsics>> {
    let mut out = Vec::new();
    for (line, text) in data_lines(bytes)? {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let camera_id: u32 = field(&tokens, 0, line, "camera id")?;
        let model_name: &str = tokens.get(1).copied().ok_or_else(|| ColmapError::MalformedRecord {
            location: format!("line {line}"),
            reason: "missing camera model".into(),
        })?;
        let model = CameraModel::from_name(model_name)?;
        let width: u64 = field(&tokens, 2, line, "width")?;
        let height: u64 = field(&tokens, 3, line, "height")?;
        if tokens.len() != 4 + model.num_params() {
            return Err(ColmapError::MalformedRecord {
                location: format!("line {line}"),
                reason: format!(
                    "{} expects {} parameters, found {}",
                    model.name(),
                    model.num_params(),
                    tokens.len().saturating_sub(4)
                ),
            });
        }
        let params = (0..model.num_params())
            .map(|i| field::<f64>(&tokens, 4 + i, line, "camera parameter"))
            .collect::<Result<Vec<_>>>()?;
        out.push(CameraIntrinsics::from_params(
            camera_id,
            model,
            width,
            height,
            &params,
            &format!("line {line}"),
        )?);
    }
    Ok(out)
}

fn normalized_quat(q: [f64; 4], location: &str) -> Result<[f64; 4]> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(ColmapError::MalformedRecord {
            location: location.to_string(),
            reason: "quaternion has zero norm".into(),
        });
    }
    Ok(q.map(|v| v / norm))
}

fn parse_images_text(bytes: &[u8]) -> Result<Vec<CameraPose>> {
    let lines = data_lines(bytes)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let (line, text) = lines[i];
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            i += 1;
            continue;
        }
        if tokens.len() < 10 {
            return Err(ColmapError::MalformedRecord {
                location: format!("line {line}"),
                reason: format!("image record needs 10 fields, found {}", tokens.len()),
            });
        }
        let image_id: u32 = field(&tokens, 0, line, "image id")?;
        let mut q = [0.0; 4];
        for (k, slot) in q.iter_mut().enumerate() {
            *slot = finite(field(&tokens, 1 + k, line, "quaternion")?, || {
                format!("line {line}")
            })?;
        }
        let mut t = [0.0; 3];
        for (k, slot) in t.iter_mut().enumerate() {
            *slot = finite(field(&tokens, 5 + k, line, "translation")?, || {
                format!("line {line}")
            })?;
        }
        let camera_id: u32 = field(&tokens, 8, line, "camera id")?;
        // Names may contain spaces.
        let name = tokens[9..].join(" ");
        out.push(CameraPose {
            image_id,
            qvec: normalized_quat(q, &format!("line {line}"))?,
            tvec: t,
            camera_id,
            image_name: name,
        });
        // Keypoint line follows every header and may be empty.
        i += 2;
    }
    out.sort_by_key(|p| p.image_id);
    Ok(out)
}

fn parse_points_text(bytes: &[u8]) -> Result<SparsePoints> {
    let mut pts = SparsePoints::default();
    for (line, text) in data_lines(bytes)? {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < 8 || !(tokens.len() - 8).is_multiple_of(2) {
            return Err(ColmapError::MalformedRecord {
                location: format!("line {line}"),
                reason: "point record needs id, xyz, rgb, error and (image, idx) pairs".into(),
            });
        }
        let id: u64 = field(&tokens, 0, line, "point id")?;
        let mut p = [0.0; 3];
        for (k, slot) in p.iter_mut().enumerate() {
            *slot = finite(field(&tokens, 1 + k, line, "position")?, || {
                format!("line {line}")
            })?;
        }
        let mut c = [0.0; 3];
        for (k, slot) in c.iter_mut().enumerate() {
            *slot = field::<u8>(&tokens, 4 + k, line, "color")? as f64 / 255.0;
        }
        pts.point_ids.push(id);
        pts.positions.push(p);
        pts.colors.push(c);
    }
    Ok(pts)
}

// ---------------------------------------------------------------------------
// Binary format

fn truncated(e: std::io::Error) -> ColmapError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ColmapError::TruncatedFile
    } else {
        ColmapError::Io(e)
    }
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    r.read_u64::<LittleEndian>().map_err(truncated)
}
fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(truncated)
}
fn read_i32(r: &mut Cursor<&[u8]>) -> Result<i32> {
    r.read_i32::<LittleEndian>().map_err(truncated)
}
fn read_f64(r: &mut Cursor<&[u8]>) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(truncated)
}

fn skip(r: &mut Cursor<&[u8]>, count: u64, size: u64) -> Result<()> {
    let bytes = count.checked_mul(size).ok_or(ColmapError::TruncatedFile)?;
    let remaining = r.get_ref().len() as u64 - r.position();
    if bytes > remaining {
        return Err(ColmapError::TruncatedFile);
    }
    r.set_position(r.position() + bytes);
    Ok(())
}

fn parse_cameras_binary(bytes: &[u8]) -> Result<Vec<CameraIntrinsics>> {
    let mut r = Cursor::new(bytes);
    let n = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let offset = r.position();
        let camera_id = read_u32(&mut r)?;
        let model = CameraModel::from_id(read_i32(&mut r)?)?;
        let width = read_u64(&mut r)?;
        let height = read_u64(&mut r)?;
        let params = (0..model.num_params())
            .map(|_| read_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        out.push(CameraIntrinsics::from_params(
            camera_id,
            model,
            width,
            height,
            &params,
            &format!("offset {offset}"),
        )?);
    }
    Ok(out)
}

fn parse_images_binary(bytes: &[u8]) -> Result<Vec<CameraPose>> {
    let mut r = Cursor::new(bytes);
    let n = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let offset = r.position();
        let location = || format!("offset {offset}");
        let image_id = read_u32(&mut r)?;
        let mut q = [0.0; 4];
        for slot in q.iter_mut() {
            *slot = finite(read_f64(&mut r)?, location)?;
        }
        let mut t = [0.0; 3];
        for slot in t.iter_mut() {
            *slot = finite(read_f64(&mut r)?, location)?;
        }
        let camera_id = read_u32(&mut r)?;
        let mut name = Vec::new();
        loop {
            let b = r.read_u8().map_err(truncated)?;
            if b == 0 {
                break;
            }
            name.push(b);
        }
        let name = String::from_utf8(name).map_err(|_| ColmapError::MalformedRecord {
            location: location(),
            reason: "image name is not UTF-8".into(),
        })?;
        let num_points = read_u64(&mut r)?;
        // x: f64, y: f64, point3D_id: i64
        skip(&mut r, num_points, 24)?;
        out.push(CameraPose {
            image_id,
            qvec: normalized_quat(q, &location())?,
            tvec: t,
            camera_id,
            image_name: name,
        });
    }
    out.sort_by_key(|p| p.image_id);
    Ok(out)
}

fn parse_points_binary(bytes: &[u8]) -> Result<SparsePoints> {
    let mut r = Cursor::new(bytes);
    let n = read_u64(&mut r)?;
    let mut pts = SparsePoints::default();
    for _ in 0..n {
        let offset = r.position();
        let id = read_u64(&mut r)?;
        let mut p = [0.0; 3];
        for slot in p.iter_mut() {
            *slot = finite(read_f64(&mut r)?, || format!("offset {offset}"))?;
        }
        let mut rgb = [0u8; 3];
        r.read_exact(&mut rgb).map_err(truncated)?;
        let _error = read_f64(&mut r)?;
        let track_len = read_u64(&mut r)?;
        // image_id: i32, point2D_idx: i32
        skip(&mut r, track_len, 8)?;
        pts.point_ids.push(id);
        pts.positions.push(p);
        pts.colors.push(rgb.map(|c| c as f64 / 255.0));
    }
    Ok(pts)
}

// ---------------------------------------------------------------------------
// Public parsing API

pub fn parse_cameras(bytes: &[u8], format: ModelFormat) -> Result<Vec<CameraIntrinsics>> {
    match format {
        ModelFormat::Text => parse_cameras_text(bytes),
        ModelFormat::Binary => parse_cameras_binary(bytes),
    }
}

/// Parses posed images, renormalizing quaternions and sorting by image id.
pub fn parse_images(bytes: &[u8], format: ModelFormat) -> Result<Vec<CameraPose>> {
    match format {
        ModelFormat::Text => parse_images_text(bytes),
        ModelFormat::Binary => parse_images_binary(bytes),
    }
}

pub fn parse_points3d(bytes: &[u8], format: ModelFormat) -> Result<SparsePoints> {
    match format {
        ModelFormat::Text => parse_points_text(bytes),
        ModelFormat::Binary => parse_points_binary(bytes),
    }
}

// ---------------------------------------------------------------------------
// Writers

pub fn write_cameras_text(cameras: &[CameraIntrinsics]) -> String {
    let mut s = String::from(
        "# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n",
    );
    let _ = writeln!(s, "# Number of cameras: {}", cameras.len());
    for c in cameras {
        let _ = write!(s, "{} {} {} {}", c.camera_id, c.model.name(), c.width, c.height);
        for p in c.params() {
            let _ = write!(s, " {p}");
        }
        s.push('\n');
    }
    s
}

pub fn write_images_text(poses: &[CameraPose]) -> String {
    let mut s = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    let _ = writeln!(s, "# Number of images: {}", poses.len());
    for p in poses {
        let [qw, qx, qy, qz] = p.qvec;
        let [tx, ty, tz] = p.tvec;
        let _ = writeln!(
            s,
            "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}",
            p.image_id, p.camera_id, p.image_name
        );
        s.push('\n');
    }
    s
}

fn color_u8(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_points_text(points: &SparsePoints) -> String {
    let mut s = String::from(
        "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
    );
    let _ = writeln!(s, "# Number of points: {}", points.len());
    for i in 0..points.len() {
        let [x, y, z] = points.positions[i];
        let [r, g, b] = points.colors[i].map(color_u8);
        let _ = writeln!(s, "{} {x} {y} {z} {r} {g} {b} 0", points.point_ids[i]);
    }
    s
}

pub fn write_cameras_binary(cameras: &[CameraIntrinsics]) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LittleEndian>(cameras.len() as u64).unwrap();
    for c in cameras {
        out.write_u32::<LittleEndian>(c.camera_id).unwrap();
        out.write_i32::<LittleEndian>(c.model.id()).unwrap();
        out.write_u64::<LittleEndian>(c.width as u64).unwrap();
        out.write_u64::<LittleEndian>(c.height as u64).unwrap();
        for p in c.params() {
            out.write_f64::<LittleEndian>(p).unwrap();
        }
    }
    out
}

pub fn write_images_binary(poses: &[CameraPose]) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LittleEndian>(poses.len() as u64).unwrap();
    for p in poses {
        out.write_u32::<LittleEndian>(p.image_id).unwrap();
        for v in p.qvec.iter().chain(p.tvec.iter()) {
            out.write_f64::<LittleEndian>(*v).unwrap();
        }
        out.write_u32::<LittleEndian>(p.camera_id).unwrap();
        out.extend_from_slice(p.image_name.as_bytes());
        out.push(0);
        out.write_u64::<LittleEndian>(0).unwrap();
    }
    out
}

pub fn write_points_binary(points: &SparsePoints) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LittleEndian>(points.len() as u64).unwrap();
    for i in 0..points.len() {
        out.write_u64::<LittleEndian>(points.point_ids[i]).unwrap();
        for v in points.positions[i] {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        out.extend(points.colors[i].map(color_u8));
        out.write_f64::<LittleEndian>(0.0).unwrap();
        out.write_u64::<LittleEndian>(0).unwrap();
    }
    out
}

/// Writes all three model files into `dir` in the requested format.
pub fn write_model(
    dir: &Path,
    format: ModelFormat,
    cameras: &[CameraIntrinsics],
    poses: &[CameraPose],
    points: &SparsePoints,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    match format {
        ModelFormat::Text => {
            std::fs::write(dir.join("cameras.txt"), write_cameras_text(cameras))?;
            std::fs::write(dir.join("images.txt"), write_images_text(poses))?;
            std::fs::write(dir.join("points3D.txt"), write_points_text(points))?;
        }
        ModelFormat::Binary => {
            std::fs::write(dir.join("cameras.bin"), write_cameras_binary(cameras))?;
            std::fs::write(dir.join("images.bin"), write_images_binary(poses))?;
            std::fs::write(dir.join("points3D.bin"), write_points_binary(points))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model loading

const MODEL_FILES: [&str; 3] = ["cameras", "images", "points3D"];

fn detect_format(dir: &Path) -> Result<ModelFormat> {
    let has = |ext: &str| MODEL_FILES.map(|f| dir.join(format!("{f}.{ext}")).is_file());
    if has("bin").iter().all(|b| *b) {
        return Ok(ModelFormat::Binary);
    }
    let txt = has("txt");
    if let Some(i) = txt.iter().position(|b| !b) {
        return Err(ColmapError::MissingFile(format!("{}.txt", MODEL_FILES[i])));
    }
    Ok(ModelFormat::Text)
}

/// Radius of the sphere centred at the camera-centre centroid that contains
/// every camera centre.
pub fn camera_extent<'a>(poses: impl IntoIterator<Item = &'a CameraPose>) -> f64 {
    let centers: Vec<Vector3<f64>> = poses.into_iter().map(|p| p.center()).collect();
    if centers.is_empty() {
        return 0.0;
    }
    let centroid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    centers
        .iter()
        .map(|c| (c - centroid).norm())
        .fold(0.0, f64::max)
}

/// Loads a sparse model directory and partitions its images.
pub fn load_model(dir: &Path, split: SplitRule) -> Result<SceneInputs> {
    let format = detect_format(dir)?;
    let ext = match format {
        ModelFormat::Text => "txt",
        ModelFormat::Binary => "bin",
    };
    let read = |name: &str| {
        let file = format!("{name}.{ext}");
        std::fs::read(dir.join(&file)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ColmapError::MissingFile(file),
            _ => ColmapError::Io(e),
        })
    };
    let cameras = parse_cameras(&read("cameras")?, format)?;
    let poses = parse_images(&read("images")?, format)?;
    let points = parse_points3d(&read("points3D")?, format)?;
    assemble(cameras, poses, points, split)
}

/// Validates references, applies the split rule and computes the extent.
pub fn assemble(
    cameras: Vec<CameraIntrinsics>,
    mut poses: Vec<CameraPose>,
    points: SparsePoints,
    split: SplitRule,
) -> Result<SceneInputs> {
    let intrinsics: BTreeMap<u32, CameraIntrinsics> =
        cameras.into_iter().map(|c| (c.camera_id, c)).collect();
    for p in &poses {
        if !intrinsics.contains_key(&p.camera_id) {
            return Err(ColmapError::InconsistentReferences {
                image: p.image_name.clone(),
                camera_id: p.camera_id,
            });
        }
    }
    let scene_extent = camera_extent(&poses);
    if !(scene_extent > 1e-12) {
        return Err(ColmapError::DegenerateExtent);
    }
    poses.sort_by(|a, b| a.image_name.cmp(&b.image_name).then(a.image_id.cmp(&b.image_id)));
    let mut train_views = Vec::new();
    let mut test_views = Vec::new();
    for (i, p) in poses.into_iter().enumerate() {
        if split.is_test(i) {
            test_views.push(p);
        } else {
            train_views.push(p);
        }
    }
    Ok(SceneInputs {
        intrinsics,
        train_views,
        test_views,
        points,
        scene_extent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pinhole_line() {
        let cams = parse_cameras(
            b"# header\n1 PINHOLE 1920 1080 1200.0 1200.0 960.0 540.0\n",
            ModelFormat::Text,
        )
        .unwrap();
        assert_eq!(
            cams,
            vec![CameraIntrinsics {
                camera_id: 1,
                model: CameraModel::Pinhole,
                width: 1920,
                height: 1080,
                fx: 1200.0,
                fy: 1200.0,
                cx: 960.0,
                cy: 540.0,
                radial_k1: 0.0,
            }]
        );
    }

    #[test]
    fn header_only_is_empty() {
        let cams = parse_cameras(b"# Camera list\n# Number of cameras: 0\n", ModelFormat::Text);
        assert!(cams.unwrap().is_empty());
    }

    #[test]
    fn fisheye_is_rejected() {
        let err = parse_cameras(b"1 FISHEYE 100 100 50 50 50 0.1\n", ModelFormat::Text);
        assert!(matches!(err, Err(ColmapError::UnsupportedCameraModel(n)) if n == "FISHEYE"));
    }

    #[test]
    fn binary_opencv_is_rejected_by_name() {
        let mut buf = Vec::new();
        buf.write_u64::<LittleEndian>(1).unwrap();
        buf.write_u32::<LittleEndian>(1).unwrap();
        buf.write_i32::<LittleEndian>(4).unwrap();
        let err = parse_cameras(&buf, ModelFormat::Binary);
        assert!(matches!(err, Err(ColmapError::UnsupportedCameraModel(n)) if n == "OPENCV"));
    }

    #[test]
    fn simple_radial_keeps_k1() {
        let cams = parse_cameras(b"3 SIMPLE_RADIAL 640 480 500 320 240 0.01\n", ModelFormat::Text)
            .unwrap();
        assert_eq!(cams[0].radial_k1, 0.01);
        assert_eq!(cams[0].fx, cams[0].fy);
    }

    #[test]
    fn principal_point_outside_image_is_malformed() {
        let err = parse_cameras(b"1 PINHOLE 100 100 50 50 150 50\n", ModelFormat::Text);
        assert!(matches!(err, Err(ColmapError::MalformedRecord { .. })));
    }

    #[test]
    fn identity_pose_and_quaternion_normalization() {
        let imgs = parse_images(
            b"2 2 0 0 0 0 0 0 1 b.png\n\n1 1 0 0 0 0 0 0 1 a.png\n1.0 2.0 -1\n",
            ModelFormat::Text,
        )
        .unwrap();
        assert_eq!(imgs[0].image_id, 1);
        assert_eq!(imgs[1].qvec, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(imgs[0].rotation(), Matrix3::identity());
    }

    #[test]
    fn image_names_may_contain_spaces() {
        let imgs = parse_images(b"1 1 0 0 0 0 0 0 1 my photo.png\n\n", ModelFormat::Text).unwrap();
        assert_eq!(imgs[0].image_name, "my photo.png");
    }

    #[test]
    fn non_finite_translation_rejected() {
        let err = parse_images(b"1 1 0 0 0 NaN 0 0 1 a.png\n\n", ModelFormat::Text);
        assert!(matches!(err, Err(ColmapError::NonFiniteValue(_))));
    }

    #[test]
    fn point_colors_scaled_to_unit_range() {
        let pts = parse_points3d(b"7 1 2 3 255 0 0 0.5 1 0 2 3\n", ModelFormat::Text).unwrap();
        assert_eq!(pts.colors, vec![[1.0, 0.0, 0.0]]);
        assert_eq!(pts.point_ids, vec![7]);
        let empty = parse_points3d(b"# none\n", ModelFormat::Text).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn truncated_binary_detected() {
        let bytes = write_cameras_binary(&parse_cameras(
            b"1 PINHOLE 10 10 5 5 5 5\n",
            ModelFormat::Text,
        )
        .unwrap());
        let err = parse_cameras(&bytes[..bytes.len() - 3], ModelFormat::Binary);
        assert!(matches!(err, Err(ColmapError::TruncatedFile)));
        assert!(matches!(
            parse_images(&[1, 0, 0], ModelFormat::Binary),
            Err(ColmapError::TruncatedFile)
        ));
    }

    #[test]
    fn split_rule_parsing() {
        assert_eq!("every_kth(5)".parse::<SplitRule>().unwrap(), SplitRule::EveryKth(5));
        assert!("every_kth(1)".parse::<SplitRule>().is_err());
        assert!("random".parse::<SplitRule>().is_err());
    }
}
