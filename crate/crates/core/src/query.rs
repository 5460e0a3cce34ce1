//! Text-prompted queries over rendered feature maps: cosine heatmaps,
//! threshold masks, argmax point prompts, label maps and PCA previews.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMap, TextEmbedding};
use crate::image_buf::{Image, ImageError};

pub const DEFAULT_TAU: f64 = 0.75;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("feature dim {feature} does not match embedding dim {embedding}")]
    DimMismatch { feature: usize, embedding: usize },
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("heatmap is empty")]
    EmptyHeatmap,
    #[error("at least one label is required")]
    NoLabels,
    #[error("PCA needs at least 3 pixels")]
    TooFewPixels,
    #[error("image shapes differ")]
    ShapeMismatch,
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryHeatmap {
    pub height: usize,
    pub width: usize,
    /// Cosine similarity in `[-1, 1]`, row-major.
    pub raw: Vec<f64>,
    /// `(raw + 1) / 2`.
    pub normalized: Vec<f64>,
    pub prompt_label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    pub threshold_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointPrompt {
    /// Column.
    pub x: usize,
    /// Row, origin top-left.
    pub y: usize,
    pub score: f64,
    pub prompt_label: String,
    pub view_id: String,
}

/// On-disk form of a [`PointPrompt`], consumed by mask-refinement tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPromptDocument {
    pub view_id: String,
    pub prompt_label: String,
    pub x: usize,
    pub y: usize,
    pub score: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub source: String,
}

impl PointPrompt {
    pub fn document(&self, image_width: usize, image_height: usize) -> PointPromptDocument {
        PointPromptDocument {
            view_id: self.view_id.clone(),
            prompt_label: self.prompt_label.clone(),
            x: self.x,
            y: self.y,
            score: self.score,
            image_width,
            image_height,
            source: "lseg_argmax".into(),
        }
    }
}

impl PointPromptDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("point prompt serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

fn dot_and_norm(f: &[f32], t: &[f32]) -> (f64, f64) {
    let mut dot = 0.0;
    let mut nn = 0.0;
    for (a, b) in f.iter().zip(t) {
        let a = *a as f64;
        dot += a * *b as f64;
        nn += a * a;
    }
    (dot, nn.sqrt())
}

pub fn cosine_heatmap(feature: &FeatureMap, t: &TextEmbedding) -> Result<QueryHeatmap, QueryError> {
    if feature.dim != t.dim() {
        return Err(QueryError::DimMismatch {
            feature: feature.dim,
            embedding: t.dim(),
        });
    }
    let t_norm = t.norm();
    let raw: Vec<f64> = feature
        .data
        .chunks_exact(feature.dim)
        .map(|f| {
            let (dot, norm) = dot_and_norm(f, &t.vector);
            if norm < COSINE_EPS {
                0.0
            } else {
                (dot / (norm * t_norm + COSINE_EPS)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    let normalized = raw.iter().map(|r| (r + 1.0) / 2.0).collect();
    Ok(QueryHeatmap {
        height: feature.height,
        width: feature.width,
        raw,
        normalized,
        prompt_label: t.label.clone(),
    })
}

pub fn threshold_mask(h: &QueryHeatmap, tau: f64) -> Result<BinaryMask, QueryError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(QueryError::InvalidThreshold(tau));
    }
    Ok(BinaryMask {
        height: h.height,
        width: h.width,
        bits: h.normalized.iter().map(|v| *v >= tau).collect(),
        threshold_used: tau,
    })
}

/// Global maximum of the normalized heatmap; ties resolve to the smallest
/// row, then the smallest column.
pub fn argmax_point(h: &QueryHeatmap, view_id: &str) -> Result<PointPrompt, QueryError> {
    if h.normalized.is_empty() {
        return Err(QueryError::EmptyHeatmap);
    }
    let mut best = 0;
    for (i, v) in h.normalized.iter().enumerate() {
        if *v > h.normalized[best] {
            best = i;
        }
    }
    Ok(PointPrompt {
        x: best % h.width,
        y: best / h.width,
        score: h.normalized[best],
        prompt_label: h.prompt_label.clone(),
        view_id: view_id.to_string(),
    })
}

/// Per-pixel argmax of raw cosine similarity over `labels`; ties go to the
/// lowest label index.
pub fn label_segmentation(feature: &FeatureMap, labels: &[TextEmbedding]) -> Result<LabelMap, QueryError> {
    if labels.is_empty() {
        return Err(QueryError::NoLabels);
    }
    let maps = labels
        .iter()
        .map(|t| cosine_heatmap(feature, t))
        .collect::<Result<Vec<_>, _>>()?;
    let n = feature.height * feature.width;
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            for (k, m) in maps.iter().enumerate() {
                if m.raw[p] > maps[best].raw[p] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(LabelMap {
        height: feature.height,
        width: feature.width,
        labels,
    })
}

/// Principal components of the per-pixel features.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Up to three unit components, strongest first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// Eigen-decomposes the feature covariance; each component is signed so
/// its largest-magnitude loading is positive.
pub fn feature_pca(feature: &FeatureMap) -> Pca {
    let (n, d) = (feature.height * feature.width, feature.dim);
    let mut mean = vec![0.0; d];
    for px in feature.data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for px in feature.data.chunks_exact(d) {
        for j in 0..d {
            centered[j] = px[j] as f64 - mean[j];
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[(a, b)] /= n as f64;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    for &k in order.iter().take(3) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    Pca {
        mean,
        components,
        eigenvalues,
    }
}

/// Relative eigenvalue below which a component is treated as constant.
const PCA_RANK_TOL: f64 = 1e-10;

/// Three-channel false-colour view of a feature map. Each channel is one
/// principal component, min-max normalized; components that carry no
/// variance (and any that do not exist because `dim < 3`) are rendered at
/// 0.5. A map whose pixels are all identical yields a uniform 0.5 image.
pub fn pca_visualize(feature: &FeatureMap) -> Result<Image, QueryError> {
    let n = feature.height * feature.width;
    if n < 3 {
        return Err(QueryError::TooFewPixels);
    }
    let pca = feature_pca(feature);
    let d = feature.dim;
    let lead = pca.eigenvalues.first().copied().unwrap_or(0.0);
    let mut out = Image::filled(feature.width, feature.height, 3, 0.5);
    for (c, (comp, ev)) in pca.components.iter().zip(&pca.eigenvalues).enumerate() {
        if lead <= 0.0 || *ev <= PCA_RANK_TOL * lead {
            continue;
        }
        let proj: Vec<f64> = feature
            .data
            .chunks_exact(d)
            .map(|px| (0..d).map(|j| (px[j] as f64 - pca.mean[j]) * comp[j]).sum())
            .collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            continue;
        }
        for (p, v) in proj.iter().enumerate() {
            out.data[3 * p + c] = (v - lo) / (hi - lo);
        }
    }
    Ok(out)
}

/// Heatmap colour map stops, dark blue at 0 to red at 1.
const COLORMAP: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 0.5]),
    (0.2, [0.0, 0.0, 1.0]),
    (0.45, [0.0, 1.0, 1.0]),
    (0.7, [1.0, 1.0, 0.0]),
    (1.0, [1.0, 0.0, 0.0]),
];

pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    for w in COLORMAP.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if v <= t1 {
            let f = (v - t0) / (t1 - t0);
            return std::array::from_fn(|k| c0[k] + (c1[k] - c0[k]) * f);
        }
    }
    COLORMAP[COLORMAP.len() - 1].1
}

/// Colour-mapped heatmap without a base image.
pub fn heatmap_image(h: &QueryHeatmap) -> Image {
    let data = h.normalized.iter().flat_map(|v| colormap(*v)).collect();
    Image::from_data(h.width, h.height, 3, data)
}

pub enum OverlaySource<'a> {
    Mask(&'a BinaryMask),
    Heatmap(&'a QueryHeatmap),
}

const OVERLAY_ALPHA: f64 = 0.5;
const MASK_TINT: [f64; 3] = [1.0, 0.0, 0.0];

/// Blends a heatmap (colour-mapped) or a mask (red tint on masked pixels)
/// over `base` at 50% opacity.
pub fn overlay(base: &Image, source: OverlaySource<'_>) -> Result<Image, QueryError> {
    let (w, h) = match &source {
        OverlaySource::Mask(m) => (m.width, m.height),
        OverlaySource::Heatmap(hm) => (hm.width, hm.height),
    };
    if base.channels != 3 || base.width != w || base.height != h {
        return Err(QueryError::ShapeMismatch);
    }
    let mut out = base.clone();
    for p in 0..w * h {
        let tint = match &source {
            OverlaySource::Mask(m) if m.bits[p] => MASK_TINT,
            OverlaySource::Mask(_) => continue,
            OverlaySource::Heatmap(hm) => colormap(hm.normalized[p]),
        };
        for c in 0..3 {
            let v = &mut out.data[3 * p + c];
            *v = (1.0 - OVERLAY_ALPHA) * *v + OVERLAY_ALPHA * tint[c];
        }
    }
    Ok(out)
}

impl BinaryMask {
    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        Self {
            height,
            width,
            bits,
            threshold_used: f64::NAN,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0;
        let mut union = 0;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_data(
            self.width,
            self.height,
            1,
            self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// 8-bit grayscale PNG, 0 = background, 255 = foreground.
    pub fn encode_png(&self) -> Result<Vec<u8>, QueryError> {
        Ok(self.to_image().encode_png()?)
    }

    /// Imports an 8-bit single-channel mask; values above 127 are foreground.
    pub fn decode_png(bytes: &[u8], width: usize, height: usize) -> Result<Self, QueryError> {
        let img = Image::decode_png_gray(bytes)?;
        if img.width != width || img.height != height {
            return Err(QueryError::ShapeMismatch);
        }
        Ok(Self::from_bits(
            width,
            height,
            img.data.iter().map(|v| *v > 127.0 / 255.0).collect(),
        ))
    }
}
