//! Tile-based differentiable rasterizer for colour and feature channels.
//!
//! Each Gaussian is projected to a 2D splat (EWA linearization), assigned to
//! every screen tile its 3σ rectangle touches, and composited front to back.
//! A splat contributes to a pixel only if the pixel centre lies inside that
//! rectangle, so the result does not depend on the tiling.

mod backward;
mod project;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraView;
use crate::features::FeatureMap;
use crate::image_buf::Image;
use crate::scene::GaussianSet;

pub use backward::{render_backward, GaussianGradients, UpstreamGrads};
pub use project::{project_gaussian, Splat2D};

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("Gaussian {0} has a non-finite parameter")]
    NonFiniteParameter(usize),
    #[error("background feature has {found} channels, scene has {expected}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error("upstream gradient shape does not match the render")]
    GradShapeMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub alpha_clamp: f64,
    pub alpha_skip: f64,
    /// Added to both diagonal entries of every 2D covariance (pixel²).
    pub dilation: f64,
    pub background_rgb: [f64; 3],
    /// Empty means all zeros.
    pub background_feature: Vec<f64>,
    pub near_plane: f64,
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_clamp: 0.99,
            alpha_skip: 1.0 / 255.0,
            dilation: 0.3,
            background_rgb: [0.0; 3],
            background_feature: Vec::new(),
            near_plane: 0.01,
            min_transmittance: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<(), RasterError> {
        if !(0.0 < self.alpha_skip && self.alpha_skip < self.alpha_clamp && self.alpha_clamp < 1.0)
        {
            return Err(RasterError::InvalidConfig(
                "require 0 < alpha_skip < alpha_clamp < 1".into(),
            ));
        }
        if self.tile_size == 0 {
            return Err(RasterError::InvalidConfig("tile_size must be positive".into()));
        }
        if !self.background_feature.is_empty() && self.background_feature.len() != feature_dim {
            return Err(RasterError::FeatureDimMismatch {
                expected: feature_dim,
                found: self.background_feature.len(),
            });
        }
        Ok(())
    }

    pub fn background_feature(&self, feature_dim: usize) -> Vec<f64> {
        if self.background_feature.is_empty() {
            vec![0.0; feature_dim]
        } else {
            self.background_feature.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub feature: Image,
    pub alpha: Image,
    pub depth: Image,
    pub contributor_count: Vec<u32>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn feature_map(&self, source_tag: &str) -> FeatureMap {
        FeatureMap {
            height: self.feature.height,
            width: self.feature.width,
            dim: self.feature.channels,
            data: self.feature.data.iter().map(|v| *v as f32).collect(),
            source_tag: source_tag.to_string(),
        }
    }
}

/// A visible Gaussian after projection and colour evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub splat: Splat2D,
    /// Inverse 2D covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    /// Whether each colour channel was clamped at zero.
    pub color_clamped: [bool; 3],
    /// Inclusive pixel rectangle `(x0, y0, x1, y1)`.
    pub rect: (usize, usize, usize, usize),
}

pub(crate) struct Frame {
    pub prepared: Vec<Prepared>,
    /// For each tile, indices into `prepared` in compositing order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

pub(crate) fn eval_color(set: &GaussianSet, i: usize, camera: &CameraView) -> ([f64; 3], [bool; 3]) {
    let b = set.sh_coeffs();
    let coeffs = set.sh(i);
    let mut basis = [0.0; 16];
    if set.sh_degree == 0 {
        basis[0] = crate::sh::SH_C0;
    } else {
        let dir = direction(set.position(i), camera);
        crate::sh::basis(set.sh_degree, dir.0, &mut basis);
    }
    let mut color = [0.0; 3];
    let mut clamped = [false; 3];
    for c in 0..3 {
        let v: f64 = (0..b).map(|k| basis[k] * coeffs[c * b + k]).sum::<f64>() + 0.5;
        clamped[c] = v < 0.0;
        color[c] = v.max(0.0);
    }
    (color, clamped)
}

/// Unit view direction from the camera centre to `p`, and the unnormalized length.
pub(crate) fn direction(p: [f64; 3], camera: &CameraView) -> ([f64; 3], f64) {
    let c = camera.center();
    let v = [p[0] - c.x, p[1] - c.y, p[2] - c.z];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    ([v[0] / n, v[1] / n, v[2] / n], n)
}

/// Inclusive range of pixel indices whose centres lie within `radius` of `center`.
fn pixel_span(center: f64, radius: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - radius - 0.5).ceil();
    let hi = (center + radius - 0.5).floor();
    let lo = lo.max(0.0);
    let hi = hi.min(size as f64 - 1.0);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

pub(crate) fn prepare(
    set: &GaussianSet,
    camera: &CameraView,
    cfg: &RenderConfig,
) -> Result<Frame, RasterError> {
    cfg.validate(set.feature_dim)?;
    if let Some(i) = set.first_non_finite() {
        return Err(RasterError::NonFiniteParameter(i));
    }
    let prepared: Vec<Prepared> = (0..set.len())
        .into_par_iter()
        .filter_map(|i| {
            let splat = project::project_index(set, i, camera, cfg)?;
            let (x0, x1) = pixel_span(splat.mean2d[0], splat.radius, camera.width)?;
            let (y0, y1) = pixel_span(splat.mean2d[1], splat.radius, camera.height)?;
            let [a, b, c] = splat.cov2d;
            let det = a * c - b * b;
            let (color, color_clamped) = eval_color(set, i, camera);
            Some(Prepared {
                conic: [c / det, -b / det, a / det],
                opacity: set.opacity(i),
                color,
                color_clamped,
                rect: (x0, y0, x1, y1),
                splat,
            })
        })
        .collect();

    let ts = cfg.tile_size;
    let tiles_x = camera.width.div_ceil(ts);
    let tiles_y = camera.height.div_ceil(ts);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in prepared.iter().enumerate() {
        let (x0, y0, x1, y1) = p.rect;
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    tiles.par_iter_mut().for_each(|list| {
        list.sort_by(|&i, &j| {
            let (pi, pj) = (&prepared[i as usize].splat, &prepared[j as usize].splat);
            pi.depth
                .total_cmp(&pj.depth)
                .then(pi.gaussian_index.cmp(&pj.gaussian_index))
        })
    });
    Ok(Frame {
        prepared,
        tiles,
        tiles_x,
        tiles_y,
    })
}

/// Opacity-weighted falloff of a splat at pixel `(x, y)`, or `None` if the
/// splat does not contribute there.
#[inline]
pub(crate) fn splat_alpha(p: &Prepared, x: usize, y: usize, cfg: &RenderConfig) -> Option<(f64, f64, f64)> {
    let (x0, y0, x1, y1) = p.rect;
    if x < x0 || x > x1 || y < y0 || y > y1 {
        return None;
    }
    let dx = x as f64 + 0.5 - p.splat.mean2d[0];
    let dy = y as f64 + 0.5 - p.splat.mean2d[1];
    let [a, b, c] = p.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let alpha = (p.opacity * g).min(cfg.alpha_clamp);
    if alpha < cfg.alpha_skip {
        return None;
    }
    Some((alpha, dx, dy))
}

struct TileResult {
    rgb: Vec<f64>,
    feature: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    count: Vec<u32>,
}

/// Renders colour, features, alpha and depth for one view.
pub fn render(
    set: &GaussianSet,
    camera: &CameraView,
    cfg: &RenderConfig,
) -> Result<RenderOutput, RasterError> {
    let frame = prepare(set, camera, cfg)?;
    let f = set.feature_dim;
    let bg_feature = cfg.background_feature(f);
    let (w, h, ts) = (camera.width, camera.height, cfg.tile_size);

    let tile_results: Vec<TileResult> = (0..frame.tiles_x * frame.tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % frame.tiles_x, t / frame.tiles_x);
            let xs = tx * ts..((tx + 1) * ts).min(w);
            let ys = ty * ts..((ty + 1) * ts).min(h);
            let npix = xs.len() * ys.len();
            let mut out = TileResult {
                rgb: Vec::with_capacity(npix * 3),
                feature: Vec::with_capacity(npix * f),
                alpha: Vec::with_capacity(npix),
                depth: Vec::with_capacity(npix),
                count: Vec::with_capacity(npix),
            };
            let mut feat = vec![0.0; f];
            for y in ys.clone() {
                for x in xs.clone() {
                    let mut transmittance = 1.0;
                    let mut rgb = [0.0; 3];
                    feat.iter_mut().for_each(|v| *v = 0.0);
                    let mut depth = 0.0;
                    let mut count = 0;
                    for &k in &frame.tiles[t] {
                        let p = &frame.prepared[k as usize];
                        let Some((alpha, _, _)) = splat_alpha(p, x, y, cfg) else {
                            continue;
                        };
                        let weight = alpha * transmittance;
                        for c in 0..3 {
                            rgb[c] += p.color[c] * weight;
                        }
                        let fi = set.feature(p.splat.gaussian_index);
                        for (acc, v) in feat.iter_mut().zip(fi) {
                            *acc += v * weight;
                        }
                        depth += p.splat.depth * weight;
                        count += 1;
                        transmittance *= 1.0 - alpha;
                        if transmittance < cfg.min_transmittance {
                            break;
                        }
                    }
                    let total = 1.0 - transmittance;
                    for c in 0..3 {
                        out.rgb.push(rgb[c] + transmittance * cfg.background_rgb[c]);
                    }
                    for (v, bg) in feat.iter().zip(&bg_feature) {
                        out.feature.push(v + transmittance * bg);
                    }
                    out.alpha.push(total);
                    out.depth.push(depth / total.max(1e-8));
                    out.count.push(count);
                }
            }
            out
        })
        .collect();

    let mut output = RenderOutput {
        rgb: Image::new(w, h, 3),
        feature: Image::new(w, h, f),
        alpha: Image::new(w, h, 1),
        depth: Image::new(w, h, 1),
        contributor_count: vec![0; w * h],
    };
    for (t, res) in tile_results.into_iter().enumerate() {
        let (tx, ty) = (t % frame.tiles_x, t / frame.tiles_x);
        let xs = tx * ts..((tx + 1) * ts).min(w);
        let ys = ty * ts..((ty + 1) * ts).min(h);
        let mut j = 0;
        for y in ys {
            for x in xs.clone() {
                let p = y * w + x;
                output.rgb.data[3 * p..3 * p + 3].copy_from_slice(&res.rgb[3 * j..3 * j + 3]);
                output.feature.data[f * p..f * p + f].copy_from_slice(&res.feature[f * j..f * j + f]);
                output.alpha.data[p] = res.alpha[j];
                output.depth.data[p] = res.depth[j];
                output.contributor_count[p] = res.count[j];
                j += 1;
            }
        }
    }
    Ok(output)
}
