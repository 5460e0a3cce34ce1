//! PSNR and SSIM, plus the SSIM gradient used by the photometric loss.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::CameraView;
use crate::image_buf::Image;
use crate::raster::{render, RasterError, RenderConfig};
use crate::scene::GaussianSet;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ")]
    ShapeMismatch,
    #[error("images must be at least {SSIM_WINDOW} pixels on each side")]
    TooSmall,
    #[error("no views to evaluate")]
    EmptyTestSplit,
    #[error("no ground truth for view {0}")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::ShapeMismatch);
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Symmetric (half-sample) reflection: `... b a | a b c ... y z | z y ...`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i as usize
}

/// Separable Gaussian blur of one `w × h` plane with symmetric padding.
fn blur(plane: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * plane[y * w + reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Adjoint of [`blur`].
fn blur_transpose(grad: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            for (k, wk) in win.iter().enumerate() {
                tmp[reflect(y as isize + k as isize - r, h) * w + x] += wk * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (k, wk) in win.iter().enumerate() {
                out[y * w + reflect(x as isize + k as isize - r, w)] += wk * g;
            }
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

fn check_ssim_inputs(a: &Image, b: &Image) -> Result<(), MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::ShapeMismatch);
    }
    if a.width.min(a.height) < SSIM_WINDOW {
        return Err(MetricError::TooSmall);
    }
    Ok(())
}

struct ChannelStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

fn channel_stats(x: &[f64], y: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> ChannelStats {
    let mu_x = blur(x, w, h, win);
    let mu_y = blur(y, w, h, win);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = blur(&xx, w, h, win);
    let eyy = blur(&yy, w, h, win);
    let exy = blur(&xy, w, h, win);
    let n = w * h;
    ChannelStats {
        var_x: (0..n).map(|i| exx[i] - mu_x[i] * mu_x[i]).collect(),
        var_y: (0..n).map(|i| eyy[i] - mu_y[i] * mu_y[i]).collect(),
        cov: (0..n).map(|i| exy[i] - mu_x[i] * mu_y[i]).collect(),
        mu_x,
        mu_y,
    }
}

/// Mean SSIM over every pixel and channel (11×11 Gaussian window, σ = 1.5,
/// dynamic range 1, symmetric border padding).
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_ssim_inputs(a, b)?;
    let win = gaussian_window();
    let (w, h) = (a.width, a.height);
    let total: f64 = (0..a.channels)
        .map(|c| {
            let s = channel_stats(&channel_plane(a, c), &channel_plane(b, c), w, h, &win);
            (0..w * h)
                .map(|i| {
                    let num = (2.0 * s.mu_x[i] * s.mu_y[i] + SSIM_C1) * (2.0 * s.cov[i] + SSIM_C2);
                    let den = (s.mu_x[i].powi(2) + s.mu_y[i].powi(2) + SSIM_C1)
                        * (s.var_x[i] + s.var_y[i] + SSIM_C2);
                    num / den
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / (w * h * a.channels) as f64)
}

/// SSIM of `a` against `b` together with its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), MetricError> {
    check_ssim_inputs(a, b)?;
    let win = gaussian_window();
    let (w, h, nc) = (a.width, a.height, a.channels);
    let n = w * h;
    let norm = 1.0 / (n * nc) as f64;
    let mut grad = Image::new(w, h, nc);
    let mut total = 0.0;
    for c in 0..nc {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let s = channel_stats(&x, &y, w, h, &win);
        let mut d_mu = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for i in 0..n {
            let a1 = 2.0 * s.mu_x[i] * s.mu_y[i] + SSIM_C1;
            let a2 = 2.0 * s.cov[i] + SSIM_C2;
            let b1 = s.mu_x[i].powi(2) + s.mu_y[i].powi(2) + SSIM_C1;
            let b2 = s.var_x[i] + s.var_y[i] + SSIM_C2;
            let val = a1 * a2 / (b1 * b2);
            total += val;
            let ds_dmu = 2.0 * s.mu_y[i] * a2 / (b1 * b2) - val * 2.0 * s.mu_x[i] / b1;
            let ds_dvar = -val / b2;
            let ds_dcov = 2.0 * a1 / (b1 * b2);
            d_mu[i] = norm * (ds_dmu - 2.0 * s.mu_x[i] * ds_dvar - s.mu_y[i] * ds_dcov);
            d_exx[i] = norm * ds_dvar;
            d_exy[i] = norm * ds_dcov;
        }
        let g_mu = blur_transpose(&d_mu, w, h, &win);
        let g_exx = blur_transpose(&d_exx, w, h, &win);
        let g_exy = blur_transpose(&d_exy, w, h, &win);
        for i in 0..n {
            grad.data[i * nc + c] = g_mu[i] + 2.0 * x[i] * g_exx[i] + y[i] * g_exy[i];
        }
    }
    Ok((total * norm, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetrics {
    pub view_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Mean absolute error of the rendered feature map, when a target exists.
    pub feature_l1: Option<f64>,
    /// Reserved for an externally computed perceptual score.
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_view: Vec<ViewMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = values.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

impl MetricReport {
    pub fn from_views(per_view: Vec<ViewMetrics>) -> Self {
        let n = per_view.len().max(1) as f64;
        let mean_psnr_db = per_view.iter().map(|v| v.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_view.iter().map(|v| v.ssim).sum::<f64>() / n;
        Self {
            per_view,
            mean_psnr_db,
            mean_ssim,
        }
    }

    /// Mean feature L1 over the views that have a feature target.
    pub fn mean_feature_l1(&self) -> Option<f64> {
        mean_of(self.per_view.iter().map(|v| v.feature_l1))
    }

    /// `view_id,psnr_db,ssim` rows followed by a `mean` summary row.
    /// `feature_l1` and `lpips` columns are appended only when some view
    /// carries a value.
    pub fn to_csv(&self) -> String {
        type Column = (&'static str, fn(&ViewMetrics) -> Option<f64>);
        let optional: [Column; 2] = [("feature_l1", |v| v.feature_l1), ("lpips", |v| v.lpips)];
        let present: Vec<&Column> = optional
            .iter()
            .filter(|(_, get)| self.per_view.iter().any(|v| get(v).is_some()))
            .collect();
        let mut s = String::from("view_id,psnr_db,ssim");
        for (name, _) in &present {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
        for v in &self.per_view {
            let _ = write!(s, "{},{:.6},{:.6}", v.view_id, v.psnr_db, v.ssim);
            for (_, get) in &present {
                match get(v) {
                    Some(x) => {
                        let _ = write!(s, ",{x:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        let _ = write!(s, "mean,{:.6},{:.6}", self.mean_psnr_db, self.mean_ssim);
        for (_, get) in &present {
            let m = mean_of(self.per_view.iter().map(get)).unwrap_or(f64::NAN);
            let _ = write!(s, ",{m:.6}");
        }
        s.push('\n');
        s
    }
}

/// Ground truth for one evaluated view.
#[derive(Debug, Clone)]
pub struct ViewTarget {
    pub rgb: Image,
    /// Feature target at render resolution, if available.
    pub feature: Option<Image>,
}

/// Renders every view, clamps colour to `[0, 1]`, and scores it against
/// its ground truth.
pub fn evaluate<F>(
    set: &GaussianSet,
    views: &[CameraView],
    cfg: &RenderConfig,
    ground_truth: F,
) -> Result<MetricReport, MetricError>
where
    F: Fn(&CameraView) -> Option<ViewTarget> + Sync,
{
    if views.is_empty() {
        return Err(MetricError::EmptyTestSplit);
    }
    let per_view = views
        .par_iter()
        .map(|view| {
            let gt = ground_truth(view)
                .ok_or_else(|| MetricError::MissingGroundTruth(view.view_id.clone()))?;
            let out = render(set, view, cfg)?;
            let rgb = out.rgb.clamped(0.0, 1.0);
            let feature_l1 = match &gt.feature {
                Some(t) if t.same_shape(&out.feature) => Some(
                    t.data.iter().zip(&out.feature.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
                        / t.data.len().max(1) as f64,
                ),
                Some(_) => return Err(MetricError::ShapeMismatch),
                None => None,
            };
            Ok(ViewMetrics {
                view_id: view.view_id.clone(),
                psnr_db: psnr(&rgb, &gt.rgb)?,
                ssim: ssim(&rgb, &gt.rgb)?,
                feature_l1,
                lpips: None,
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    Ok(MetricReport::from_views(per_view))
}
