//! Slow, independent reference implementations and random input generators.
//!
//! Nothing here calls into the code paths under test except where noted:
//! projection, compositing, metrics and queries are re-derived with plain
//! loops so agreement is meaningful.

#![allow(dead_code)]

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use semsplat::camera::CameraView;
use semsplat::features::{FeatureMap, TextEmbedding};
use semsplat::image_buf::Image;
use semsplat::raster::{render, GaussianGradients, RenderConfig, UpstreamGrads};
use semsplat::scene::GaussianSet;

// ---------------------------------------------------------------- scenes

/// Camera on the -z axis looking at the origin.
pub fn front_camera(width: usize, height: usize, focal: f64) -> CameraView {
    CameraView::look_at(
        "oracle",
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        width,
        height,
        focal,
    )
}

/// Random scene of `n` Gaussians inside a cube of half-width `spread`.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    n: usize,
    feature_dim: usize,
    sh_degree: usize,
    spread: f64,
    scale_range: (f64, f64),
) -> GaussianSet {
    let mut set = GaussianSet::empty(sh_degree, feature_dim);
    for _ in 0..n {
        let pos = [0; 3].map(|_| rng.random_range(-spread..spread));
        let scale = [0; 3].map(|_| rng.random_range(scale_range.0..scale_range.1));
        let rot = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let opacity = rng.random_range(0.3..0.9);
        let rgb = [0; 3].map(|_| rng.random_range(0.2..0.8));
        let feature: Vec<f64> = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        set.push(pos, scale, rot, opacity, rgb, &feature);
        let b = set.sh_coeffs();
        let i = set.len() - 1;
        for c in 0..3 {
            for k in 1..b {
                set.colors_sh[(3 * i + c) * b + k] = rng.random_range(-0.15..0.15);
            }
        }
    }
    set
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_data(w, h, c, (0..w * h * c).map(|_| rng.random::<f64>()).collect())
}

pub fn random_feature_map(rng: &mut ChaCha8Rng, h: usize, w: usize, dim: usize) -> FeatureMap {
    FeatureMap {
        height: h,
        width: w,
        dim,
        data: (0..h * w * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        source_tag: "oracle".into(),
    }
}

pub fn random_embedding(rng: &mut ChaCha8Rng, dim: usize, label: &str) -> TextEmbedding {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    TextEmbedding::normalized(label, &v)
}

// ---------------------------------------------------------- brute render

pub struct BruteRender {
    pub rgb: Image,
    pub feature: Image,
    pub alpha: Image,
    pub depth: Image,
}

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;

fn quat_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Colour for SH degree 0 or 1 evaluated along the camera-to-Gaussian direction.
fn sh_color(set: &GaussianSet, i: usize, camera: &CameraView) -> [f64; 3] {
    assert!(set.sh_degree <= 1, "oracle supports SH degree <= 1");
    let b = set.sh_coeffs();
    let p = Vector3::from(set.position(i));
    let d = (p - camera.center()).normalize();
    let basis = [C0, -C1 * d.y, C1 * d.z, -C1 * d.x];
    let coeffs = set.sh(i);
    [0, 1, 2].map(|c| ((0..b).map(|k| basis[k] * coeffs[c * b + k]).sum::<f64>() + 0.5).max(0.0))
}

struct Footprint {
    index: usize,
    u: f64,
    v: f64,
    depth: f64,
    radius: f64,
    inv: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

fn footprint(set: &GaussianSet, i: usize, camera: &CameraView, cfg: &RenderConfig) -> Option<Footprint> {
    let t = camera.rotation * Vector3::from(set.position(i)) + camera.translation;
    if t.z <= cfg.near_plane {
        return None;
    }
    let s = set.scale(i);
    let r = quat_matrix(set.rotation(i));
    let m = r * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
    let sigma = m * m.transpose();
    let j = Matrix2x3::new(
        camera.fx / t.z,
        0.0,
        -camera.fx * t.x / (t.z * t.z),
        0.0,
        camera.fy / t.z,
        -camera.fy * t.y / (t.z * t.z),
    );
    let jw = j * camera.rotation;
    let cov = jw * sigma * jw.transpose();
    let (a, b, c) = (cov[(0, 0)] + cfg.dilation, cov[(0, 1)], cov[(1, 1)] + cfg.dilation);
    let det = a * c - b * b;
    if det <= 0.0 {
        return None;
    }
    let lmax = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = (3.0 * lmax.sqrt()).ceil().max(1.0);
    Some(Footprint {
        index: i,
        u: camera.fx * t.x / t.z + camera.cx,
        v: camera.fy * t.y / t.z + camera.cy,
        depth: t.z,
        radius,
        inv: [c / det, -b / det, a / det],
        opacity: 1.0 / (1.0 + (-set.opacity_logits[i]).exp()),
        color: sh_color(set, i, camera),
    })
}

/// Per-pixel compositing over every Gaussian with one global depth sort and no tiling.
pub fn brute_force_render(set: &GaussianSet, camera: &CameraView, cfg: &RenderConfig) -> BruteRender {
    let (w, h, f) = (camera.width, camera.height, set.feature_dim);
    let mut fps: Vec<Footprint> = (0..set.len()).filter_map(|i| footprint(set, i, camera, cfg)).collect();
    fps.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    let bg_feat = if cfg.background_feature.is_empty() {
        vec![0.0; f]
    } else {
        cfg.background_feature.clone()
    };
    let mut out = BruteRender {
        rgb: Image::new(w, h, 3),
        feature: Image::new(w, h, f),
        alpha: Image::new(w, h, 1),
        depth: Image::new(w, h, 1),
    };
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            let mut feat = vec![0.0; f];
            let mut depth = 0.0;
            for g in &fps {
                let (dx, dy) = (px - g.u, py - g.v);
                if dx.abs() > g.radius || dy.abs() > g.radius {
                    continue;
                }
                let power = -0.5 * (g.inv[0] * dx * dx + g.inv[2] * dy * dy) - g.inv[1] * dx * dy;
                if power > 0.0 {
                    continue;
                }
                let alpha = (g.opacity * power.exp()).min(cfg.alpha_clamp);
                if alpha < cfg.alpha_skip {
                    continue;
                }
                let wgt = alpha * t;
                for c in 0..3 {
                    rgb[c] += wgt * g.color[c];
                }
                for k in 0..f {
                    feat[k] += wgt * set.features[g.index * f + k];
                }
                depth += wgt * g.depth;
                t *= 1.0 - alpha;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            for c in 0..3 {
                out.rgb.set(x, y, c, rgb[c] + t * cfg.background_rgb[c]);
            }
            for k in 0..f {
                out.feature.set(x, y, k, feat[k] + t * bg_feat[k]);
            }
            out.alpha.set(x, y, 0, 1.0 - t);
            out.depth.set(x, y, 0, depth / (1.0 - t).max(1e-8));
        }
    }
    out
}

// ---------------------------------------------------- finite differences

fn dot(a: &Image, b: &Option<Image>) -> f64 {
    b.as_ref()
        .map(|b| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
        .unwrap_or(0.0)
}

/// Scalar objective `<upstream, render(set)>` evaluated with the production forward pass.
pub fn linear_objective(set: &GaussianSet, camera: &CameraView, cfg: &RenderConfig, up: &UpstreamGrads) -> f64 {
    let out = render(set, camera, cfg).expect("render");
    dot(&out.rgb, &up.rgb) + dot(&out.feature, &up.feature) + dot(&out.alpha, &up.alpha)
}

/// Central-difference gradient of [`linear_objective`] for every parameter group.
pub fn fd_gradients(
    set: &GaussianSet,
    camera: &CameraView,
    cfg: &RenderConfig,
    up: &UpstreamGrads,
    h: f64,
) -> GaussianGradients {
    let mut g = GaussianGradients::zeros(set);
    type Field = fn(&mut GaussianSet) -> &mut Vec<f64>;
    let groups: [(Field, fn(&mut GaussianGradients) -> &mut Vec<f64>); 6] = [
        (|s| &mut s.positions, |g| &mut g.positions),
        (|s| &mut s.log_scales, |g| &mut g.log_scales),
        (|s| &mut s.rotations, |g| &mut g.rotations),
        (|s| &mut s.opacity_logits, |g| &mut g.opacity_logits),
        (|s| &mut s.colors_sh, |g| &mut g.colors_sh),
        (|s| &mut s.features, |g| &mut g.features),
    ];
    for (param, grad) in groups {
        let n = param(&mut set.clone()).len();
        for k in 0..n {
            let mut plus = set.clone();
            param(&mut plus)[k] += h;
            let mut minus = set.clone();
            param(&mut minus)[k] -= h;
            let d = (linear_objective(&plus, camera, cfg, up) - linear_objective(&minus, camera, cfg, up)) / (2.0 * h);
            grad(&mut g)[k] = d;
        }
    }
    g
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

// --------------------------------------------------------------- metrics

pub fn psnr_reference(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    for i in 0..a.data.len() {
        se += (a.data[i] - b.data[i]).powi(2);
    }
    let mse = se / a.data.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

fn mirror(i: isize, n: isize) -> usize {
    // Half-sample symmetric extension, valid for offsets up to n.
    let j = if i < 0 { -1 - i } else if i >= n { 2 * n - 1 - i } else { i };
    j as usize
}

/// Direct (non-separable) 11x11 Gaussian-window SSIM, averaged over pixels and channels.
pub fn ssim_reference(a: &Image, b: &Image) -> f64 {
    let sigma = 1.5f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (dy, row) in win.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (ox, oy) = (dx as f64 - 5.0, dy as f64 - 5.0);
            *v = (-(ox * ox + oy * oy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let (w, h) = (a.width as isize, a.height as isize);
    let mut acc = 0.0;
    for c in 0..a.channels {
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11isize {
                    for dx in 0..11isize {
                        let wt = win[dy as usize][dx as usize] / total;
                        let (sx, sy) = (mirror(x + dx - 5, w), mirror(y + dy - 5, h));
                        let p = a.get(sx, sy, c);
                        let q = b.get(sx, sy, c);
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    acc / (a.data.len() as f64)
}

// --------------------------------------------------------------- queries

fn cos(f: &[f32], t: &[f32]) -> f64 {
    let mut d = 0.0;
    let mut nf = 0.0;
    let mut nt = 0.0;
    for k in 0..f.len() {
        d += f[k] as f64 * t[k] as f64;
        nf += (f[k] as f64).powi(2);
        nt += (t[k] as f64).powi(2);
    }
    let (nf, nt) = (nf.sqrt(), nt.sqrt());
    if nf < 1e-8 {
        return 0.0;
    }
    (d / (nf * nt + 1e-8)).clamp(-1.0, 1.0)
}

pub fn cosine_reference(map: &FeatureMap, t: &TextEmbedding) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..map.height {
        for x in 0..map.width {
            out.push(cos(map.pixel(x, y), &t.vector));
        }
    }
    out
}

/// Exhaustive row-major scan keeping the first strict maximum.
pub fn argmax_reference(values: &[f64], width: usize) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    let height = values.len() / width;
    for y in 0..height {
        for x in 0..width {
            if values[y * width + x] > best_v {
                best_v = values[y * width + x];
                best = (x, y);
            }
        }
    }
    best
}

pub fn labels_reference(map: &FeatureMap, labels: &[TextEmbedding]) -> Vec<usize> {
    let maps: Vec<Vec<f64>> = labels.iter().map(|t| cosine_reference(map, t)).collect();
    (0..map.height * map.width)
        .map(|p| {
            let mut best = 0;
            for k in 1..labels.len() {
                if maps[k][p] > maps[best][p] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// `(eigenvalues, eigenvectors as columns)` sorted by decreasing eigenvalue.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Per-pixel projection of the centred features onto the top-`k` principal
/// subspace, expressed back in feature space (sign-free).
pub fn pca_subspace_projection(map: &FeatureMap, k: usize) -> Vec<Vec<f64>> {
    let (n, d) = (map.height * map.width, map.dim);
    let mut mean = vec![0.0; d];
    for p in 0..n {
        for j in 0..d {
            mean[j] += map.data[p * d + j] as f64 / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (map.data[p * d + a] as f64 - mean[a]) * (map.data[p * d + b] as f64 - mean[b]) / n as f64;
            }
        }
    }
    let (_, vecs) = jacobi_eigen(cov);
    (0..n)
        .map(|p| {
            let x: Vec<f64> = (0..d).map(|j| map.data[p * d + j] as f64 - mean[j]).collect();
            let mut out = vec![0.0; d];
            for comp in vecs.iter().take(k) {
                let c: f64 = (0..d).map(|j| x[j] * comp[j]).sum();
                for j in 0..d {
                    out[j] += c * comp[j];
                }
            }
            out
        })
        .collect()
}

// ------------------------------------------------------------------ loss

/// Scalar-loop dual-branch loss: `(l1_rgb, dssim, l1_feature, total)`.
pub fn loss_reference(rgb: &Image, gt: &Image, feat: &Image, target: &Image, lambda: f64, gamma: f64) -> (f64, f64, f64, f64) {
    let l1 = rgb.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / rgb.data.len() as f64;
    let lf = feat.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / feat.data.len() as f64;
    let dssim = 1.0 - ssim_reference(rgb, gt);
    (l1, dssim, lf, (1.0 - lambda) * l1 + lambda * dssim + gamma * lf)
}
