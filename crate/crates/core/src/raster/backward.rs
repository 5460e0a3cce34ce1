use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::project::jacobian;
use super::{direction, prepare, splat_alpha, Frame, RasterError, RenderConfig};
use crate::camera::CameraView;
use crate::image_buf::Image;
use crate::scene::{covariance3d, normalize_quat, quat_to_matrix, GaussianSet};
use crate::sh;

/// Gradients of a scalar loss with respect to the rendered images. Missing
/// entries are treated as zero.
#[derive(Debug, Clone, Default)]
pub struct UpstreamGrads {
    pub rgb: Option<Image>,
    pub feature: Option<Image>,
    pub alpha: Option<Image>,
}

/// Gradients with the same flat layout as the [`GaussianSet`] fields.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGradients {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub colors_sh: Vec<f64>,
    pub features: Vec<f64>,
    /// Norm of the loss gradient w.r.t. the projected mean, in NDC units.
    pub screen_grad_norm: Vec<f64>,
    /// Whether the Gaussian survived culling in this view.
    pub visible: Vec<bool>,
}

impl GaussianGradients {
    pub fn zeros(set: &GaussianSet) -> Self {
        let n = set.len();
        Self {
            positions: vec![0.0; 3 * n],
            log_scales: vec![0.0; 3 * n],
            rotations: vec![0.0; 4 * n],
            opacity_logits: vec![0.0; n],
            colors_sh: vec![0.0; 3 * set.sh_coeffs() * n],
            features: vec![0.0; set.feature_dim * n],
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

// Per-splat screen-space gradient layout.
const G_U: usize = 0;
const G_V: usize = 1;
const G_CONIC: usize = 2; // a, b, c
const G_OPACITY: usize = 5;
const G_COLOR: usize = 6; // r, g, b
const G_LEN: usize = 9;

struct Contribution {
    local: usize,
    alpha: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
    transmittance: f64,
}

fn check_shape(img: &Option<Image>, w: usize, h: usize, c: usize) -> Result<(), RasterError> {
    match img {
        Some(i) if i.width != w || i.height != h || i.channels != c => {
            Err(RasterError::GradShapeMismatch)
        }
        _ => Ok(()),
    }
}

/// Accumulates screen-space gradients for every prepared splat.
fn screen_space_grads(
    set: &GaussianSet,
    camera: &CameraView,
    cfg: &RenderConfig,
    frame: &Frame,
    up: &UpstreamGrads,
) -> (Vec<[f64; G_LEN]>, Vec<f64>) {
    let f = set.feature_dim;
    let bg_feature = cfg.background_feature(f);
    let (w, h, ts) = (camera.width, camera.height, cfg.tile_size);

    let per_tile: Vec<(Vec<[f64; G_LEN]>, Vec<f64>)> = (0..frame.tiles_x * frame.tiles_y)
        .into_par_iter()
        .map(|t| {
            let list = &frame.tiles[t];
            let mut g2d = vec![[0.0; G_LEN]; list.len()];
            let mut gfeat = vec![0.0; list.len() * f];
            if list.is_empty() {
                return (g2d, gfeat);
            }
            let (tx, ty) = (t % frame.tiles_x, t / frame.tiles_x);
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut gf = vec![0.0; f];
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let pix = y * w + x;
                    let gr: [f64; 3] = match &up.rgb {
                        Some(img) => [img.data[3 * pix], img.data[3 * pix + 1], img.data[3 * pix + 2]],
                        None => [0.0; 3],
                    };
                    match &up.feature {
                        Some(img) => gf.copy_from_slice(&img.data[f * pix..f * pix + f]),
                        None => gf.iter_mut().for_each(|v| *v = 0.0),
                    }
                    let ga = up.alpha.as_ref().map_or(0.0, |img| img.data[pix]);
                    if gr.iter().chain(gf.iter()).all(|v| *v == 0.0) && ga == 0.0 {
                        continue;
                    }

                    contribs.clear();
                    let mut transmittance = 1.0;
                    for (local, &k) in list.iter().enumerate() {
                        let p = &frame.prepared[k as usize];
                        let Some((alpha, dx, dy)) = splat_alpha(p, x, y, cfg) else {
                            continue;
                        };
                        let clamped = alpha >= cfg.alpha_clamp;
                        contribs.push(Contribution {
                            local,
                            alpha,
                            clamped,
                            dx,
                            dy,
                            transmittance,
                        });
                        transmittance *= 1.0 - alpha;
                        if transmittance < cfg.min_transmittance {
                            break;
                        }
                    }

                    // rgb = C + T_final * bg, alpha = 1 - T_final.
                    let g_total_alpha = ga
                        - (0..3).map(|c| gr[c] * cfg.background_rgb[c]).sum::<f64>()
                        - gf.iter().zip(&bg_feature).map(|(a, b)| a * b).sum::<f64>();

                    let mut suffix = 0.0;
                    for ct in contribs.iter().rev() {
                        let p = &frame.prepared[list[ct.local] as usize];
                        let fi = set.feature(p.splat.gaussian_index);
                        let weight = ct.alpha * ct.transmittance;
                        let s = (0..3).map(|c| gr[c] * p.color[c]).sum::<f64>()
                            + gf.iter().zip(fi).map(|(a, b)| a * b).sum::<f64>()
                            + g_total_alpha;
                        let g = &mut g2d[ct.local];
                        for c in 0..3 {
                            g[G_COLOR + c] += gr[c] * weight;
                        }
                        for (acc, v) in gfeat[ct.local * f..(ct.local + 1) * f].iter_mut().zip(&gf) {
                            *acc += v * weight;
                        }
                        let d_alpha = ct.transmittance * s - suffix / (1.0 - ct.alpha);
                        suffix += s * weight;
                        if ct.clamped {
                            continue;
                        }
                        let falloff = ct.alpha / p.opacity;
                        g[G_OPACITY] += d_alpha * falloff;
                        let d_power = d_alpha * ct.alpha;
                        let [a, b, c] = p.conic;
                        g[G_U] += d_power * (a * ct.dx + b * ct.dy);
                        g[G_V] += d_power * (b * ct.dx + c * ct.dy);
                        g[G_CONIC] += d_power * -0.5 * ct.dx * ct.dx;
                        g[G_CONIC + 1] += d_power * -ct.dx * ct.dy;
                        g[G_CONIC + 2] += d_power * -0.5 * ct.dy * ct.dy;
                    }
                }
            }
            (g2d, gfeat)
        })
        .collect();

    let n = frame.prepared.len();
    let mut g2d = vec![[0.0; G_LEN]; n];
    let mut gfeat = vec![0.0; n * f];
    for (t, (tile_g, tile_f)) in per_tile.into_iter().enumerate() {
        for (local, &k) in frame.tiles[t].iter().enumerate() {
            let k = k as usize;
            for j in 0..G_LEN {
                g2d[k][j] += tile_g[local][j];
            }
            for j in 0..f {
                gfeat[k * f + j] += tile_f[local * f + j];
            }
        }
    }
    (g2d, gfeat)
}

/// Derivatives of the rotation matrix entries with respect to `(w, x, y, z)`.
fn rotation_partials(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x),
        Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y),
        Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0),
    ]
}

struct ParamGrads {
    index: usize,
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity_logit: f64,
    sh: Vec<f64>,
    screen_norm: f64,
}

/// Chains screen-space gradients of one splat back to its 3D parameters.
fn chain_to_params(
    set: &GaussianSet,
    camera: &CameraView,
    frame: &Frame,
    k: usize,
    g: &[f64; G_LEN],
) -> ParamGrads {
    let p = &frame.prepared[k];
    let i = p.splat.gaussian_index;
    let mean = Vector3::from(set.position(i));
    let scale = set.scale(i);
    let raw_q = set.rotation(i);
    let q = normalize_quat(raw_q);
    let rot = quat_to_matrix(q);
    let sigma = covariance3d(scale, q);
    let wrot = camera.rotation;
    let t = camera.world_to_camera(&mean);
    let (fx, fy) = (camera.fx, camera.fy);
    let jac = jacobian(&t, fx, fy);
    let m = jac * wrot;

    // conic = inverse(cov2d); cov2d = [[A, B], [B, C]].
    let [ca, cb, cc] = p.splat.cov2d;
    let det = ca * cc - cb * cb;
    let det2 = det * det;
    let (ga, gb, gc) = (g[G_CONIC], g[G_CONIC + 1], g[G_CONIC + 2]);
    let g_ca = ga * (-cc * cc / det2) + gb * (cb * cc / det2) + gc * (-cb * cb / det2);
    let g_cb = ga * (2.0 * cb * cc / det2) + gb * (-(ca * cc + cb * cb) / det2) + gc * (2.0 * ca * cb / det2);
    let g_cc = ga * (-cb * cb / det2) + gb * (cb * ca / det2) + gc * (-ca * ca / det2);
    let g_cov2d = Matrix2::new(g_ca, 0.5 * g_cb, 0.5 * g_cb, g_cc);

    let g_m = 2.0 * g_cov2d * m * sigma;
    let g_sigma = m.transpose() * g_cov2d * m;
    let g_j = g_m * wrot.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = Vector3::new(
        g_j[(0, 2)] * (-fx * iz2),
        g_j[(1, 2)] * (-fy * iz2),
        g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * t.y * iz3),
    );
    let (gu, gv) = (g[G_U], g[G_V]);
    g_t.x += gu * fx * iz;
    g_t.y += gv * fy * iz;
    g_t.z += gu * (-fx * t.x * iz2) + gv * (-fy * t.y * iz2);
    let mut g_mean = wrot.transpose() * g_t;

    // Σ = N Nᵀ with N = R diag(s).
    let n_mat = rot * Matrix3::from_diagonal(&Vector3::from(scale));
    let g_n = 2.0 * g_sigma * n_mat;
    let mut g_log_scale = [0.0; 3];
    let mut g_rot = Matrix3::zeros();
    for col in 0..3 {
        let mut gs = 0.0;
        for row in 0..3 {
            gs += g_n[(row, col)] * rot[(row, col)];
            g_rot[(row, col)] = g_n[(row, col)] * scale[col];
        }
        g_log_scale[col] = gs * scale[col];
    }
    let partials = rotation_partials(q);
    let g_qhat: [f64; 4] = std::array::from_fn(|j| g_rot.component_mul(&partials[j]).sum());
    let qnorm = raw_q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = (0..4).map(|j| q[j] * g_qhat[j]).sum();
    let g_q: [f64; 4] = std::array::from_fn(|j| (g_qhat[j] - q[j] * dot) / qnorm);

    let o = p.opacity;
    let opacity_logit = g[G_OPACITY] * o * (1.0 - o);

    let b = set.sh_coeffs();
    let mut g_sh = vec![0.0; 3 * b];
    let g_color: [f64; 3] =
        std::array::from_fn(|c| if p.color_clamped[c] { 0.0 } else { g[G_COLOR + c] });
    if set.sh_degree == 0 {
        for c in 0..3 {
            g_sh[c * b] = g_color[c] * sh::SH_C0;
        }
    } else {
        let (dir, len) = direction(set.position(i), camera);
        let mut basis = [0.0; 16];
        let mut jac_sh = [[0.0; 3]; 16];
        sh::basis(set.sh_degree, dir, &mut basis);
        sh::basis_jacobian(set.sh_degree, dir, &mut jac_sh);
        let coeffs = set.sh(i);
        let mut g_dir = [0.0; 3];
        for c in 0..3 {
            for k in 0..b {
                g_sh[c * b + k] = g_color[c] * basis[k];
                for a in 0..3 {
                    g_dir[a] += g_color[c] * coeffs[c * b + k] * jac_sh[k][a];
                }
            }
        }
        let dd: f64 = (0..3).map(|a| dir[a] * g_dir[a]).sum();
        for a in 0..3 {
            g_mean[a] += (g_dir[a] - dir[a] * dd) / len;
        }
    }

    let screen_norm = ((gu * camera.width as f64 * 0.5).powi(2)
        + (gv * camera.height as f64 * 0.5).powi(2))
    .sqrt();

    ParamGrads {
        index: i,
        position: [g_mean.x, g_mean.y, g_mean.z],
        log_scale: g_log_scale,
        rotation: g_q,
        opacity_logit,
        sh: g_sh,
        screen_norm,
    }
}

/// Analytic gradients of `Σ upstream · render(set)` with respect to every
/// Gaussian parameter. Culled Gaussians receive zero gradients.
pub fn render_backward(
    set: &GaussianSet,
    camera: &CameraView,
    cfg: &RenderConfig,
    upstream: &UpstreamGrads,
) -> Result<GaussianGradients, RasterError> {
    let (w, h, f) = (camera.width, camera.height, set.feature_dim);
    check_shape(&upstream.rgb, w, h, 3)?;
    check_shape(&upstream.feature, w, h, f)?;
    check_shape(&upstream.alpha, w, h, 1)?;
    let frame = prepare(set, camera, cfg)?;
    let (g2d, gfeat) = screen_space_grads(set, camera, cfg, &frame, upstream);

    let params: Vec<ParamGrads> = (0..frame.prepared.len())
        .into_par_iter()
        .map(|k| chain_to_params(set, camera, &frame, k, &g2d[k]))
        .collect();

    let mut out = GaussianGradients::zeros(set);
    let b3 = 3 * set.sh_coeffs();
    for (k, pg) in params.into_iter().enumerate() {
        let i = pg.index;
        out.positions[3 * i..3 * i + 3].copy_from_slice(&pg.position);
        out.log_scales[3 * i..3 * i + 3].copy_from_slice(&pg.log_scale);
        out.rotations[4 * i..4 * i + 4].copy_from_slice(&pg.rotation);
        out.opacity_logits[i] = pg.opacity_logit;
        out.colors_sh[b3 * i..b3 * (i + 1)].copy_from_slice(&pg.sh);
        out.features[f * i..f * (i + 1)].copy_from_slice(&gfeat[k * f..(k + 1) * f]);
        out.screen_grad_norm[i] = pg.screen_norm;
        out.visible[i] = true;
    }
    Ok(out)
}
