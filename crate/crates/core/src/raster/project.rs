use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::RenderConfig;
use crate::camera::CameraView;
use crate::scene::{covariance3d, normalize_quat, GaussianSet};

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Dilated 2D covariance `[[a, b], [b, c]]` stored as `(a, b, c)`.
    pub cov2d: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    /// `ceil(3 σ_max)` in pixels, at least 1.
    pub radius: f64,
    pub gaussian_index: usize,
}

/// Perspective Jacobian of `(fx x/z + cx, fy y/z + cy)` at camera point `t`.
pub(crate) fn jacobian(t: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz * iz,
        0.0,
        fy * iz,
        -fy * t.y * iz * iz,
    )
}

/// Projects a Gaussian with world mean `mean` and covariance `cov3d`.
/// Returns `None` when it is culled.
pub fn project_gaussian(
    mean: [f64; 3],
    cov3d: &Matrix3<f64>,
    camera: &CameraView,
    cfg: &RenderConfig,
    gaussian_index: usize,
) -> Option<Splat2D> {
    let t = camera.world_to_camera(&Vector3::from(mean));
    if t.z <= cfg.near_plane {
        return None;
    }
    let u = camera.fx * t.x / t.z + camera.cx;
    let v = camera.fy * t.y / t.z + camera.cy;
    let m = jacobian(&t, camera.fx, camera.fy) * camera.rotation;
    let cov = m * cov3d * m.transpose();
    let a = cov[(0, 0)] + cfg.dilation;
    let b = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    let c = cov[(1, 1)] + cfg.dilation;
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (3.0 * lambda_max.sqrt()).ceil().max(1.0);
    let (w, h) = (camera.width as f64, camera.height as f64);
    if u + radius < 0.0 || u - radius > w || v + radius < 0.0 || v - radius > h {
        return None;
    }
    Some(Splat2D {
        mean2d: [u, v],
        cov2d: [a, b, c],
        depth: t.z,
        radius,
        gaussian_index,
    })
}

pub(crate) fn project_index(
    set: &GaussianSet,
    i: usize,
    camera: &CameraView,
    cfg: &RenderConfig,
) -> Option<Splat2D> {
    let cov = covariance3d(set.scale(i), normalize_quat(set.rotation(i)));
    project_gaussian(set.position(i), &cov, camera, cfg, i)
}
