//! Pinhole camera used for rendering and training.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::colmap::{CameraIntrinsics, CameraPose};

/// Intrinsics plus world-to-camera pose. Pixel `(x, y)` has its centre at
/// `(x + 0.5, y + 0.5)` in the same coordinates as `(cx, cy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub view_id: String,
    pub image_name: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
}

impl CameraView {
    pub fn from_colmap(intr: &CameraIntrinsics, pose: &CameraPose) -> Self {
        Self {
            view_id: pose.view_id(),
            image_name: pose.image_name.clone(),
            width: intr.width as usize,
            height: intr.height as usize,
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            rotation: pose.rotation(),
            translation: pose.translation(),
        }
    }

    /// Camera at `eye` looking at `target`, with image rows running along
    /// the world `-up` direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        view_id: &str,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        focal: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Rows of the world-to-camera rotation are the camera axes.
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self {
            view_id: view_id.to_string(),
            image_name: format!("{view_id}.png"),
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `(w, x, y, z)` quaternion of the world-to-camera rotation.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let mut v = [q.w, q.i, q.j, q.k];
        if v[0] < 0.0 {
            v = v.map(|c| -c);
        }
        v
    }
}
