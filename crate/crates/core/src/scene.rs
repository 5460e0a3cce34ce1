//! Optimizable Gaussian scene and its initialization from sparse points.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::SparsePoints;
use crate::sh;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("cannot initialize from an empty point cloud")]
    EmptyPointCloud,
    #[error("invalid init config: {0}")]
    InvalidConfig(String),
}

/// Per-Gaussian parameters in their unconstrained (optimized) form.
///
/// All arrays are flat and Gaussian-major: `positions[3*i..3*i+3]`,
/// `rotations[4*i..4*i+4]` as `(w, x, y, z)`, `colors_sh[(3*i + c)*B + k]`
/// for channel `c` and coefficient `k`, `features[F*i..F*i+F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub feature_dim: usize,
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub colors_sh: Vec<f64>,
    pub features: Vec<f64>,
}

/// Constrained parameters after applying exp / sigmoid / normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGaussians {
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub rotations: Vec<[f64; 4]>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
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

/// `R · diag(s²) · Rᵀ` for scale `s` and unit quaternion `q`.
pub fn covariance3d(scale: [f64; 3], q: [f64; 4]) -> Matrix3<f64> {
    let r = quat_to_matrix(q);
    let m = r * Matrix3::from_diagonal(&Vector3::from(scale));
    let cov = m * m.transpose();
    // Exact symmetry regardless of rounding in the product.
    (cov + cov.transpose()) * 0.5
}

impl GaussianSet {
    pub fn empty(sh_degree: usize, feature_dim: usize) -> Self {
        Self {
            sh_degree,
            feature_dim,
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            colors_sh: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn sh_coeffs(&self) -> usize {
        sh::num_coeffs(self.sh_degree)
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        [self.positions[3 * i], self.positions[3 * i + 1], self.positions[3 * i + 2]]
    }

    pub fn log_scale(&self, i: usize) -> [f64; 3] {
        [self.log_scales[3 * i], self.log_scales[3 * i + 1], self.log_scales[3 * i + 2]]
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let r = &self.rotations[4 * i..4 * i + 4];
        [r[0], r[1], r[2], r[3]]
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scale(i).map(f64::exp)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let b = 3 * self.sh_coeffs();
        &self.colors_sh[b * i..b * (i + 1)]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[self.feature_dim * i..self.feature_dim * (i + 1)]
    }

    /// Appends one Gaussian given its constrained parameters and flat colour.
    pub fn push(
        &mut self,
        position: [f64; 3],
        scale: [f64; 3],
        rotation: [f64; 4],
        opacity: f64,
        rgb: [f64; 3],
        feature: &[f64],
    ) {
        assert_eq!(feature.len(), self.feature_dim, "feature dimension");
        let b = self.sh_coeffs();
        self.positions.extend_from_slice(&position);
        self.log_scales.extend(scale.map(f64::ln));
        self.rotations.extend_from_slice(&rotation);
        self.opacity_logits.push(logit(opacity));
        for c in rgb {
            self.colors_sh.push(sh::rgb_to_sh0(c));
            self.colors_sh.extend(std::iter::repeat_n(0.0, b - 1));
        }
        self.features.extend_from_slice(feature);
    }

    /// Copies Gaussian `i` of `other` onto the end of `self`.
    pub fn push_from(&mut self, other: &GaussianSet, i: usize) {
        let b = 3 * other.sh_coeffs();
        let f = other.feature_dim;
        self.positions.extend_from_slice(&other.positions[3 * i..3 * i + 3]);
        self.log_scales.extend_from_slice(&other.log_scales[3 * i..3 * i + 3]);
        self.rotations.extend_from_slice(&other.rotations[4 * i..4 * i + 4]);
        self.opacity_logits.push(other.opacity_logits[i]);
        self.colors_sh.extend_from_slice(&other.colors_sh[b * i..b * (i + 1)]);
        self.features.extend_from_slice(&other.features[f * i..f * (i + 1)]);
    }

    pub fn activated_view(&self) -> ActivatedGaussians {
        let n = self.len();
        ActivatedGaussians {
            scales: (0..n).map(|i| self.scale(i)).collect(),
            opacities: self.opacity_logits.iter().map(|&l| sigmoid(l)).collect(),
            rotations: (0..n).map(|i| normalize_quat(self.rotation(i))).collect(),
        }
    }

    /// Index of the first Gaussian holding a non-finite parameter.
    pub fn first_non_finite(&self) -> Option<usize> {
        let b = 3 * self.sh_coeffs();
        let f = self.feature_dim;
        (0..self.len()).find(|&i| {
            let bad = |s: &[f64]| s.iter().any(|v| !v.is_finite());
            bad(&self.positions[3 * i..3 * i + 3])
                || bad(&self.log_scales[3 * i..3 * i + 3])
                || bad(&self.rotations[4 * i..4 * i + 4])
                || !self.opacity_logits[i].is_finite()
                || bad(&self.colors_sh[b * i..b * (i + 1)])
                || bad(&self.features[f * i..f * (i + 1)])
                || self.rotations[4 * i..4 * i + 4].iter().all(|v| *v == 0.0)
        })
    }
}

impl ActivatedGaussians {
    /// Inverse of [`GaussianSet::activated_view`] (up to quaternion scale).
    pub fn to_raw(&self, template: &GaussianSet) -> GaussianSet {
        let mut out = template.clone();
        out.log_scales = self.scales.iter().flat_map(|s| s.map(f64::ln)).collect();
        out.opacity_logits = self.opacities.iter().map(|&o| logit(o)).collect();
        out.rotations = self.rotations.iter().flatten().copied().collect();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureInit {
    Zeros,
    GaussianNoise { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub knn_k: usize,
    pub opacity_init: f64,
    pub feature_init: FeatureInit,
    pub sh_degree: usize,
    pub feature_dim: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            knn_k: 3,
            opacity_init: 0.1,
            feature_init: FeatureInit::GaussianNoise { sigma: 0.01 },
            sh_degree: 0,
            feature_dim: 16,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.knn_k < 1 {
            return Err(SceneError::InvalidConfig("knn_k must be >= 1".into()));
        }
        if !(self.opacity_init > 0.0 && self.opacity_init < 1.0) {
            return Err(SceneError::InvalidConfig("opacity_init must lie in (0, 1)".into()));
        }
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(SceneError::InvalidConfig(format!(
                "sh_degree must be <= {}",
                sh::MAX_DEGREE
            )));
        }
        if self.feature_dim < 1 {
            return Err(SceneError::InvalidConfig("feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scale used when a point has no neighbours at all.
const ISOLATED_SCALE: f64 = 0.1;
const MIN_SCALE: f64 = 1e-7;

/// Mean Euclidean distance from each point to its `k` nearest neighbours
/// (fewer when the cloud is smaller); `None` for a lone point.
pub fn knn_mean_distances(positions: &[[f64; 3]], k: usize) -> Vec<Option<f64>> {
    positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut dists: Vec<f64> = positions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| {
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .collect();
            if dists.is_empty() {
                return None;
            }
            let take = k.min(dists.len());
            dists.select_nth_unstable_by(take - 1, f64::total_cmp);
            let mut nearest = dists[..take].to_vec();
            nearest.sort_by(f64::total_cmp);
            Some(nearest.iter().sum::<f64>() / take as f64)
        })
        .collect()
}

/// Builds one isotropic Gaussian per sparse point.
pub fn init_from_sparse(
    points: &SparsePoints,
    cfg: &InitConfig,
    seed: u64,
) -> Result<GaussianSet, SceneError> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(SceneError::EmptyPointCloud);
    }
    let dists = knn_mean_distances(&points.positions, cfg.knn_k);
    let mut set = GaussianSet::empty(cfg.sh_degree, cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feature = vec![0.0; cfg.feature_dim];
    for (i, d) in dists.iter().enumerate() {
        let s = d.unwrap_or(ISOLATED_SCALE).max(MIN_SCALE);
        match cfg.feature_init {
            FeatureInit::Zeros => {}
            FeatureInit::GaussianNoise { sigma } => {
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                feature.iter_mut().for_each(|f| *f = normal.sample(&mut rng));
            }
        }
        set.push(
            points.positions[i],
            [s; 3],
            [1.0, 0.0, 0.0, 0.0],
            cfg.opacity_init,
            points.colors[i],
            &feature,
        );
    }
    Ok(set)
}
