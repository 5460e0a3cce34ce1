//! Adaptive density control: clone small high-gradient Gaussians, split
//! large ones, prune transparent ones.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::raster::GaussianGradients;
use crate::scene::{normalize_quat, quat_to_matrix, GaussianSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub start_iter: usize,
    pub interval: usize,
    /// Defaults to half the iteration count.
    pub stop_iter: Option<usize>,
    /// Mean screen-space (NDC) positional gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Fraction of the scene extent separating clone from split.
    pub split_scale_threshold: f64,
    pub prune_opacity: f64,
    pub split_children: usize,
    pub split_scale_shrink: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            start_iter: 500,
            interval: 100,
            stop_iter: None,
            grad_threshold: 2e-4,
            split_scale_threshold: 0.01,
            prune_opacity: 0.005,
            split_children: 2,
            split_scale_shrink: 1.6,
        }
    }
}

impl DensifyConfig {
    pub fn stop(&self, iterations: usize) -> usize {
        self.stop_iter.unwrap_or(iterations / 2)
    }
}

/// Running per-Gaussian screen-gradient statistics between densification steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, grads: &GaussianGradients) {
        for (i, visible) in grads.visible.iter().enumerate() {
            if *visible {
                self.grad_sum[i] += grads.screen_grad_norm[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Applies one round of clone / split / prune and remaps optimizer moments.
/// Survivors keep their moments; new Gaussians start at zero.
pub fn densify_and_prune<R: Rng>(
    set: &mut GaussianSet,
    optimizer: &mut OptimizerState,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
    rng: &mut R,
) -> DensifyOutcome {
    let n = set.len();
    let split_threshold = cfg.split_scale_threshold * scene_extent;
    let mut outcome = DensifyOutcome::default();

    let mut next = GaussianSet::empty(set.sh_degree, set.feature_dim);
    let mut sources: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..n {
        let hot = stats.mean(i) >= cfg.grad_threshold;
        let max_scale = set.scale(i).into_iter().fold(f64::MIN, f64::max);
        if hot && max_scale > split_threshold {
            splits.push(i);
            continue;
        }
        next.push_from(set, i);
        sources.push(Some(i));
        if hot {
            clones.push(i);
        }
    }
    for &i in &clones {
        next.push_from(set, i);
        sources.push(None);
    }
    let shrink = cfg.split_scale_shrink.ln();
    for &i in &splits {
        let scale = set.scale(i);
        let rot = quat_to_matrix(normalize_quat(set.rotation(i)));
        let mean = Vector3::from(set.position(i));
        for _ in 0..cfg.split_children {
            let z = Vector3::from_fn(|k, _| scale[k] * rng.sample::<f64, _>(StandardNormal));
            let p = mean + rot * z;
            let j = next.len();
            next.push_from(set, i);
            next.positions[3 * j..3 * j + 3].copy_from_slice(&[p.x, p.y, p.z]);
            for k in 0..3 {
                next.log_scales[3 * j + k] -= shrink;
            }
            sources.push(None);
        }
    }
    outcome.cloned = clones.len();
    outcome.split = splits.len();

    // Prune on the densified set.
    let keep: Vec<usize> = (0..next.len())
        .filter(|&j| next.opacity(j) >= cfg.prune_opacity)
        .collect();
    outcome.pruned = next.len() - keep.len();
    let mut pruned = GaussianSet::empty(set.sh_degree, set.feature_dim);
    for &j in &keep {
        pruned.push_from(&next, j);
    }
    let sources: Vec<Option<usize>> = keep.iter().map(|&j| sources[j]).collect();
    optimizer.remap(&sources, set);
    *set = pruned;
    outcome
}
