//! Dual-branch optimization of a [`GaussianSet`] against photographs and
//! target feature maps.

mod adam;
mod densify;
mod loss;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamParams, Moments};
pub use densify::{densify_and_prune, DensifyConfig, DensifyOutcome, DensifyStats};
pub use loss::{compute_loss, loss_and_grads, LossBreakdown, LossWeights};

use crate::camera::CameraView;
use crate::colmap::{CameraPose, SceneInputs};
use crate::features::{read_fmap, resize_bilinear, FeatureError};
use crate::image_buf::{Image, ImageError};
use crate::metrics::MetricError;
use crate::raster::{render, render_backward, GaussianGradients, RasterError, RenderConfig};
use crate::scene::{init_from_sparse, logit, GaussianSet, InitConfig, SceneError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("render, ground truth and target feature shapes disagree")]
    ShapeMismatch,
    #[error("non-finite loss term {term} = {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },
    #[error("missing feature map for training image {0}")]
    MissingFeatureMap(String),
    #[error("missing ground-truth image {0}")]
    MissingImage(String),
    #[error("feature map {image} has dim {found}, expected {expected}")]
    FeatureDimInconsistent {
        image: String,
        expected: usize,
        found: usize,
    },
    #[error("no intrinsics for camera {0}")]
    MissingCamera(u32),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Position learning rate at the first iteration, times the scene extent.
    pub lr_position_init: f64,
    /// Position learning rate at the last iteration, times the scene extent.
    pub lr_position_final: f64,
    pub lr_feature: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// `None` disables adaptive density control.
    pub densify: Option<DensifyConfig>,
    pub seed: u64,
    /// Iterations between checkpoints; a final checkpoint is always written.
    pub checkpoint_interval: Option<usize>,
    /// Clamp opacities down to 0.01 every this many iterations. Off by default.
    pub opacity_reset_interval: Option<usize>,
    pub loss: LossWeights,
    pub init: InitConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 7000,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_feature: 2.5e-3,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            densify: None,
            seed: 0,
            checkpoint_interval: None,
            opacity_reset_interval: None,
            loss: LossWeights::default(),
            init: InitConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let lrs = [
            ("lr_position_init", self.lr_position_init),
            ("lr_position_final", self.lr_position_final),
            ("lr_feature", self.lr_feature),
            ("lr_color", self.lr_color),
            ("lr_opacity", self.lr_opacity),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
        ];
        for (name, v) in lrs {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(TrainError::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::InvalidConfig("adam_eps must be > 0".into()));
        }
        if let Some(d) = &self.densify {
            let stop = d.stop(self.iterations);
            if d.start_iter >= stop || stop > self.iterations || d.interval == 0 {
                return Err(TrainError::InvalidConfig(
                    "densify requires start_iter < stop_iter <= iterations and interval > 0".into(),
                ));
            }
            if d.split_children == 0 || !(d.split_scale_shrink > 0.0) {
                return Err(TrainError::InvalidConfig("invalid split settings".into()));
            }
        }
        if self.checkpoint_interval == Some(0) || self.opacity_reset_interval == Some(0) {
            return Err(TrainError::InvalidConfig("intervals must be >= 1".into()));
        }
        self.loss.validate()?;
        self.init.validate()?;
        self.render.validate(self.init.feature_dim)?;
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Exponential (log-linear) decay from the initial to the final position
    /// rate across `iteration` in `0..iterations`, scaled by the scene extent.
    pub fn lr_position(&self, iteration: usize, scene_extent: f64) -> f64 {
        let t = if self.iterations <= 1 {
            0.0
        } else {
            (iteration as f64 / (self.iterations - 1) as f64).clamp(0.0, 1.0)
        };
        let (a, b) = (self.lr_position_init, self.lr_position_final);
        let lr = if a > 0.0 && b > 0.0 {
            (a.ln() * (1.0 - t) + b.ln() * t).exp()
        } else {
            a * (1.0 - t) + b * t
        };
        lr * scene_extent
    }
}

/// Adam moments for every parameter group plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub positions: Moments,
    pub log_scales: Moments,
    pub rotations: Moments,
    pub opacity_logits: Moments,
    pub colors_sh: Moments,
    pub features: Moments,
}

impl OptimizerState {
    pub fn new(set: &GaussianSet) -> Self {
        Self {
            step: 0,
            positions: Moments::zeros(set.positions.len()),
            log_scales: Moments::zeros(set.log_scales.len()),
            rotations: Moments::zeros(set.rotations.len()),
            opacity_logits: Moments::zeros(set.opacity_logits.len()),
            colors_sh: Moments::zeros(set.colors_sh.len()),
            features: Moments::zeros(set.features.len()),
        }
    }

    /// Reindexes moments after the set changed size; see [`Moments::remap`].
    pub fn remap(&mut self, sources: &[Option<usize>], old: &GaussianSet) {
        self.positions = self.positions.remap(sources, 3);
        self.log_scales = self.log_scales.remap(sources, 3);
        self.rotations = self.rotations.remap(sources, 4);
        self.opacity_logits = self.opacity_logits.remap(sources, 1);
        self.colors_sh = self.colors_sh.remap(sources, 3 * old.sh_coeffs());
        self.features = self.features.remap(sources, old.feature_dim);
    }
}

/// One training view with its supervision targets at render resolution.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub camera: CameraView,
    pub gt_rgb: Image,
    /// F-channel target already resized to the camera resolution.
    pub target_feature: Image,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: LossBreakdown,
    pub lr_position: f64,
    pub grads: GaussianGradients,
}

/// One forward render, loss, backward pass and Adam update of every parameter group.
pub fn train_step(
    set: &mut GaussianSet,
    view: &TrainingView,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    iteration: usize,
    scene_extent: f64,
) -> Result<StepResult, TrainError> {
    let out = render(set, &view.camera, &cfg.render)?;
    let (loss, upstream) = loss_and_grads(&out, &view.gt_rgb, &view.target_feature, &cfg.loss)?;
    let grads = render_backward(set, &view.camera, &cfg.render, &upstream)?;

    state.step += 1;
    let hp = cfg.adam();
    let step = state.step;
    let lr_position = cfg.lr_position(iteration, scene_extent);
    adam_step(&mut set.positions, &grads.positions, &mut state.positions, lr_position, step, &hp);
    adam_step(&mut set.log_scales, &grads.log_scales, &mut state.log_scales, cfg.lr_scale, step, &hp);
    adam_step(&mut set.rotations, &grads.rotations, &mut state.rotations, cfg.lr_rotation, step, &hp);
    adam_step(
        &mut set.opacity_logits,
        &grads.opacity_logits,
        &mut state.opacity_logits,
        cfg.lr_opacity,
        step,
        &hp,
    );
    adam_step(&mut set.colors_sh, &grads.colors_sh, &mut state.colors_sh, cfg.lr_color, step, &hp);
    adam_step(&mut set.features, &grads.features, &mut state.features, cfg.lr_feature, step, &hp);
    Ok(StepResult {
        loss,
        lr_position,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub num_gaussians: usize,
    pub lr_position: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,l1_rgb,dssim,l1_feature,total,num_gaussians,lr_position";

    /// Shortest round-trip float formatting keeps the log byte-stable and lossless.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.loss.l1_rgb,
                r.loss.dssim,
                r.loss.l1_feature,
                r.loss.total,
                r.num_gaussians,
                r.lr_position
            );
        }
        s
    }
}

fn image_stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

/// Location of the target feature map for `image_name` inside a backbone directory.
pub fn feature_file(feature_dir: &Path, image_name: &str) -> PathBuf {
    feature_dir.join(format!("{}.fmap", image_stem(image_name)))
}

/// Builds the camera for a pose, looking up its intrinsics.
pub fn camera_for(inputs: &SceneInputs, pose: &CameraPose) -> Result<CameraView, TrainError> {
    let intr = inputs
        .intrinsics
        .get(&pose.camera_id)
        .ok_or(TrainError::MissingCamera(pose.camera_id))?;
    Ok(CameraView::from_colmap(intr, pose))
}

/// Loads ground-truth images and target feature maps for every training view.
/// Every feature map's existence is checked before any file is decoded.
pub fn load_training_views(
    inputs: &SceneInputs,
    image_dir: &Path,
    feature_dir: &Path,
) -> Result<Vec<TrainingView>, TrainError> {
    for pose in &inputs.train_views {
        if !feature_file(feature_dir, &pose.image_name).is_file() {
            return Err(TrainError::MissingFeatureMap(pose.image_name.clone()));
        }
    }
    let mut dim = None;
    let mut views = Vec::with_capacity(inputs.train_views.len());
    for pose in &inputs.train_views {
        let camera = camera_for(inputs, pose)?;
        let img_path = image_dir.join(&pose.image_name);
        if !img_path.is_file() {
            return Err(TrainError::MissingImage(pose.image_name.clone()));
        }
        let gt_rgb = Image::load_png_rgb(&img_path)?;
        if gt_rgb.width != camera.width || gt_rgb.height != camera.height {
            return Err(TrainError::ShapeMismatch);
        }
        let fmap = read_fmap(&feature_file(feature_dir, &pose.image_name))?;
        let expected = *dim.get_or_insert(fmap.dim);
        if fmap.dim != expected {
            return Err(TrainError::FeatureDimInconsistent {
                image: pose.image_name.clone(),
                expected,
                found: fmap.dim,
            });
        }
        let target = if fmap.height == camera.height && fmap.width == camera.width {
            fmap
        } else {
            resize_bilinear(&fmap, camera.height, camera.width)
        };
        views.push(TrainingView {
            camera,
            gt_rgb,
            target_feature: target.to_image(),
        });
    }
    Ok(views)
}

pub struct TrainOutcome {
    pub set: GaussianSet,
    pub log: TrainLog,
}

/// Called with `(iteration, set)` at checkpoint intervals and after the last iteration.
pub type CheckpointHook<'a> = dyn FnMut(usize, &GaussianSet) -> Result<(), TrainError> + 'a;

const SHUFFLE_STREAM: u64 = 0x5eed_5eed;

/// Full training loop. Views are visited in a seeded permutation reshuffled
/// every epoch; with densification off the result depends only on the seed
/// and the inputs.
pub fn train(
    inputs: &SceneInputs,
    views: &[TrainingView],
    cfg: &TrainConfig,
    checkpoint: &mut CheckpointHook<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if let Some(v) = views.first() {
        if v.target_feature.channels != cfg.init.feature_dim {
            return Err(TrainError::FeatureDimInconsistent {
                image: v.camera.image_name.clone(),
                expected: cfg.init.feature_dim,
                found: v.target_feature.channels,
            });
        }
    }
    let mut set = init_from_sparse(&inputs.points, &cfg.init, cfg.seed)?;
    let mut log = TrainLog::default();
    if cfg.iterations == 0 || views.is_empty() {
        return Ok(TrainOutcome { set, log });
    }
    info!(
        "training {} Gaussians on {} views for {} iterations",
        set.len(),
        views.len(),
        cfg.iterations
    );

    let mut state = OptimizerState::new(&set);
    let mut stats = DensifyStats::new(set.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut densify_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let extent = inputs.scene_extent;

    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut shuffle_rng);
            order.reverse();
        }
        let view = &views[order.pop().expect("refilled above")];
        let step = train_step(&mut set, view, cfg, &mut state, it, extent)?;
        stats.accumulate(&step.grads);
        let done = it + 1;
        log.rows.push(LogRow {
            iteration: done,
            loss: step.loss,
            num_gaussians: set.len(),
            lr_position: step.lr_position,
        });

        if let Some(d) = &cfg.densify {
            if done >= d.start_iter && done <= d.stop(cfg.iterations) && done % d.interval == 0 {
                let outcome = densify_and_prune(&mut set, &mut state, &stats, d, extent, &mut densify_rng);
                debug!("iteration {done}: {outcome:?}, {} Gaussians", set.len());
                stats = DensifyStats::new(set.len());
            }
        }
        if let Some(k) = cfg.opacity_reset_interval {
            if done % k == 0 && done < cfg.iterations {
                let cap = logit(0.01);
                for o in set.opacity_logits.iter_mut() {
                    *o = o.min(cap);
                }
                state.opacity_logits = Moments::zeros(set.len());
            }
        }
        if done % 100 == 0 {
            debug!("iteration {done}: total loss {:.6}", step.loss.total);
        }
        if let Some(k) = cfg.checkpoint_interval {
            if done % k == 0 && done < cfg.iterations {
                checkpoint(done, &set)?;
            }
        }
    }
    checkpoint(cfg.iterations, &set)?;
    Ok(TrainOutcome { set, log })
}
