//! Synthetic scenes with known ground truth, standing in for captured data
//! and foundation-model encoders.
//!
//! `two_regions` stacks two coloured clusters of Gaussians vertically and
//! orbits a ring of cameras around them, so both regions are visible in
//! every view. Feature targets come from [`synth_features`] with orthonormal
//! embeddings for the two regions and the black background.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use thiserror::Error;

use crate::camera::CameraView;
use crate::colmap::{write_model, CameraIntrinsics, CameraModel, CameraPose, ColmapError, ModelFormat, SparsePoints, SplitRule};
use crate::features::{
    orthonormal_vectors, palette_assignment, synth_features, write_fmap, write_temb, Dtype, FeatureError, FeatureMap,
    TextEmbedding,
};
use crate::image_buf::{Image, ImageError};
use crate::project::{ProjectLayout, SYNTHETIC_BACKBONE};
use crate::query::{BinaryMask, QueryError};
use crate::raster::{render, RasterError, RenderConfig};
use crate::scene::GaussianSet;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown synthetic preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Colmap(#[from] ColmapError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

pub const PRESETS: &[&str] = &["two_regions"];

/// Split used by synthetic scenes: 24 views, every 6th held out.
pub const SYNTH_SPLIT: SplitRule = SplitRule::EveryKth(6);

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub gt: GaussianSet,
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<CameraPose>,
    pub cameras: Vec<CameraView>,
    /// Ground-truth photographs, quantized to 8 bits exactly as stored.
    pub images: Vec<Image>,
    pub feature_maps: Vec<FeatureMap>,
    /// Palette entries in assignment order; the last one is the background.
    pub palette: Vec<([f64; 3], TextEmbedding)>,
    /// `region_masks[view][region]`.
    pub region_masks: Vec<Vec<BinaryMask>>,
    pub points: SparsePoints,
    /// Render settings matching the ground truth (background colour and feature).
    pub render: RenderConfig,
    pub split: SplitRule,
}

impl SynthScene {
    /// Prompt embeddings for the foreground regions.
    pub fn region_prompts(&self) -> Vec<TextEmbedding> {
        self.palette[..self.palette.len() - 1]
            .iter()
            .map(|(_, e)| e.clone())
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.gt.feature_dim
    }

    /// Writes COLMAP text model, images, feature maps, prompts and ground-truth masks.
    pub fn write_project(&self, layout: &ProjectLayout) -> Result<(), SynthError> {
        write_model(
            &layout.colmap_dir(),
            ModelFormat::Text,
            std::slice::from_ref(&self.intrinsics),
            &self.poses,
            &self.points,
        )?;
        let images = layout.images_dir();
        let features = layout.features_dir(SYNTHETIC_BACKBONE);
        let gt_masks = layout.masks_dir().join("gt");
        for dir in [&images, &features, &layout.prompts_dir(), &gt_masks] {
            std::fs::create_dir_all(dir)?;
        }
        let prompts = self.region_prompts();
        for (v, cam) in self.cameras.iter().enumerate() {
            self.images[v].save_png(&images.join(&cam.image_name))?;
            write_fmap(
                &self.feature_maps[v],
                &crate::trainer::feature_file(&features, &cam.image_name),
                Dtype::F32,
            )?;
            for (r, prompt) in prompts.iter().enumerate() {
                std::fs::write(layout.gt_mask(&cam.view_id, &prompt.label), self.region_masks[v][r].encode_png()?)?;
            }
        }
        for prompt in &prompts {
            write_temb(prompt, &layout.prompt_file(&prompt.label))?;
        }
        Ok(())
    }
}

pub fn preset(name: &str, seed: u64) -> Result<SynthScene, SynthError> {
    match name {
        "two_regions" => two_regions(seed),
        other => Err(SynthError::UnknownPreset(other.to_string())),
    }
}

const WIDTH: usize = 64;
const HEIGHT: usize = 64;
const FOCAL: f64 = 80.0;
const NUM_VIEWS: usize = 24;
const RING_RADIUS: f64 = 3.5;
const RING_HEIGHT: f64 = 0.6;
const FEATURE_DIM: usize = 8;
const PER_REGION: usize = 25;
const POINT_NOISE: f64 = 0.02;

pub const REGION_LABELS: [&str; 2] = ["region0", "region1"];
const REGION_COLORS: [[f64; 3]; 2] = [[0.9, 0.25, 0.2], [0.2, 0.4, 0.9]];
const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];
/// Cluster centers and per-axis half extents.
const CLUSTERS: [([f64; 3], [f64; 3]); 2] = [([0.0, 0.0, 0.42], [0.5, 0.5, 0.22]), ([0.0, 0.0, -0.42], [0.5, 0.5, 0.22])];

fn quantize(img: &Image) -> Image {
    let data = img.to_u8().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::from_data(img.width, img.height, img.channels, data)
}

/// Two vertically stacked clusters of 25 Gaussians each, 24 ring views at 64x64.
pub fn two_regions(seed: u64) -> Result<SynthScene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeds = orthonormal_vectors(3, FEATURE_DIM, seed ^ 0xfea7);
    let palette: Vec<([f64; 3], TextEmbedding)> = vec![
        (REGION_COLORS[0], TextEmbedding::normalized(REGION_LABELS[0], &embeds[0])),
        (REGION_COLORS[1], TextEmbedding::normalized(REGION_LABELS[1], &embeds[1])),
        (BACKGROUND, TextEmbedding::normalized("background", &embeds[2])),
    ];

    let mut gt = GaussianSet::empty(0, FEATURE_DIM);
    let jitter = Normal::new(0.0, 0.03).expect("valid sigma");
    for (r, (center, half)) in CLUSTERS.iter().enumerate() {
        let feature: Vec<f64> = palette[r].1.vector.iter().map(|&v| v as f64).collect();
        for _ in 0..PER_REGION {
            // Uniform sample inside the ellipsoid.
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let rad = rng.random::<f64>().cbrt();
            let pos = [0, 1, 2].map(|k| center[k] + half[k] * rad * dir[k]);
            let scale = [0, 1, 2].map(|_| rng.random_range(0.07..0.14));
            let axis: [f64; 3] = UnitSphere.sample(&mut rng);
            let q = UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(Vector3::from(axis)),
                rng.random_range(0.0..PI),
            );
            let rgb = REGION_COLORS[r].map(|c| (c + jitter.sample(&mut rng)).clamp(0.0, 1.0));
            gt.push(pos, scale, [q.w, q.i, q.j, q.k], 0.95, rgb, &feature);
        }
    }

    let intrinsics = CameraIntrinsics {
        camera_id: 1,
        model: CameraModel::Pinhole,
        width: WIDTH as u32,
        height: HEIGHT as u32,
        fx: FOCAL,
        fy: FOCAL,
        cx: WIDTH as f64 / 2.0,
        cy: HEIGHT as f64 / 2.0,
        radial_k1: 0.0,
    };
    let mut poses = Vec::with_capacity(NUM_VIEWS);
    let mut cameras = Vec::with_capacity(NUM_VIEWS);
    for i in 0..NUM_VIEWS {
        let theta = 2.0 * PI * i as f64 / NUM_VIEWS as f64;
        let eye = Vector3::new(RING_RADIUS * theta.cos(), RING_RADIUS * theta.sin(), RING_HEIGHT);
        let view = CameraView::look_at(&format!("view_{i:03}"), eye, Vector3::zeros(), Vector3::z(), WIDTH, HEIGHT, FOCAL);
        let t = view.translation;
        let pose = CameraPose {
            image_id: i as u32 + 1,
            qvec: view.quaternion(),
            tvec: [t.x, t.y, t.z],
            camera_id: 1,
            image_name: view.image_name.clone(),
        };
        cameras.push(CameraView::from_colmap(&intrinsics, &pose));
        poses.push(pose);
    }

    let render_cfg = RenderConfig {
        background_rgb: BACKGROUND,
        background_feature: embeds[2].clone(),
        ..Default::default()
    };
    let colors: Vec<[f64; 3]> = palette.iter().map(|(c, _)| *c).collect();
    let mut images = Vec::with_capacity(NUM_VIEWS);
    let mut feature_maps = Vec::with_capacity(NUM_VIEWS);
    let mut region_masks = Vec::with_capacity(NUM_VIEWS);
    for cam in &cameras {
        let rgb = quantize(&render(&gt, cam, &render_cfg)?.rgb);
        let assign = palette_assignment(&rgb, &colors);
        region_masks.push(
            (0..REGION_LABELS.len())
                .map(|r| BinaryMask::from_bits(WIDTH, HEIGHT, assign.iter().map(|&a| a == r).collect()))
                .collect(),
        );
        feature_maps.push(synth_features(&rgb, &palette));
        images.push(rgb);
    }

    let noise = Normal::new(0.0, POINT_NOISE).expect("valid sigma");
    let mut points = SparsePoints::default();
    for i in 0..gt.len() {
        let p = gt.position(i);
        points.positions.push(p.map(|c| c + noise.sample(&mut rng)));
        let b = gt.sh_coeffs();
        let rgb = [0, 1, 2].map(|c| crate::sh::sh0_to_rgb(gt.sh(i)[c * b]));
        points.colors.push(rgb.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0));
        points.point_ids.push(i as u64 + 1);
    }

    Ok(SynthScene {
        gt,
        intrinsics,
        poses,
        cameras,
        images,
        feature_maps,
        palette,
        region_masks,
        points,
        render: render_cfg,
        split: SYNTH_SPLIT,
    })
}
