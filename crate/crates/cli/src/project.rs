//! Project manifest, config file and checkpoint loading shared by all commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use semsplat::camera::CameraView;
use semsplat::checkpoint;
use semsplat::colmap::{load_model, SceneInputs, SplitRule};
use semsplat::project::ProjectLayout;
use semsplat::scene::GaussianSet;
use semsplat::trainer::{camera_for, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub view_id: String,
    pub image_name: String,
    pub split: String,
    pub camera_id: u32,
    pub width: u32,
    pub height: u32,
}

/// Summary of an ingested scene, written as `manifest.json` at the project root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split_rule: String,
    pub scene_extent: f64,
    pub num_points: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub views: Vec<ManifestView>,
}

impl Manifest {
    pub fn from_inputs(inputs: &SceneInputs, split: SplitRule) -> Self {
        let mut views = Vec::new();
        for (split_name, poses) in [("train", &inputs.train_views), ("test", &inputs.test_views)] {
            for p in poses.iter() {
                let intr = &inputs.intrinsics[&p.camera_id];
                views.push(ManifestView {
                    view_id: p.view_id(),
                    image_name: p.image_name.clone(),
                    split: split_name.to_string(),
                    camera_id: p.camera_id,
                    width: intr.width,
                    height: intr.height,
                });
            }
        }
        views.sort_by(|a, b| a.image_name.cmp(&b.image_name));
        Self {
            split_rule: split.to_string(),
            scene_extent: inputs.scene_extent,
            num_points: inputs.points.len(),
            num_train: inputs.train_views.len(),
            num_test: inputs.test_views.len(),
            views,
        }
    }

    pub fn split(&self) -> Result<SplitRule> {
        self.split_rule
            .parse()
            .map_err(|e| anyhow::anyhow!("manifest split rule {:?}: {e}", self.split_rule))
    }

    pub fn write(&self, layout: &ProjectLayout) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(layout.root().join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn read(layout: &ProjectLayout) -> Result<Self> {
        let path = layout.root().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {} (run `semsplat ingest` or `semsplat synth` first)", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Creates every standard subdirectory of the project.
pub fn ensure_layout(layout: &ProjectLayout) -> Result<()> {
    for dir in [
        layout.colmap_dir(),
        layout.images_dir(),
        layout.root().join("features"),
        layout.prompts_dir(),
        layout.checkpoints_dir(),
        layout.renders_dir(),
        layout.masks_dir(),
        layout.logs_dir(),
    ] {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::write(path, toml::to_string(cfg)?)?;
    Ok(())
}

/// Config at `explicit`, else the project's `train.toml`, else defaults.
pub fn load_config(layout: &ProjectLayout, explicit: Option<&Path>) -> Result<TrainConfig> {
    match explicit {
        Some(p) => read_config(p),
        None if layout.train_config().is_file() => read_config(&layout.train_config()),
        None => Ok(TrainConfig::default()),
    }
}

pub fn load_inputs(layout: &ProjectLayout) -> Result<SceneInputs> {
    let manifest = Manifest::read(layout)?;
    Ok(load_model(&layout.colmap_dir(), manifest.split()?)?)
}

pub fn checkpoint_path(layout: &ProjectLayout, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| layout.final_checkpoint())
}

/// Everything needed to render and query a trained project.
pub struct LoadedScene {
    pub layout: ProjectLayout,
    pub inputs: SceneInputs,
    pub config: TrainConfig,
    pub set: GaussianSet,
}

impl LoadedScene {
    pub fn open(root: &Path, checkpoint_file: Option<&Path>, config: Option<&Path>) -> Result<Self> {
        let layout = ProjectLayout::new(root);
        let inputs = load_inputs(&layout)?;
        let config = load_config(&layout, config)?;
        let ckpt = checkpoint_path(&layout, checkpoint_file);
        let set = checkpoint::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        config.render.validate(set.feature_dim)?;
        Ok(Self {
            layout,
            inputs,
            config,
            set,
        })
    }

    /// `(camera, split)` for every view in name order.
    pub fn cameras(&self) -> Result<Vec<(CameraView, &'static str)>> {
        let mut out = Vec::new();
        for (split, poses) in [("train", &self.inputs.train_views), ("test", &self.inputs.test_views)] {
            for p in poses.iter() {
                out.push((camera_for(&self.inputs, p)?, split));
            }
        }
        out.sort_by(|a, b| a.0.image_name.cmp(&b.0.image_name));
        Ok(out)
    }

    pub fn camera(&self, view_id: &str) -> Result<CameraView> {
        match self.cameras()?.into_iter().find(|(c, _)| c.view_id == view_id) {
            Some((c, _)) => Ok(c),
            None => bail!("unknown view {view_id:?}"),
        }
    }
}
