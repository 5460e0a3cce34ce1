//! On-disk layout of a project directory.

use std::path::{Path, PathBuf};

use crate::features::slug;

/// Backbone directory used for generated stand-in features.
pub const SYNTHETIC_BACKBONE: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectLayout {
    pub root: PathBuf,
}

impl ProjectLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn colmap_dir(&self) -> PathBuf {
        self.root.join("colmap")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn features_dir(&self, backbone: &str) -> PathBuf {
        self.root.join("features").join(backbone)
    }

    pub fn prompts_dir(&self) -> PathBuf {
        self.root.join("prompts")
    }

    pub fn prompt_file(&self, label: &str) -> PathBuf {
        self.prompts_dir().join(format!("{}.temb", slug(label)))
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    /// Final checkpoint written at the end of training.
    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints_dir().join("final.gspl")
    }

    pub fn checkpoint_at(&self, iteration: usize) -> PathBuf {
        self.checkpoints_dir().join(format!("iter_{iteration:06}.gspl"))
    }

    pub fn renders_dir(&self) -> PathBuf {
        self.root.join("renders")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    /// Ground-truth region masks shipped with synthetic scenes.
    pub fn gt_mask(&self, view_id: &str, label: &str) -> PathBuf {
        self.masks_dir().join("gt").join(format!("{view_id}__{}.png", slug(label)))
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn train_config(&self) -> PathBuf {
        self.root.join("train.toml")
    }
}
