//! Semantic Gaussian splatting engine.
//!
//! Scenes are collections of anisotropic 3D Gaussians that carry a colour and
//! a low-dimensional semantic feature vector. The crate covers the whole
//! pipeline: COLMAP ingestion, initialization from sparse points, a
//! differentiable tile rasterizer for colour and feature channels, dual-branch
//! training, and text-prompted queries over rendered feature maps.

// Validation is written as `!(x > lo)` so NaN is rejected along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod checkpoint;
pub mod colmap;
pub mod features;
pub mod image_buf;
pub mod metrics;
pub mod project;
pub mod query;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod synth;
pub mod trainer;

pub use camera::CameraView;
pub use features::{FeatureMap, TextEmbedding};
pub use image_buf::Image;
pub use raster::{RenderConfig, RenderOutput};
pub use scene::{GaussianSet, InitConfig};
