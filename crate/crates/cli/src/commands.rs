//! Implementations of the pipeline subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::info;

use semsplat::checkpoint;
use semsplat::colmap::{load_model, SplitRule};
use semsplat::features::{read_fmap, read_temb, resize_bilinear, slug, write_fmap, Dtype};
use semsplat::image_buf::Image;
use semsplat::metrics::{evaluate, ViewTarget};
use semsplat::project::{ProjectLayout, SYNTHETIC_BACKBONE};
use semsplat::query::{
    argmax_point, cosine_heatmap, heatmap_image, overlay, pca_visualize, threshold_mask, OverlaySource,
    PointPromptDocument, DEFAULT_TAU,
};
use semsplat::raster::{render, RenderOutput};
use semsplat::synth;
use semsplat::trainer::{feature_file, load_training_views, train, TrainError};

use crate::project::{ensure_layout, load_config, load_inputs, write_config, LoadedScene, Manifest};

const MODEL_FILES: [&str; 6] = [
    "cameras.bin",
    "images.bin",
    "points3D.bin",
    "cameras.txt",
    "images.txt",
    "points3D.txt",
];

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Directory holding a COLMAP sparse model (text or binary).
    #[arg(long)]
    pub colmap: PathBuf,
    #[arg(long)]
    pub project: PathBuf,
    /// Every k-th image (in name order) is held out for testing.
    #[arg(long, default_value_t = 8)]
    pub split_k: usize,
    /// Directory with the posed photographs, copied into `images/`.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

/// Validates a COLMAP model, copies it (and optionally its images) into the
/// project and writes the manifest.
pub fn ingest(args: &IngestArgs) -> Result<Manifest> {
    let split = SplitRule::every_kth(args.split_k)?;
    let inputs = load_model(&args.colmap, split)?;
    let layout = ProjectLayout::new(&args.project);
    ensure_layout(&layout)?;
    let dest = layout.colmap_dir();
    let same = dest.canonicalize().ok() == args.colmap.canonicalize().ok();
    if !same {
        for name in MODEL_FILES {
            let src = args.colmap.join(name);
            if src.is_file() {
                std::fs::copy(&src, dest.join(name)).with_context(|| format!("copying {}", src.display()))?;
            }
        }
    }
    if let Some(images) = &args.images {
        for pose in inputs.all_views() {
            let src = images.join(&pose.image_name);
            let dst = layout.images_dir().join(&pose.image_name);
            if src.canonicalize().ok() != dst.canonicalize().ok() {
                std::fs::copy(&src, &dst).with_context(|| format!("copying image {}", src.display()))?;
            }
        }
    }
    let manifest = Manifest::from_inputs(&inputs, split);
    manifest.write(&layout)?;
    info!(
        "ingested {} train / {} test views, {} points",
        manifest.num_train, manifest.num_test, manifest.num_points
    );
    Ok(manifest)
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub project: PathBuf,
    #[arg(long, default_value = "two_regions")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training iterations written into the generated `train.toml`.
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
}

/// Writes a synthetic project: COLMAP model, images, feature maps, prompts,
/// ground-truth masks, manifest and a matching `train.toml`.
pub fn synth(args: &SynthArgs) -> Result<Manifest> {
    let scene = synth::preset(&args.preset, args.seed)?;
    let layout = ProjectLayout::new(&args.project);
    ensure_layout(&layout)?;
    scene.write_project(&layout)?;
    let mut cfg = semsplat::trainer::TrainConfig {
        iterations: args.iterations,
        seed: args.seed,
        render: scene.render.clone(),
        ..Default::default()
    };
    cfg.init.feature_dim = scene.feature_dim();
    write_config(&layout.train_config(), &cfg)?;
    let inputs = load_model(&layout.colmap_dir(), scene.split)?;
    let manifest = Manifest::from_inputs(&inputs, scene.split);
    manifest.write(&layout)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub project: PathBuf,
    /// Feature source: reads `features/<backbone>/`.
    #[arg(long, default_value = SYNTHETIC_BACKBONE)]
    pub backbone: String,
    /// Config file; defaults to the project's `train.toml`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub num_gaussians: usize,
    pub final_loss: Option<f64>,
}

pub fn train_cmd(args: &TrainArgs) -> Result<TrainSummary> {
    let layout = ProjectLayout::new(&args.project);
    ensure_layout(&layout)?;
    let mut cfg = load_config(&layout, args.config.as_deref())?;
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let inputs = load_inputs(&layout)?;
    let views = load_training_views(&inputs, &layout.images_dir(), &layout.features_dir(&args.backbone))?;
    let mut hook = |it: usize, set: &semsplat::GaussianSet| -> Result<(), TrainError> {
        checkpoint::save(set, &layout.checkpoint_at(it)).map_err(|e| TrainError::Checkpoint(e.to_string()))
    };
    let outcome = train(&inputs, &views, &cfg, &mut hook)?;
    let ckpt = layout.final_checkpoint();
    checkpoint::save(&outcome.set, &ckpt)?;
    let log = layout.logs_dir().join("train.csv");
    checkpoint::write_atomic(&log, outcome.log.to_csv().as_bytes())?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        log,
        num_gaussians: outcome.set.len(),
        final_loss: outcome.log.rows.last().map(|r| r.loss.total),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderMode {
    Rgb,
    #[value(name = "feature_pca")]
    FeaturePca,
    Depth,
    Alpha,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Rgb => "rgb",
            RenderMode::FeaturePca => "feature_pca",
            RenderMode::Depth => "depth",
            RenderMode::Alpha => "alpha",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        <Self as ValueEnum>::from_str(s, true).ok()
    }
}

/// Converts one render channel to an 8-bit-ready image. Depth is divided by
/// the farthest covered depth; uncovered pixels are black.
pub fn render_image(out: &RenderOutput, mode: RenderMode) -> Result<Image> {
    Ok(match mode {
        RenderMode::Rgb => out.rgb.clamped(0.0, 1.0),
        RenderMode::FeaturePca => pca_visualize(&out.feature_map("render"))?,
        RenderMode::Alpha => out.alpha.clamped(0.0, 1.0),
        RenderMode::Depth => {
            let covered = |p: usize| out.alpha.data[p] > 1e-3;
            let max = (0..out.depth.data.len())
                .filter(|&p| covered(p))
                .map(|p| out.depth.data[p])
                .fold(0.0, f64::max);
            let data = (0..out.depth.data.len())
                .map(|p| if covered(p) && max > 0.0 { out.depth.data[p] / max } else { 0.0 })
                .collect();
            Image::from_data(out.depth.width, out.depth.height, 1, data)
        }
    })
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub project: PathBuf,
    /// Defaults to `checkpoints/final.gspl`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub view: String,
    #[arg(long, value_enum, default_value_t = RenderMode::Rgb)]
    pub mode: RenderMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Returns the written PNG path (and the raw feature dump for `feature_pca`).
pub fn render_cmd(args: &RenderArgs) -> Result<Vec<PathBuf>> {
    let scene = LoadedScene::open(&args.project, args.checkpoint.as_deref(), None)?;
    let camera = scene.camera(&args.view)?;
    let out = render(&scene.set, &camera, &scene.config.render)?;
    let dir = scene.layout.renders_dir();
    std::fs::create_dir_all(&dir)?;
    let png = args
        .out
        .clone()
        .unwrap_or_else(|| dir.join(format!("{}_{}.png", args.view, args.mode.name())));
    render_image(&out, args.mode)?.save_png(&png)?;
    let mut written = vec![png];
    if args.mode == RenderMode::FeaturePca {
        let fmap = dir.join(format!("{}.fmap", args.view));
        write_fmap(&out.feature_map("render"), &fmap, Dtype::F32)?;
        written.push(fmap);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefineSource {
    /// The rendered novel view.
    Rendered,
    /// The ground-truth photograph of the same view.
    Photo,
}

#[derive(Debug, Clone, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub project: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub view: String,
    /// Prompt embedding (TEMB file).
    #[arg(long)]
    pub prompt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Image written as input for external mask refinement.
    #[arg(long, value_enum, default_value_t = RefineSource::Rendered)]
    pub refine_source: RefineSource,
}

#[derive(Debug)]
pub struct QueryOutputs {
    pub point: PointPromptDocument,
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
    pub mask: PathBuf,
    pub point_file: PathBuf,
    pub refine_input: PathBuf,
}

/// render -> cosine heatmap -> threshold mask -> argmax point, written under `masks/`.
pub fn query_cmd(args: &QueryArgs) -> Result<QueryOutputs> {
    let scene = LoadedScene::open(&args.project, args.checkpoint.as_deref(), None)?;
    let camera = scene.camera(&args.view)?;
    let prompt = read_temb(&args.prompt)?;
    let out = render(&scene.set, &camera, &scene.config.render)?;
    let heat = cosine_heatmap(&out.feature_map("render"), &prompt)?;
    let mask = threshold_mask(&heat, args.tau)?;
    let point = argmax_point(&heat, &camera.view_id)?.document(camera.width, camera.height);
    let rgb = out.rgb.clamped(0.0, 1.0);

    let dir = scene.layout.masks_dir();
    std::fs::create_dir_all(&dir)?;
    let stem = format!("{}__{}", camera.view_id, slug(&prompt.label));
    let outputs = QueryOutputs {
        heatmap: dir.join(format!("{stem}_heatmap.png")),
        overlay: dir.join(format!("{stem}_overlay.png")),
        mask: dir.join(format!("{stem}_mask.png")),
        point_file: dir.join(format!("{stem}_point.json")),
        refine_input: dir.join(format!("{stem}_refine_input.png")),
        point,
    };
    heatmap_image(&heat).save_png(&outputs.heatmap)?;
    overlay(&rgb, OverlaySource::Mask(&mask))?.save_png(&outputs.overlay)?;
    std::fs::write(&outputs.mask, mask.encode_png()?)?;
    std::fs::write(&outputs.point_file, outputs.point.to_json() + "\n")?;
    match args.refine_source {
        RefineSource::Rendered => rgb.save_png(&outputs.refine_input)?,
        RefineSource::Photo => {
            let src = scene.layout.images_dir().join(&camera.image_name);
            std::fs::copy(&src, &outputs.refine_input).with_context(|| format!("copying {}", src.display()))?;
        }
    }
    Ok(outputs)
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub project: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also score rendered features against `features/<backbone>/` when present.
    #[arg(long, default_value = SYNTHETIC_BACKBONE)]
    pub backbone: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Scores held-out views; writes `logs/metrics.csv` by default.
pub fn metrics_cmd(args: &MetricsArgs) -> Result<(semsplat::metrics::MetricReport, PathBuf)> {
    let scene = LoadedScene::open(&args.project, args.checkpoint.as_deref(), None)?;
    let views: Vec<_> = scene.cameras()?.into_iter().filter(|(_, s)| *s == "test").map(|(c, _)| c).collect();
    if views.is_empty() {
        bail!("project has no test views");
    }
    let images = scene.layout.images_dir();
    let features = scene.layout.features_dir(&args.backbone);
    let report = evaluate(&scene.set, &views, &scene.config.render, |cam| {
        let rgb = Image::load_png_rgb(&images.join(&cam.image_name)).ok()?;
        let feature = read_fmap(&feature_file(&features, &cam.image_name)).ok().map(|m| {
            if m.height == cam.height && m.width == cam.width {
                m.to_image()
            } else {
                resize_bilinear(&m, cam.height, cam.width).to_image()
            }
        });
        Some(ViewTarget { rgb, feature })
    })?;
    let out = args.out.clone().unwrap_or_else(|| scene.layout.logs_dir().join("metrics.csv"));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, report.to_csv())?;
    Ok((report, out))
}

/// Resolves a prompt argument: an existing file, or a label under `prompts/`.
pub fn resolve_prompt(project: &Path, prompt: &Path) -> PathBuf {
    if prompt.is_file() {
        return prompt.to_path_buf();
    }
    ProjectLayout::new(project).prompt_file(&prompt.to_string_lossy())
}
