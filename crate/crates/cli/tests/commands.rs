use std::path::{Path, PathBuf};

use semsplat::checkpoint;
use semsplat::features::read_temb;
use semsplat::image_buf::Image;
use semsplat::metrics::psnr;
use semsplat::project::ProjectLayout;
use semsplat::query::BinaryMask;
use semsplat::scene::init_from_sparse;
use semsplat::synth::REGION_LABELS;
use semsplat_cli::commands::{
    ingest, query_cmd, render_cmd, resolve_prompt, synth, train_cmd, IngestArgs, QueryArgs, RefineSource, RenderArgs,
    RenderMode, SynthArgs, TrainArgs,
};
use semsplat_cli::project::{load_config, load_inputs};

fn fixture(format: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/colmap_small").join(format)
}

fn synth_project(dir: &Path, seed: u64) -> PathBuf {
    let root = dir.join(format!("synth_{seed}"));
    synth(&SynthArgs {
        project: root.clone(),
        preset: "two_regions".into(),
        seed,
        iterations: 2000,
    })
    .unwrap();
    root
}

fn train_args(root: &Path, iterations: usize) -> TrainArgs {
    TrainArgs {
        project: root.to_path_buf(),
        backbone: "synthetic".into(),
        config: None,
        iterations: Some(iterations),
        seed: None,
    }
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn ingest_writes_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let args = IngestArgs {
        colmap: fixture("text"),
        project: dir.path().join("p"),
        split_k: 2,
        images: None,
    };
    let m = ingest(&args).unwrap();
    assert_eq!((m.num_train, m.num_test, m.num_points), (2, 2, 4));
    assert_eq!(m.split_rule, "every_kth(2)");
    let first = std::fs::read(dir.path().join("p/manifest.json")).unwrap();
    ingest(&args).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("p/manifest.json")).unwrap());
    assert!(dir.path().join("p/colmap/points3D.txt").is_file());

    // The copied model is loadable on its own.
    let inputs = load_inputs(&ProjectLayout::new(dir.path().join("p"))).unwrap();
    assert_eq!(inputs.test_views.len(), 2);
}

#[test]
fn ingest_rejects_missing_points() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    std::fs::create_dir_all(&model).unwrap();
    for f in ["cameras.txt", "images.txt"] {
        std::fs::copy(fixture("text").join(f), model.join(f)).unwrap();
    }
    let err = ingest(&IngestArgs {
        colmap: model,
        project: dir.path().join("p"),
        split_k: 8,
        images: None,
    })
    .unwrap_err();
    assert!(err.to_string().contains("points3D"), "{err}");
    assert!(ingest(&IngestArgs {
        colmap: fixture("text"),
        project: dir.path().join("q"),
        split_k: 1,
        images: None,
    })
    .is_err());
}

#[test]
fn synth_is_reproducible_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_project(dir.path(), 3);
    let b = dir.path().join("again");
    std::fs::rename(&a, &b).unwrap();
    let a = synth_project(dir.path(), 3);
    assert_eq!(files_under(&a), files_under(&b));

    let layout = ProjectLayout::new(&a);
    let prompts: Vec<_> = REGION_LABELS.iter().map(|l| read_temb(&layout.prompt_file(l)).unwrap()).collect();
    for (i, p) in prompts.iter().enumerate() {
        for (j, q) in prompts.iter().enumerate() {
            let dot: f64 = p.vector.iter().zip(&q.vector).map(|(x, y)| *x as f64 * *y as f64).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-6);
        }
    }
    // Region masks never overlap.
    for v in 0..24 {
        let view = format!("view_{v:03}");
        let masks: Vec<BinaryMask> = REGION_LABELS
            .iter()
            .map(|l| BinaryMask::decode_png(&std::fs::read(layout.gt_mask(&view, l)).unwrap(), 64, 64).unwrap())
            .collect();
        assert!(masks[0].bits.iter().zip(&masks[1].bits).all(|(x, y)| !(x & y)));
    }
    let cfg = load_config(&layout, None).unwrap();
    assert_eq!(cfg.iterations, 2000);
    assert_eq!(cfg.init.feature_dim, 8);
    assert!(cfg.densify.is_none());
}

#[test]
fn zero_iterations_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth_project(dir.path(), 0);
    let summary = train_cmd(&train_args(&root, 0)).unwrap();
    let saved = checkpoint::load(&summary.checkpoint).unwrap();
    let layout = ProjectLayout::new(&root);
    let inputs = load_inputs(&layout).unwrap();
    let cfg = load_config(&layout, None).unwrap();
    let init = init_from_sparse(&inputs.points, &cfg.init, cfg.seed).unwrap();
    assert_eq!(checkpoint::encode(&saved), checkpoint::encode(&init));
    assert_eq!(std::fs::read_to_string(summary.log).unwrap().lines().count(), 1);
}

#[test]
fn unknown_backbone_is_missing_feature_map() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth_project(dir.path(), 0);
    let mut args = train_args(&root, 1);
    args.backbone = "lseg".into();
    let err = train_cmd(&args).unwrap_err();
    assert!(err.to_string().contains("feature map"), "{err}");
}

#[test]
fn render_and_query_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth_project(dir.path(), 0);
    // Checkpoint the ground-truth scene so renders can be checked against the photos.
    let scene = semsplat::synth::two_regions(0).unwrap();
    let layout = ProjectLayout::new(&root);
    checkpoint::save(&scene.gt, &layout.final_checkpoint()).unwrap();

    let render = |view: &str, mode| {
        render_cmd(&RenderArgs {
            project: root.clone(),
            checkpoint: None,
            view: view.into(),
            mode,
            out: None,
        })
    };
    let written = render("view_006", RenderMode::Rgb).unwrap();
    let ours = Image::load_png_rgb(&written[0]).unwrap();
    let photo = Image::load_png_rgb(&layout.images_dir().join("view_006.png")).unwrap();
    assert!(psnr(&ours, &photo).unwrap() > 45.0);

    let pca = render("view_006", RenderMode::FeaturePca).unwrap();
    assert_eq!(pca.len(), 2);
    let first = std::fs::read(&pca[0]).unwrap();
    render("view_006", RenderMode::FeaturePca).unwrap();
    assert_eq!(first, std::fs::read(&pca[0]).unwrap());
    for mode in [RenderMode::Depth, RenderMode::Alpha] {
        render("view_006", mode).unwrap();
    }
    assert!(render("view_999", RenderMode::Rgb).is_err());

    let query = |tau: f64, prompt: &str| {
        query_cmd(&QueryArgs {
            project: root.clone(),
            checkpoint: None,
            view: "view_012".into(),
            prompt: resolve_prompt(&root, Path::new(prompt)),
            tau,
            refine_source: RefineSource::Photo,
        })
    };
    let out = query(0.75, "region1").unwrap();
    let gt = BinaryMask::decode_png(&std::fs::read(layout.gt_mask("view_012", "region1")).unwrap(), 64, 64).unwrap();
    assert!(gt.get(out.point.x, out.point.y));
    let saved: semsplat::query::PointPromptDocument =
        serde_json::from_str(&std::fs::read_to_string(&out.point_file).unwrap()).unwrap();
    assert_eq!(saved, out.point);
    assert_eq!(std::fs::read(&out.refine_input).unwrap(), std::fs::read(layout.images_dir().join("view_012.png")).unwrap());
    for p in [&out.heatmap, &out.overlay] {
        assert!(Image::load_png_rgb(p).is_ok());
    }

    let full = query(0.0, "region1").unwrap();
    assert_eq!(BinaryMask::decode_png(&std::fs::read(&full.mask).unwrap(), 64, 64).unwrap().count(), 4096);

    let wrong = dir.path().join("wrong.temb");
    semsplat::features::write_temb(&semsplat::TextEmbedding::normalized("w", &[1.0, 0.0, 0.0]), &wrong).unwrap();
    let err = query(0.75, wrong.to_str().unwrap()).unwrap_err();
    assert!(err.to_string().contains("does not match"), "{err}");
}
