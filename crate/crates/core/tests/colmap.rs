use std::path::PathBuf;

use semsplat::colmap::*;

fn fixture(sub: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/colmap_small").join(sub)
}

fn read(sub: &str, file: &str) -> Vec<u8> {
    std::fs::read(fixture(sub).join(file)).unwrap()
}

#[test]
fn text_fixture_reparses_identically_after_reserialization() {
    let cams = parse_cameras(&read("text", "cameras.txt"), ModelFormat::Text).unwrap();
    let poses = parse_images(&read("text", "images.txt"), ModelFormat::Text).unwrap();
    let points = parse_points3d(&read("text", "points3D.txt"), ModelFormat::Text).unwrap();
    assert_eq!(cams.len(), 3);
    assert_eq!(poses.len(), 4);
    assert_eq!(points.len(), 4);
    assert_eq!(poses[2].image_name, "frame 003.png");

    let cams2 = parse_cameras(write_cameras_text(&cams).as_bytes(), ModelFormat::Text).unwrap();
    let poses2 = parse_images(write_images_text(&poses).as_bytes(), ModelFormat::Text).unwrap();
    let points2 = parse_points3d(write_points_text(&points).as_bytes(), ModelFormat::Text).unwrap();
    assert_eq!(cams, cams2);
    assert_eq!(poses, poses2);
    assert_eq!(points, points2);

    // Binary writer round trip is exact as well.
    assert_eq!(parse_cameras(&write_cameras_binary(&cams), ModelFormat::Binary).unwrap(), cams);
    assert_eq!(parse_images(&write_images_binary(&poses), ModelFormat::Binary).unwrap(), poses);
    assert_eq!(parse_points3d(&write_points_binary(&points), ModelFormat::Binary).unwrap(), points);
}

#[test]
fn binary_and_text_fixtures_agree() {
    let ct = parse_cameras(&read("text", "cameras.txt"), ModelFormat::Text).unwrap();
    let cb = parse_cameras(&read("binary", "cameras.bin"), ModelFormat::Binary).unwrap();
    assert_eq!(ct.len(), cb.len());
    for (a, b) in ct.iter().zip(&cb) {
        assert_eq!((a.camera_id, a.model, a.width, a.height), (b.camera_id, b.model, b.width, b.height));
        for (x, y) in [(a.fx, b.fx), (a.fy, b.fy), (a.cx, b.cx), (a.cy, b.cy), (a.radial_k1, b.radial_k1)] {
            assert!((x - y).abs() <= 1e-9);
        }
    }
    let it = parse_images(&read("text", "images.txt"), ModelFormat::Text).unwrap();
    let ib = parse_images(&read("binary", "images.bin"), ModelFormat::Binary).unwrap();
    assert_eq!(it.len(), ib.len());
    for (a, b) in it.iter().zip(&ib) {
        assert_eq!((a.image_id, a.camera_id, &a.image_name), (b.image_id, b.camera_id, &b.image_name));
        for k in 0..4 {
            assert!((a.qvec[k] - b.qvec[k]).abs() <= 1e-9);
        }
        for k in 0..3 {
            assert!((a.tvec[k] - b.tvec[k]).abs() <= 1e-9);
        }
    }
    let pt = parse_points3d(&read("text", "points3D.txt"), ModelFormat::Text).unwrap();
    let pb = parse_points3d(&read("binary", "points3D.bin"), ModelFormat::Binary).unwrap();
    assert_eq!(pt.point_ids, pb.point_ids);
    for (a, b) in pt.positions.iter().zip(&pb.positions).chain(pt.colors.iter().zip(&pb.colors)) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-9);
        }
    }
}

#[test]
fn load_model_prefers_binary_and_splits_deterministically() {
    let text = load_model(&fixture("text"), SplitRule::EveryKth(2)).unwrap();
    let bin = load_model(&fixture("binary"), SplitRule::EveryKth(2)).unwrap();
    let names = |v: &[CameraPose]| v.iter().map(|p| p.image_name.clone()).collect::<Vec<_>>();
    assert_eq!(names(&text.test_views), vec!["frame 003.png", "frame_002.png"]);
    assert_eq!(names(&text.train_views), vec!["frame_001.png", "frame_004.jpg"]);
    assert_eq!(names(&bin.test_views), names(&text.test_views));
    assert!((text.scene_extent - bin.scene_extent).abs() < 1e-9);
}

#[test]
fn corrupt_inputs_are_rejected() {
    let bytes = read("binary", "images.bin");
    assert!(matches!(
        parse_images(&bytes[..bytes.len() - 5], ModelFormat::Binary),
        Err(ColmapError::TruncatedFile)
    ));
    let opencv = b"1 OPENCV 10 10 1 1 5 5 0 0 0 0\n";
    assert!(matches!(
        parse_cameras(opencv, ModelFormat::Text),
        Err(ColmapError::UnsupportedCameraModel(m)) if m == "OPENCV"
    ));
    let nan = b"1 PINHOLE 10 10 nan 1 5 5\n";
    assert!(parse_cameras(nan, ModelFormat::Text).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_model(dir.path(), SplitRule::default()), Err(ColmapError::MissingFile(_))));
}

#[test]
fn dangling_camera_reference_rejected() {
    let cams = parse_cameras(&read("text", "cameras.txt"), ModelFormat::Text).unwrap();
    let mut poses = parse_images(&read("text", "images.txt"), ModelFormat::Text).unwrap();
    poses[0].camera_id = 42;
    let points = parse_points3d(&read("text", "points3D.txt"), ModelFormat::Text).unwrap();
    assert!(matches!(
        assemble(cams, poses, points, SplitRule::default()),
        Err(ColmapError::InconsistentReferences { camera_id: 42, .. })
    ));
}
