use axum::body::Body;
use axum::http::{Request, Response, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use semsplat::features::encode_temb;
use semsplat::image_buf::Image;
use semsplat::query::{BinaryMask, PointPromptDocument};
use semsplat::synth::{two_regions, SynthScene};
use semsplat::TextEmbedding;
use semsplat_cli::service::{prompt_id, router, AppState, PromptInfo, ViewInfo};

fn state_for(scene: &SynthScene) -> AppState {
    let cameras = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), if i % 6 == 0 { "test" } else { "train" }))
        .collect();
    AppState::new(scene.gt.clone(), scene.render.clone(), cameras)
}

fn app_with_prompts(scene: &SynthScene) -> (axum::Router, Vec<String>) {
    let state = state_for(scene);
    let ids = scene
        .region_prompts()
        .into_iter()
        .map(|p| state.add_prompt(p).unwrap().prompt_id)
        .collect();
    (router(state, None), ids)
}

async fn send(app: &axum::Router, req: Request<Body>) -> (Response<Body>, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let (parts, body) = resp.into_parts();
    let bytes = body.collect().await.unwrap().to_bytes().to_vec();
    (Response::from_parts(parts, Body::empty()), bytes)
}

async fn get(app: &axum::Router, uri: &str) -> (Response<Body>, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn post_json(uri: &str, body: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn header(resp: &Response<Body>, name: &str) -> String {
    resp.headers()[name].to_str().unwrap().to_string()
}

#[tokio::test]
async fn views_lists_train_and_test() {
    let scene = two_regions(0).unwrap();
    let app = router(state_for(&scene), None);
    let (resp, body) = get(&app, "/api/views").await;
    assert_eq!(resp.status(), StatusCode::OK);
    let views: Vec<ViewInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(views.len(), 24);
    assert_eq!(views.iter().filter(|v| v.split == "train").count(), 20);
    assert_eq!(views.iter().filter(|v| v.split == "test").count(), 4);
    assert!(views.iter().all(|v| v.width == 64 && v.height == 64));
}

#[tokio::test]
async fn prompt_errors() {
    let scene = two_regions(0).unwrap();
    let app = router(state_for(&scene), None);

    let (resp, _) = send(&app, post_json("/api/prompts", serde_json::json!({"label": "x", "embedding": [1.0, 0.0, 0.0]}))).await;
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let (resp, body) = send(&app, post_json("/api/prompts", serde_json::json!({"label": "dome", "text": "dome"}))).await;
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert!(String::from_utf8(body).unwrap().contains("TEMB"));

    let (resp, _) = send(&app, post_json("/api/prompts", serde_json::json!({"label": "x"}))).await;
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let wrong = encode_temb(&TextEmbedding::normalized("w", &[1.0, 2.0])).unwrap();
    let req = Request::post("/api/prompts")
        .header("content-type", "application/octet-stream")
        .body(Body::from(wrong))
        .unwrap();
    assert_eq!(send(&app, req).await.0.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn prompt_upload_and_listing() {
    let scene = two_regions(0).unwrap();
    let app = router(state_for(&scene), None);
    let prompts = scene.region_prompts();

    let req = Request::post("/api/prompts")
        .header("content-type", "application/octet-stream")
        .body(Body::from(encode_temb(&prompts[0]).unwrap()))
        .unwrap();
    let (resp, body) = send(&app, req).await;
    assert_eq!(resp.status(), StatusCode::CREATED);
    let info: PromptInfo = serde_json::from_slice(&body).unwrap();
    assert_eq!(info.prompt_id, prompt_id(&prompts[0]));
    assert_eq!(info.label, "region0");

    let v: Vec<f64> = prompts[1].vector.iter().map(|x| *x as f64).collect();
    let (resp, body) = send(&app, post_json("/api/prompts", serde_json::json!({"label": "region1", "embedding": v}))).await;
    assert_eq!(resp.status(), StatusCode::CREATED);
    let info: PromptInfo = serde_json::from_slice(&body).unwrap();
    assert_eq!(info.dim, 8);

    let (_, body) = get(&app, "/api/prompts").await;
    let listed: Vec<PromptInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(listed.iter().map(|p| p.label.as_str()).collect::<Vec<_>>(), ["region0", "region1"]);
}

#[tokio::test]
async fn unknown_view_or_prompt_is_404() {
    let scene = two_regions(0).unwrap();
    let (app, ids) = app_with_prompts(&scene);
    for uri in [
        "/api/render?view=nope".to_string(),
        format!("/api/heatmap?view=nope&prompt={}", ids[0]),
        "/api/heatmap?view=view_000&prompt=missing".to_string(),
        format!("/api/mask?view=nope&prompt={}", ids[0]),
        format!("/api/refined_mask?view=view_000&prompt={}", ids[0]),
    ] {
        assert_eq!(get(&app, &uri).await.0.status(), StatusCode::NOT_FOUND, "{uri}");
    }
    assert_eq!(get(&app, "/api/render?view=view_000&mode=bogus").await.0.status(), StatusCode::BAD_REQUEST);
    let uri = format!("/api/mask?view=view_000&prompt={}&tau=1.5", ids[0]);
    assert_eq!(get(&app, &uri).await.0.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn renders_are_byte_identical() {
    let scene = two_regions(0).unwrap();
    let (app, ids) = app_with_prompts(&scene);
    for uri in [
        "/api/render?view=view_006&mode=rgb".to_string(),
        "/api/render?view=view_006&mode=feature_pca".to_string(),
        "/api/render?view=view_006&mode=depth".to_string(),
        format!("/api/heatmap?view=view_006&prompt={}", ids[1]),
        format!("/api/mask?view=view_006&prompt={}&tau=0.8", ids[1]),
    ] {
        let (a, body_a) = get(&app, &uri).await;
        assert_eq!(a.status(), StatusCode::OK, "{uri}");
        assert_eq!(header(&a, "content-type"), "image/png");
        // A fresh state recomputes from scratch rather than hitting the cache.
        let (fresh, _) = app_with_prompts(&scene);
        let (_, body_b) = get(&fresh, &uri).await;
        let (_, body_c) = get(&app, &uri).await;
        assert_eq!(body_a, body_b, "{uri}");
        assert_eq!(body_a, body_c, "{uri}");
    }
    // The RGB render of the ground-truth scene reproduces the stored photograph.
    let (_, png) = get(&app, "/api/render?view=view_006&mode=rgb").await;
    assert_eq!(Image::decode_png_rgb(&png).unwrap(), scene.images[6]);
}

#[tokio::test]
async fn heatmap_and_mask_locate_regions() {
    let scene = two_regions(0).unwrap();
    let (app, ids) = app_with_prompts(&scene);
    for (r, id) in ids.iter().enumerate() {
        for v in [0usize, 6, 12, 18] {
            let view = &scene.cameras[v].view_id;
            let (resp, _) = get(&app, &format!("/api/heatmap?view={view}&prompt={id}")).await;
            assert_eq!(resp.status(), StatusCode::OK);
            let x: usize = header(&resp, "x-argmax-x").parse().unwrap();
            let y: usize = header(&resp, "x-argmax-y").parse().unwrap();
            let score: f64 = header(&resp, "x-argmax-score").parse().unwrap();
            assert!(scene.region_masks[v][r].get(x, y), "argmax outside region {r} in {view}");
            assert!(score > 0.99);

            let (resp, body) = get(&app, &format!("/api/mask?view={view}&prompt={id}&format=json")).await;
            let doc: PointPromptDocument = serde_json::from_slice(&body).unwrap();
            assert_eq!(resp.status(), StatusCode::OK);
            assert_eq!((doc.x, doc.y), (x, y));
            assert_eq!(doc.source, "lseg_argmax");

            let (resp, body) = get(&app, &format!("/api/mask?view={view}&prompt={id}&format=mask")).await;
            let header_doc: PointPromptDocument =
                serde_json::from_str(&header(&resp, "x-point-prompt")).unwrap();
            assert_eq!(header_doc, doc);
            let mask = BinaryMask::decode_png(&body, 64, 64).unwrap();
            let iou = mask.iou(&scene.region_masks[v][r]);
            assert!(iou >= 0.8, "iou {iou} region {r} {view}");
        }
    }
}

#[tokio::test]
async fn tau_zero_selects_everything() {
    let scene = two_regions(0).unwrap();
    let (app, ids) = app_with_prompts(&scene);
    let (_, body) = get(&app, &format!("/api/mask?view=view_003&prompt={}&tau=0&format=mask", ids[0])).await;
    assert_eq!(BinaryMask::decode_png(&body, 64, 64).unwrap().count(), 64 * 64);
}

#[tokio::test]
async fn refined_mask_round_trip() {
    let scene = two_regions(0).unwrap();
    let (app, ids) = app_with_prompts(&scene);
    let uri = format!("/api/refined_mask?view=view_000&prompt={}", ids[0]);
    let png = scene.region_masks[0][0].encode_png().unwrap();

    let (resp, _) = send(&app, Request::post(&uri).body(Body::from(png.clone())).unwrap()).await;
    assert_eq!(resp.status(), StatusCode::CREATED);
    let (resp, overlay) = get(&app, &uri).await;
    assert_eq!(resp.status(), StatusCode::OK);
    let img = Image::decode_png_rgb(&overlay).unwrap();
    assert_eq!((img.width, img.height), (64, 64));

    // Results from a different model are kept apart.
    assert_eq!(get(&app, &format!("{uri}&model=sam2")).await.0.status(), StatusCode::NOT_FOUND);

    let small = BinaryMask::from_bits(8, 8, vec![true; 64]).encode_png().unwrap();
    let (resp, _) = send(&app, Request::post(&uri).body(Body::from(small)).unwrap()).await;
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn text_prompts_go_through_the_bridge() {
    use axum::routing::post;
    use axum::Json;

    let bridge = axum::Router::new().route(
        "/embed",
        post(|Json(req): Json<serde_json::Value>| async move {
            let text = req["text"].as_str().unwrap_or("").to_string();
            let mut v = vec![0.0; 8];
            v[text.len() % 8] = 2.0;
            Json(serde_json::json!({ "label": text, "embedding": v }))
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, bridge).await.unwrap() });

    let scene = two_regions(0).unwrap();
    let state = state_for(&scene).with_bridge(Some(format!("http://{addr}/")));
    let app = router(state, None);
    let (resp, body) = send(&app, post_json("/api/prompts", serde_json::json!({"label": "", "text": "dome"}))).await;
    assert_eq!(resp.status(), StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    let info: PromptInfo = serde_json::from_slice(&body).unwrap();
    assert_eq!(info.label, "dome");
    let mut expected = vec![0.0; 8];
    expected[4] = 1.0;
    assert_eq!(info.prompt_id, prompt_id(&TextEmbedding::normalized("dome", &expected)));
}
