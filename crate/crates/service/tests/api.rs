use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use vitprobe::ingest::RasterImage;
use vitprobe::{ViTConfig, ViTWeights};
use vitprobe_service::{router, AppState, Model};

/// 16x16 input with 4x4 patches: a 4x4 grid, 17 tokens, 10 classes.
fn small_config() -> ViTConfig {
    ViTConfig {
        image_h: 16,
        image_w: 16,
        n_classes: 10,
        ..ViTConfig::tiny()
    }
}

fn state(capacity: usize) -> Arc<AppState> {
    let w = ViTWeights::random(small_config(), 3, 0.5).unwrap();
    let labels = vitprobe::CIFAR10_LABELS.iter().map(|s| s.to_string()).collect();
    AppState::new(Some(Model::new(w, labels).unwrap()), capacity)
}

fn png(seed: u8) -> Vec<u8> {
    let pixels = (0..20 * 24 * 3).map(|i| (i as u8).wrapping_mul(seed)).collect();
    RasterImage::new(20, 24, pixels).unwrap().to_png().unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, body) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap())
}

fn multipart(image: &[u8]) -> Request<Body> {
    let boundary = "vitprobe-test-boundary";
    let mut body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(image);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    Request::post("/api/v1/session")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

async fn create(app: &Router, image: &[u8]) -> Value {
    let (status, body) = send(app, multipart(image)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[tokio::test]
async fn session_from_png_has_a_distribution() {
    let app = router(state(4), None);
    let s = create(&app, &png(7)).await;
    let probs = floats(&s["probs"]);
    assert_eq!(probs.len(), 10);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(s["session_id"].as_str().unwrap().len(), 32);
    assert_eq!(s["labels"].as_array().unwrap().len(), 10);
    let predicted = s["predicted_class"].as_u64().unwrap() as usize;
    assert_eq!(s["predicted_label"], vitprobe::CIFAR10_LABELS[predicted]);
    assert_eq!((s["image_width"].as_u64(), s["image_height"].as_u64()), (Some(20), Some(24)));
}

#[tokio::test]
async fn base64_and_raw_uploads_match_multipart() {
    use base64::Engine;
    let app = router(state(4), None);
    let image = png(9);
    let via_form = create(&app, &image).await;

    let encoded = base64::engine::general_purpose::STANDARD.encode(&image);
    let body = serde_json::json!({ "image_base64": format!("data:image/png;base64,{encoded}") });
    let req = Request::post("/api/v1/session")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, via_json) = send(&app, req).await;
    assert_eq!(status, StatusCode::OK);
    let via_json: Value = serde_json::from_slice(&via_json).unwrap();

    let req = Request::post("/api/v1/session")
        .header(header::CONTENT_TYPE, "application/octet-stream")
        .body(Body::from(image))
        .unwrap();
    let (status, via_raw) = send(&app, req).await;
    assert_eq!(status, StatusCode::OK);
    let via_raw: Value = serde_json::from_slice(&via_raw).unwrap();

    assert_eq!(via_form["probs"], via_json["probs"]);
    assert_eq!(via_form["probs"], via_raw["probs"]);
    assert_ne!(via_form["session_id"], via_json["session_id"]);
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let app = router(state(4), None);
    let png = RasterImage::new(8, 8, vec![10; 8 * 8 * 3]).unwrap().to_png().unwrap();
    let truncated_png = &png[..png.len() / 2];
    let (status, body) = send(&app, multipart(truncated_png)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().unwrap().contains("image format"));

    // JPEG start-of-image marker followed by garbage.
    let (status, body) = send(&app, multipart(b"\xff\xd8\xff\xe0\x00\x10JFIF")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().unwrap().contains("image format"));

    let req = Request::post("/api/v1/session")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{\"image_base64\": \"***\"}"))
        .unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn no_weights_means_503() {
    let app = router(AppState::new(None, 4), None);
    assert_eq!(send(&app, multipart(&png(1))).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(get(&app, "/api/v1/positional?ref=0").await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (status, health) = get(&app, "/api/v1/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["weights_loaded"], false);
    // Static views still work.
    assert_eq!(get(&app, "/api/v1/model-graph").await.0, StatusCode::OK);
    assert_eq!(get(&app, "/api/v1/layout?seed=1").await.0, StatusCode::OK);
}

#[tokio::test]
async fn query_endpoints() {
    let app = router(state(4), None);
    let s = create(&app, &png(3)).await;
    let id = s["session_id"].as_str().unwrap();

    let (status, probe) = get(&app, &format!("/api/v1/session/{id}/probe?ref=0")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(probe["probs"], s["probs"]);
    assert_eq!(probe["predicted_class"], s["predicted_class"]);

    let (status, sim) = get(&app, &format!("/api/v1/session/{id}/similarity?layer=2&ref=0")).await;
    assert_eq!(status, StatusCode::OK);
    assert!((sim["cls_value"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(sim["raw"].as_array().unwrap().len(), 4);
    assert_eq!(sim["normalized"][3].as_array().unwrap().len(), 4);

    let (_, sim) = get(&app, &format!("/api/v1/session/{id}/similarity?layer=1&ref=6")).await;
    // Token 6 is patch 5: row 1, column 1.
    assert!((sim["raw"][1][1].as_f64().unwrap() - 1.0).abs() < 1e-6);

    let (status, att) = get(&app, &format!("/api/v1/session/{id}/attention?layer=1&head=1&ref=3")).await;
    assert_eq!(status, StatusCode::OK);
    let total: f64 = att["cls_value"].as_f64().unwrap()
        + att["raw"].as_array().unwrap().iter().flat_map(floats).sum::<f64>();
    assert!((total - 1.0).abs() < 1e-5);

    let (status, ch) = get(&app, &format!("/api/v1/session/{id}/channel?layer=0&channel=7")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ch["cls_normalized"].is_number());

    let (status, pos) = get(&app, "/api/v1/positional?ref=4").await;
    assert_eq!(status, StatusCode::OK);
    assert!((pos["raw"][0][3].as_f64().unwrap() - 1.0).abs() < 1e-6);

    let (status, same) = get(&app, &format!("/api/v1/session/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(same, s);
}

#[tokio::test]
async fn index_errors() {
    let app = router(state(4), None);
    let s = create(&app, &png(5)).await;
    let id = s["session_id"].as_str().unwrap();
    for q in [
        format!("/api/v1/session/{id}/similarity?layer=3&ref=0"),
        format!("/api/v1/session/{id}/similarity?layer=0&ref=17"),
        format!("/api/v1/session/{id}/attention?layer=0&head=0&ref=0"),
        format!("/api/v1/session/{id}/attention?layer=1&head=2&ref=0"),
        format!("/api/v1/session/{id}/probe?ref=99"),
        format!("/api/v1/session/{id}/channel?layer=0&channel=8"),
        "/api/v1/positional?ref=17".to_string(),
        "/api/v1/layout?iterations=0".to_string(),
    ] {
        let (status, body) = get(&app, &q).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{q}");
        assert!(body["error"].as_str().unwrap().contains("out of range"), "{q}");
    }
    let (status, _) = get(&app, &format!("/api/v1/session/{id}/similarity?layer=x")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = get(&app, "/api/v1/session/0123/similarity?layer=0&ref=0").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn reads_are_pure_and_concurrent_reads_agree() {
    let app = router(state(4), None);
    let s = create(&app, &png(11)).await;
    let id = s["session_id"].as_str().unwrap().to_string();
    let uris: Vec<String> = vec![
        format!("/api/v1/session/{id}/similarity?layer=1&ref=2"),
        format!("/api/v1/session/{id}/attention?layer=2&head=0&ref=0"),
        format!("/api/v1/session/{id}/probe?ref=5"),
    ];
    let mut first = Vec::new();
    for u in &uris {
        first.push(get(&app, u).await.1);
    }
    let handles: Vec<_> = (0..12)
        .map(|i| {
            let app = app.clone();
            let uri = uris[i % uris.len()].clone();
            tokio::spawn(async move { (i % 3, get(&app, &uri).await.1) })
        })
        .collect();
    for h in handles {
        let (k, v) = h.await.unwrap();
        assert_eq!(v, first[k]);
    }
}

#[tokio::test]
async fn lru_eviction_keeps_live_sessions() {
    let app = router(state(2), None);
    let a = create(&app, &png(1)).await;
    let b = create(&app, &png(2)).await;
    // Touch `a` so `b` becomes least recently used.
    let a_id = a["session_id"].as_str().unwrap();
    assert_eq!(get(&app, &format!("/api/v1/session/{a_id}")).await.0, StatusCode::OK);
    let c = create(&app, &png(3)).await;

    let b_id = b["session_id"].as_str().unwrap();
    assert_eq!(get(&app, &format!("/api/v1/session/{b_id}/probe?ref=0")).await.0, StatusCode::NOT_FOUND);
    for s in [&a, &c] {
        let id = s["session_id"].as_str().unwrap();
        let (status, probe) = get(&app, &format!("/api/v1/session/{id}/probe?ref=0")).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(probe["probs"], s["probs"]);
    }
    let (_, health) = get(&app, "/api/v1/health").await;
    assert_eq!((health["sessions"].as_u64(), health["capacity"].as_u64()), (Some(2), Some(2)));
}

#[tokio::test]
async fn source_image_round_trips() {
    let app = router(state(4), None);
    let image = png(13);
    let s = create(&app, &image).await;
    let id = s["session_id"].as_str().unwrap();
    let req = Request::get(format!("/api/v1/session/{id}/image")).body(Body::empty()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.headers()[header::CONTENT_TYPE], "image/png");
    let body = res.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(RasterImage::decode(&body).unwrap(), RasterImage::decode(&image).unwrap());
}

#[tokio::test]
async fn static_graphs_and_layout() {
    let app = router(state(4), None);
    let (_, graph) = get(&app, "/api/v1/model-graph").await;
    assert_eq!(graph["root"]["children"][1]["children"].as_array().unwrap().len(), 2);
    assert_eq!(graph["config"]["image_h"], 16);

    let (_, kg) = get(&app, "/api/v1/knowledge-graph").await;
    assert!(kg["nodes"].as_array().unwrap().len() >= 10);

    let (s1, a) = send(&app, Request::get("/api/v1/layout?seed=9").body(Body::empty()).unwrap()).await;
    let (_, b) = send(&app, Request::get("/api/v1/layout?seed=9").body(Body::empty()).unwrap()).await;
    let (_, c) = send(&app, Request::get("/api/v1/layout?seed=10").body(Body::empty()).unwrap()).await;
    assert_eq!(s1, StatusCode::OK);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let layout: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(layout["iterations"], 300);
    assert_eq!(layout["nodes"].as_array().unwrap().len(), kg["nodes"].as_array().unwrap().len());
}

#[tokio::test]
async fn serves_static_bundle() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>ui</h1>").unwrap();
    let app = router(state(4), Some(dir.path()));
    let (status, body) = send(&app, Request::get("/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<h1>ui</h1>");
    let (status, _) = send(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(get(&app, "/api/v1/health").await.0, StatusCode::OK);
}
