use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use nisp_cli::commands::PREVIEW_TEXT_KEY;
use nisp_cli::server::{router, AppState, ImageListEntry};
use nisp_core::imaging::io::decode_png;
use nisp_core::imaging::PREVIEW_PIPELINE_VERSION;
use nisp_core::train::AnnotationRecord;
use nisp_testkit::criteria::known_patch_illuminant;
use nisp_testkit::gen::write_known_patch;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(root: &Path) -> Router {
    router(AppState::new(root, Arc::new(|| 1_700_000_000)), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<(String, String)>, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp
        .headers()
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_str().unwrap_or("").to_string()))
        .collect();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

fn header<'a>(h: &'a [(String, String)], k: &str) -> Option<&'a str> {
    h.iter().find(|(n, _)| n == k).map(|(_, v)| v.as_str())
}

fn setup() -> (tempfile::TempDir, Router) {
    let dir = tempfile::tempdir().unwrap();
    write_known_patch(dir.path(), "patch");
    write_known_patch(dir.path(), "other");
    let app = app(dir.path());
    (dir, app)
}

fn rect_body() -> Value {
    json!({ "rect": { "x": 9, "y": 9, "w": 14, "h": 6 }, "annotator": "ana" })
}

#[tokio::test]
async fn post_known_patch_gives_normalized_mean() {
    let (dir, app) = setup();
    let (st, h, body) = call(&app, "POST", "/api/images/patch/annotation", Some(rect_body())).await;
    assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(header(&h, "content-type"), Some("application/json"));
    let rec = AnnotationRecord::decode(&body).unwrap();
    let want = known_patch_illuminant().rgb();
    for c in 0..3 {
        assert!((rec.illuminant[c] - want[c]).abs() <= 1e-6, "{:?}", rec.illuminant);
    }
    assert!((rec.illuminant[0] - 1.0 / 3.0).abs() <= 1e-6 && (rec.illuminant[1] - 2.0 / 3.0).abs() <= 1e-6);
    assert_eq!((rec.image_id.as_str(), rec.annotator.as_str(), rec.timestamp, rec.version), ("patch", "ana", 1_700_000_000, 1));
    // persisted bytes are what was returned
    assert_eq!(std::fs::read(dir.path().join("annotations/patch.json")).unwrap(), body);
}

#[tokio::test]
async fn post_then_get_is_byte_identical_and_versions_increment() {
    let (dir, app) = setup();
    let (_, _, first) = call(&app, "POST", "/api/images/patch/annotation", Some(rect_body())).await;
    let (st, _, got) = call(&app, "GET", "/api/images/patch/annotation", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(got, first);
    let body = json!({ "rect": { "x": 10, "y": 9, "w": 4, "h": 4 } });
    let (_, _, second) = call(&app, "POST", "/api/images/patch/annotation", Some(body)).await;
    let rec = AnnotationRecord::decode(&second).unwrap();
    assert_eq!(rec.version, 2);
    assert_eq!(rec.annotator, "anonymous");
    let (_, _, got) = call(&app, "GET", "/api/images/patch/annotation", None).await;
    assert_eq!(got, second);
    // a fresh server continues the counter from disk
    let (_, _, third) = call(&self::app(dir.path()), "POST", "/api/images/patch/annotation", Some(rect_body())).await;
    assert_eq!(AnnotationRecord::decode(&third).unwrap().version, 3);
    let names: Vec<String> = std::fs::read_dir(dir.path().join("annotations"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["patch.json"], "no temp files left behind");
}

#[tokio::test]
async fn client_supplied_illuminant_is_ignored() {
    let (_dir, app) = setup();
    let mut body = rect_body();
    body["illuminant"] = json!([1.0, 0.0, 0.0]);
    let (_, _, bytes) = call(&app, "POST", "/api/images/patch/annotation", Some(body)).await;
    let rec = AnnotationRecord::decode(&bytes).unwrap();
    assert!((rec.illuminant[1] - 2.0 / 3.0).abs() <= 1e-6);
}

#[tokio::test]
async fn unknown_id_is_404_json() {
    let (_dir, app) = setup();
    for (m, uri) in [
        ("GET", "/api/images/nope/preview"),
        ("GET", "/api/images/nope/annotation"),
        ("POST", "/api/images/nope/annotation"),
        ("GET", "/api/images/nope/wb-preview?rect=0,0,4,4"),
        ("GET", "/api/images/..%2Fraw%2Fpatch/preview"),
        ("GET", "/api/nothing"),
    ] {
        let body = (m == "POST").then(rect_body);
        let (st, h, bytes) = call(&app, m, uri, body).await;
        assert_eq!(st, StatusCode::NOT_FOUND, "{m} {uri}");
        assert_eq!(header(&h, "content-type"), Some("application/json"));
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        assert!(v["error"].is_string(), "{v}");
    }
    // known image without an annotation
    let (st, _, _) = call(&app, "GET", "/api/images/patch/annotation", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_rect_is_422_with_field_errors() {
    let (dir, app) = setup();
    let cases = [
        (json!({ "rect": { "x": 0, "y": 0, "w": 3, "h": 2 } }), vec!["w", "h"]),
        (json!({ "rect": { "x": 30, "y": 0, "w": 4, "h": 4 } }), vec!["x"]),
        (json!({ "rect": { "x": 0, "y": 22, "w": 4, "h": 4 } }), vec!["y"]),
        (json!({ "rect": { "x": -1, "y": 0, "w": 4 } }), vec!["x", "h"]),
        (json!({ "rect": { "x": 0, "y": 0, "w": 4, "h": 4 }, "annotator": 7 }), vec!["annotator"]),
        (json!({}), vec!["x", "y", "w", "h"]),
    ];
    for (body, fields) in cases {
        let (st, _, bytes) = call(&app, "POST", "/api/images/patch/annotation", Some(body.clone())).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        assert!(v["error"].is_string());
        let mut got: Vec<&str> = v["fields"].as_object().unwrap().keys().map(String::as_str).collect();
        got.sort();
        let mut want = fields.clone();
        want.sort();
        assert_eq!(got, want, "{body} -> {v}");
    }
    let req = Request::builder()
        .method("POST")
        .uri("/api/images/patch/annotation")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::UNPROCESSABLE_ENTITY);
    for q in ["", "?rect=1,2,3", "?rect=0,0,2,2", "?rect=0,0,40,4"] {
        let (st, _, _) = call(&app, "GET", &format!("/api/images/patch/wb-preview{q}"), None).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{q}");
    }
    assert!(!dir.path().join("annotations").exists());
}

#[tokio::test]
async fn listing_previews_and_wb_preview() {
    let (_dir, app) = setup();
    let (st, _, bytes) = call(&app, "GET", "/api/images", None).await;
    assert_eq!(st, StatusCode::OK);
    let list: Vec<ImageListEntry> = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0], ImageListEntry { image_id: "other".into(), annotated: false, thumbnail_url: "/api/images/other/preview".into() });
    call(&app, "POST", "/api/images/patch/annotation", Some(rect_body())).await;
    let (_, _, bytes) = call(&app, "GET", "/api/images", None).await;
    let list: Vec<ImageListEntry> = serde_json::from_slice(&bytes).unwrap();
    assert!(list[1].annotated && !list[0].annotated);

    let (st, h, png) = call(&app, "GET", "/api/images/patch/preview", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(header(&h, "content-type"), Some("image/png"));
    let p = decode_png(&png).unwrap();
    assert_eq!((p.image.width, p.image.height), (32, 24));
    assert!(p.text.contains(&(PREVIEW_TEXT_KEY.into(), PREVIEW_PIPELINE_VERSION.into())));

    let (st, h, png) = call(&app, "GET", "/api/images/patch/wb-preview?rect=9,9,14,6", None).await;
    assert_eq!(st, StatusCode::OK);
    let echoed: Vec<f64> = header(&h, "x-illuminant").unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let (_, _, rec) = call(&app, "GET", "/api/images/patch/annotation", None).await;
    assert_eq!(echoed, AnnotationRecord::decode(&rec).unwrap().illuminant.to_vec());
    // the chosen patch is neutral after re-balancing
    let img = decode_png(&png).unwrap().image;
    for y in 9..15 {
        for x in 9..23 {
            let i = y * img.width + x;
            let (r, g, b) = (img.planes[0][i] as i32, img.planes[1][i] as i32, img.planes[2][i] as i32);
            assert!((r - g).abs() <= 1 && (b - g).abs() <= 1, "({r},{g},{b}) at {x},{y}");
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_are_serialized() {
    let (dir, app) = setup();
    let mut handles = Vec::new();
    for i in 0..8 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let body = json!({ "rect": { "x": 9, "y": 9, "w": 4 + i, "h": 4 }, "annotator": format!("a{i}") });
            let (st, _, bytes) = call(&app, "POST", "/api/images/patch/annotation", Some(body)).await;
            assert_eq!(st, StatusCode::OK);
            AnnotationRecord::decode(&bytes).unwrap().version
        }));
    }
    let mut versions = Vec::new();
    for h in handles {
        versions.push(h.await.unwrap());
    }
    versions.sort();
    assert_eq!(versions, (1..=8).collect::<Vec<u64>>());
    let (_, _, last) = call(&app, "GET", "/api/images/patch/annotation", None).await;
    assert_eq!(AnnotationRecord::decode(&last).unwrap().version, 8);
    assert_eq!(std::fs::read_dir(dir.path().join("annotations")).unwrap().count(), 1);
}

#[tokio::test]
async fn static_files_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    write_known_patch(dir.path(), "patch");
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<!doctype html><title>annotate</title>").unwrap();
    let app = router(AppState::new(dir.path(), Arc::new(|| 0)), Some(&ui));
    let (st, _, body) = call(&app, "GET", "/", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("annotate"));
    let (st, _, _) = call(&app, "GET", "/api/images", None).await;
    assert_eq!(st, StatusCode::OK);
}
