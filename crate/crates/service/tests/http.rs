use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use candle_core::Device;
use deltagan::checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
use deltagan::generator::{Generator, GeneratorConfig};
use deltagan::imaging::ColorImage;
use deltagan::inference::Translator;
use deltagan_service::{router, AppState, INFERENCE_HEADER};
use tower::ServiceExt;

const BOUNDARY: &str = "test-form-boundary";
const TRIANGLE: &str = r#"{"triangle":{"vertices":[[4,3],[26,6],[10,17]],"base":1}}"#;

fn translator(n_c: usize) -> Translator {
    let dev = Device::Cpu;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        generator: GeneratorConfig::new(16, 16, n_c).slimmed(16),
        discriminator: None,
        epoch: 3,
        categories: (0..n_c).map(|i| format!("g{i}")).collect(),
    };
    let g = Generator::new(header.generator.clone(), 9, &dev).unwrap();
    Translator::from_checkpoint(&Checkpoint::capture(header, &g, None).unwrap(), &dev).unwrap()
}

fn app(n_c: usize, max_image_bytes: usize) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(max_image_bytes));
    state.install(translator(n_c));
    (router(state.clone()), state)
}

fn source_png() -> Vec<u8> {
    let mut img = ColorImage::filled(20, 30, [0.1, -0.3, 0.5]);
    for y in 0..20 {
        img.set(0, y, y, 0.9);
    }
    img.to_png_bytes().unwrap()
}

fn form(fields: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"").as_bytes());
        if *name == "image" {
            body.extend_from_slice(b"; filename=\"src.png\"\r\nContent-Type: image/png");
        }
        body.extend_from_slice(b"\r\n\r\n");
        body.extend_from_slice(value);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

fn translate_request(fields: &[(&str, &[u8])]) -> Request<Body> {
    Request::post("/translate")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(form(fields)))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, headers, body)
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

#[tokio::test]
async fn endpoints_answer_503_before_load() {
    let state = Arc::new(AppState::new(1 << 20));
    let app = router(state);
    assert_eq!(send(&app, get("/health")).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(send(&app, get("/categories")).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let png = source_png();
    let req = translate_request(&[("image", &png), ("annotation", TRIANGLE.as_bytes()), ("category", b"0")]);
    assert_eq!(send(&app, req).await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn categories_and_health_reflect_the_checkpoint() {
    let (app, _) = app(10, 1 << 20);
    let (status, _, body) = send(&app, get("/categories")).await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<serde_json::Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 10);
    assert_eq!(list[3], serde_json::json!({"index": 3, "name": "g3"}));

    let (status, _, body) = send(&app, get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    let health: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(health["status"], "ready");
    assert_eq!(health["checkpoint_id"].as_str().unwrap().len(), 16);
}

#[tokio::test]
async fn translate_returns_source_sized_png_deterministically() {
    let (app, state) = app(3, 1 << 20);
    let png = source_png();
    let fields: [(&str, &[u8]); 3] = [("image", &png), ("annotation", TRIANGLE.as_bytes()), ("category", b"2")];
    let (status, headers, first) = send(&app, translate_request(&fields)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&first));
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    let ms: f64 = headers[INFERENCE_HEADER].to_str().unwrap().parse().unwrap();
    assert!(ms >= 0.0);
    let out = ColorImage::decode(&first).unwrap();
    assert_eq!((out.height(), out.width()), (20, 30));

    let (_, _, second) = send(&app, translate_request(&fields)).await;
    assert_eq!(first, second);
    assert_eq!(state.translations(), 2);
}

#[tokio::test]
async fn concurrent_identical_requests_match() {
    let (app, _) = app(3, 1 << 20);
    let png = source_png();
    let fields: [(&str, &[u8]); 4] =
        [("image", &png), ("annotation", TRIANGLE.as_bytes()), ("category", b"1"), ("rolling", b"false")];
    let (a, b, c) = tokio::join!(
        send(&app, translate_request(&fields)),
        send(&app, translate_request(&fields)),
        send(&app, translate_request(&fields))
    );
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.2, b.2);
    assert_eq!(b.2, c.2);
}

#[tokio::test]
async fn mask_is_returned_as_second_part() {
    let (app, _) = app(3, 1 << 20);
    let png = source_png();
    let fields: [(&str, &[u8]); 4] =
        [("image", &png), ("annotation", TRIANGLE.as_bytes()), ("category", b"0"), ("return_mask", b"true")];
    let (status, headers, body) = send(&app, translate_request(&fields)).await;
    assert_eq!(status, StatusCode::OK);
    let ct = headers[header::CONTENT_TYPE].to_str().unwrap();
    let boundary = ct.strip_prefix("multipart/form-data; boundary=").unwrap();
    let delimiter = format!("--{boundary}");
    let text = body.clone();
    let mut parts = Vec::new();
    let mut rest = &text[..];
    while let Some(start) = find(rest, delimiter.as_bytes()) {
        rest = &rest[start + delimiter.len()..];
        if rest.starts_with(b"--") {
            break;
        }
        let header_end = find(rest, b"\r\n\r\n").unwrap() + 4;
        let end = find(rest, delimiter.as_bytes()).unwrap();
        parts.push((String::from_utf8_lossy(&rest[..header_end]).into_owned(), rest[header_end..end - 2].to_vec()));
    }
    assert_eq!(parts.len(), 2);
    assert!(parts[0].0.contains("name=\"image\"") && parts[1].0.contains("name=\"mask\""));
    let mask = image_dims(&parts[1].1);
    assert_eq!(mask, (30, 20));
    assert_eq!(ColorImage::decode(&parts[0].1).unwrap().width(), 30);
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn image_dims(png: &[u8]) -> (u32, u32) {
    let img = ColorImage::decode(png).unwrap();
    (img.width() as u32, img.height() as u32)
}

#[tokio::test]
async fn full_annotation_records_are_accepted() {
    let (app, _) = app(3, 1 << 20);
    let png = source_png();
    let record = r#"{"image":"images/a.png","category":1,"subject":"s0","triangle":{"vertices":[[4,3],[26,6],[10,17]],"base":1}}"#;
    let fields: [(&str, &[u8]); 3] = [("image", &png), ("annotation", record.as_bytes()), ("category", b"1")];
    assert_eq!(send(&app, translate_request(&fields)).await.0, StatusCode::OK);
}

#[tokio::test]
async fn client_errors_map_to_400_and_413() {
    let (app, _) = app(3, 1 << 20);
    let png = source_png();
    let cases: Vec<Vec<(&str, &[u8])>> = vec![
        vec![("image", &png), ("annotation", TRIANGLE.as_bytes()), ("category", b"3")],
        vec![("image", &png), ("annotation", br#"{"triangle":{"vertices":[[0,0],[5,5],[10,10]],"base":0}}"#), ("category", b"0")],
        vec![("image", &png), ("annotation", b"not json"), ("category", b"0")],
        vec![("image", b"not an image"), ("annotation", TRIANGLE.as_bytes()), ("category", b"0")],
        vec![("annotation", TRIANGLE.as_bytes()), ("category", b"0")],
        vec![("image", &png), ("annotation", TRIANGLE.as_bytes()), ("category", b"-1")],
        vec![("image", &png), ("annotation", TRIANGLE.as_bytes()), ("category", b"0"), ("colour", b"x")],
    ];
    for fields in cases {
        let (status, _, body) = send(&app, translate_request(&fields)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{}", String::from_utf8_lossy(&body));
        let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(err["error"].is_string());
    }

    let (small, _) = self::app(3, 64);
    let fields: [(&str, &[u8]); 3] = [("image", &png), ("annotation", TRIANGLE.as_bytes()), ("category", b"0")];
    assert_eq!(send(&small, translate_request(&fields)).await.0, StatusCode::PAYLOAD_TOO_LARGE);
    let huge = vec![0u8; 2 << 20];
    let fields: [(&str, &[u8]); 3] = [("image", &huge), ("annotation", TRIANGLE.as_bytes()), ("category", b"0")];
    assert_eq!(send(&small, translate_request(&fields)).await.0, StatusCode::PAYLOAD_TOO_LARGE);
}
