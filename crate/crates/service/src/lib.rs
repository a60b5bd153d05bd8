//! HTTP endpoints around a loaded [`Translator`].
//!
//! `POST /translate` takes a multipart form with fields `image` (PNG or JPEG
//! bytes), `annotation` (a shape such as `{"triangle": {...}}` or a full
//! annotation record), `category`, and optional `return_mask` and `rolling`
//! flags. It answers with the composite as `image/png`, or a
//! `multipart/form-data` body with `image` and `mask` parts when a mask was
//! requested. Wall time of the model call is reported in `x-inference-ms`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::Device;
use deltagan::condmap::ShapeAnnotation;
use deltagan::imaging::{encode_png, ColorImage};
use deltagan::inference::Translator;
use deltagan::Error;
use serde::Serialize;

pub const DEFAULT_MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;
pub const INFERENCE_HEADER: &str = "x-inference-ms";

/// Extra room for the non-image form fields and multipart framing.
const FORM_OVERHEAD: usize = 256 * 1024;

#[derive(Debug, Clone, clap::Args)]
pub struct ServeArgs {
    /// Model archive to load at startup.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Largest accepted upload for the `image` field.
    #[arg(long, default_value_t = DEFAULT_MAX_IMAGE_BYTES)]
    pub max_image_bytes: usize,
}

pub struct AppState {
    model: OnceLock<Arc<Translator>>,
    max_image_bytes: usize,
    translations: AtomicU64,
}

impl AppState {
    pub fn new(max_image_bytes: usize) -> Self {
        Self {
            model: OnceLock::new(),
            max_image_bytes,
            translations: AtomicU64::new(0),
        }
    }

    /// Makes `model` available to requests; later calls are ignored.
    pub fn install(&self, model: Translator) {
        let _ = self.model.set(Arc::new(model));
    }

    pub fn is_ready(&self) -> bool {
        self.model.get().is_some()
    }

    pub fn translations(&self) -> u64 {
        self.translations.load(Ordering::Relaxed)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.max_image_bytes.saturating_add(FORM_OVERHEAD);
    Router::new()
        .route("/translate", post(translate))
        .route("/categories", get(categories))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn not_loaded() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "model not loaded")
}

#[derive(Debug, Serialize)]
struct CategoryEntry<'a> {
    index: usize,
    name: &'a str,
}

async fn categories(State(state): State<Arc<AppState>>) -> Response {
    let Some(model) = state.model.get() else { return not_loaded() };
    let list: Vec<_> = model
        .categories()
        .iter()
        .enumerate()
        .map(|(index, name)| CategoryEntry { index, name })
        .collect();
    Json(list).into_response()
}

#[derive(Debug, Serialize)]
struct Health<'a> {
    status: &'a str,
    checkpoint_id: &'a str,
    translations: u64,
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let Some(model) = state.model.get() else {
        return (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health { status: "loading", checkpoint_id: "", translations: 0 }),
        )
            .into_response();
    };
    Json(Health {
        status: "ready",
        checkpoint_id: model.checkpoint_id(),
        translations: state.translations(),
    })
    .into_response()
}

struct TranslateRequest {
    image: Vec<u8>,
    annotation: ShapeAnnotation,
    category: usize,
    return_mask: bool,
    rolling: bool,
}

fn parse_flag(name: &str, text: &str) -> Result<bool, String> {
    match text.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(format!("`{name}` must be a boolean, got `{other}`")),
    }
}

async fn read_request(multipart: &mut Multipart, max_image_bytes: usize) -> Result<TranslateRequest, Response> {
    let mut image = None;
    let mut annotation = None;
    let mut category = None;
    let mut return_mask = false;
    let mut rolling = true;
    let bad = |m: String| error(StatusCode::BAD_REQUEST, m);
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(error(e.status(), e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| error(e.status(), e.body_text()))?;
        let text = || std::str::from_utf8(&data).map_err(|_| bad(format!("`{name}` is not UTF-8")));
        match name.as_str() {
            "image" => {
                if data.len() > max_image_bytes {
                    return Err(error(
                        StatusCode::PAYLOAD_TOO_LARGE,
                        format!("image is {} bytes, limit is {max_image_bytes}", data.len()),
                    ));
                }
                image = Some(data.to_vec());
            }
            "annotation" => {
                let shape = ShapeAnnotation::parse(text()?).map_err(|e| bad(e.to_string()))?;
                annotation = Some(shape);
            }
            "category" => {
                let c = text()?.trim().parse::<usize>().map_err(|_| bad("`category` must be a non-negative integer".into()))?;
                category = Some(c);
            }
            "return_mask" => return_mask = parse_flag(&name, text()?).map_err(bad)?,
            "rolling" => rolling = parse_flag(&name, text()?).map_err(bad)?,
            other => return Err(bad(format!("unknown field `{other}`"))),
        }
    }
    Ok(TranslateRequest {
        image: image.ok_or_else(|| bad("missing `image` field".into()))?,
        annotation: annotation.ok_or_else(|| bad("missing `annotation` field".into()))?,
        category: category.ok_or_else(|| bad("missing `category` field".into()))?,
        return_mask,
        rolling,
    })
}

struct Rendered {
    image: Vec<u8>,
    mask: Option<Vec<u8>>,
    millis: f64,
}

fn run_model(model: &Translator, req: &TranslateRequest) -> Result<Rendered, Response> {
    let source = ColorImage::decode(&req.image).map_err(|e| error(StatusCode::BAD_REQUEST, format!("cannot decode image: {e}")))?;
    let start = Instant::now();
    let out = model
        .translate(&source, &req.annotation, req.category, req.rolling)
        .map_err(|e| match e {
            Error::InvalidCategory { .. } | Error::InvalidAnnotation(_) | Error::DegenerateAnnotation(_) => {
                error(StatusCode::BAD_REQUEST, e.to_string())
            }
            other => error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
    let millis = start.elapsed().as_secs_f64() * 1e3;
    let internal = |e: Error| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let image = out.image.to_png_bytes().map_err(internal)?;
    let mask = if req.return_mask { Some(encode_png(&out.mask).map_err(internal)?) } else { None };
    Ok(Rendered { image, mask, millis })
}

/// A boundary string that occurs in neither payload.
fn boundary_for(parts: &[&[u8]]) -> String {
    (0u32..)
        .map(|i| format!("deltagan-part-{i}"))
        .find(|b| !parts.iter().any(|p| p.windows(b.len()).any(|w| w == b.as_bytes())))
        .expect("some boundary is free")
}

pub fn multipart_body(parts: &[(&str, &[u8])]) -> (String, Vec<u8>) {
    let boundary = boundary_for(&parts.iter().map(|p| p.1).collect::<Vec<_>>());
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}.png\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

async fn translate(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> Response {
    let Some(model) = state.model.get().cloned() else { return not_loaded() };
    let req = match read_request(&mut multipart, state.max_image_bytes).await {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let rendered = match tokio::task::spawn_blocking(move || run_model(&model, &req)).await {
        Ok(Ok(r)) => r,
        Ok(Err(resp)) => return resp,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")),
    };
    state.translations.fetch_add(1, Ordering::Relaxed);
    let timing = HeaderValue::from_str(&format!("{:.3}", rendered.millis)).expect("ascii number");
    let (content_type, body) = match &rendered.mask {
        None => ("image/png".to_string(), rendered.image),
        Some(mask) => multipart_body(&[("image", &rendered.image), ("mask", mask)]),
    };
    let mut resp = (StatusCode::OK, body).into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_str(&content_type).expect("ascii content type"));
    headers.insert(INFERENCE_HEADER, timing);
    resp
}

/// Binds the listener, loads the checkpoint in the background (requests
/// get 503 until it is ready) and serves until the process exits.
pub async fn serve(args: ServeArgs) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(args.max_image_bytes));
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, checkpoint = %args.checkpoint.display(), "listening");
    let loader = state.clone();
    let path = args.checkpoint.clone();
    tokio::task::spawn_blocking(move || match Translator::load(&path, &Device::Cpu) {
        Ok(model) => {
            tracing::info!(checkpoint_id = model.checkpoint_id(), categories = model.n_categories(), "model ready");
            loader.install(model);
        }
        Err(e) => tracing::error!(error = %e, "failed to load checkpoint"),
    });
    axum::serve(listener, router(state)).await
}
