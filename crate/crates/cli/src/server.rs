//! HTTP API for the annotation UI. Reads share a lock; label writes take it exclusively, so
//! they serialize through the one in-memory manifest and its per-group revisions.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use glyphforge_core::dataset::{Dataset, LabelDiagnostic, LabelError};
use glyphforge_core::glyphkit::{compose_ground_truth, CanvasImage, Rect, RegionAnnotation};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub type Shared = Arc<RwLock<Dataset>>;

pub fn router(dataset: Dataset) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/groups", get(list_groups))
        .route("/api/groups/{id}", get(get_group))
        .route("/api/groups/{id}/labels", post(post_labels))
        .route("/api/images/{*path}", get(get_image))
        .route("/api/conditions/{id}/reference", get(get_reference))
        .with_state(Arc::new(RwLock::new(dataset)))
}

/// Binds `addr`, prints the bound address on stdout, and serves until the process ends.
pub async fn serve(dataset: Dataset, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(dataset)).await?;
    Ok(())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn internal(e: impl std::fmt::Display) -> Response {
    error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn health(State(ds): State<Shared>) -> Response {
    let ds = ds.read().expect("dataset lock");
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "charset_version": ds.manifest.charset_version,
        "groups": ds.manifest.groups.len(),
    }))
    .into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupSummary {
    pub id: String,
    pub condition_id: String,
    pub source: glyphforge_core::glyphkit::GroupSource,
    pub images: usize,
    pub incorrect_rects: usize,
    pub revision: u64,
}

async fn list_groups(State(ds): State<Shared>) -> Response {
    let ds = ds.read().expect("dataset lock");
    let out: Vec<GroupSummary> = ds
        .manifest
        .groups
        .iter()
        .map(|g| GroupSummary {
            id: g.id.clone(),
            condition_id: g.condition_id.clone(),
            source: g.source,
            images: g.images.len(),
            incorrect_rects: g
                .annotations
                .iter()
                .flatten()
                .map(|a| a.incorrect_rects.len())
                .sum(),
            revision: g.revision,
        })
        .collect();
    Json(out).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub url: String,
}

async fn get_group(State(ds): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    let ds = ds.read().expect("dataset lock");
    let Some(g) = ds.manifest.group(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no group {id}"));
    };
    let condition = ds
        .manifest
        .condition(&g.condition_id)
        .map(|c| c.condition());
    let images: Vec<ImageRef> = g
        .images
        .iter()
        .map(|p| ImageRef {
            path: p.clone(),
            url: format!("/api/images/{p}"),
        })
        .collect();
    Json(json!({
        "id": g.id,
        "condition_id": g.condition_id,
        "condition": condition,
        "source": g.source,
        "images": images,
        "annotations": g.annotations,
        "revision": g.revision,
    }))
    .into_response()
}

pub fn png_bytes(img: &CanvasImage) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        let px: Vec<u8> = img
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_image_data(&px)?;
    }
    Ok(out)
}

async fn get_image(State(ds): State<Shared>, UrlPath(path): UrlPath<String>) -> Response {
    let ds = ds.read().expect("dataset lock");
    let referenced = ds.manifest.groups.iter().flat_map(|g| &g.images).chain(
        ds.manifest
            .conditions
            .iter()
            .filter_map(|c| c.image.as_ref()),
    );
    if !referenced.into_iter().any(|p| *p == path) {
        return error(StatusCode::NOT_FOUND, format!("no image {path}"));
    }
    let img = match ds.read_image(&path) {
        Ok(img) => img,
        Err(e) => return internal(e),
    };
    match png_bytes(&img) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => internal(e),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReferenceBlock {
    pub index: usize,
    pub text: String,
    pub bbox: Rect,
    pub cells: Vec<Rect>,
}

async fn get_reference(State(ds): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    let ds = ds.read().expect("dataset lock");
    let Some(entry) = ds.manifest.condition(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no condition {id}"));
    };
    let c = entry.condition();
    let (w, h) = (ds.manifest.width, ds.manifest.height);
    let png = match compose_ground_truth(&c, w, h)
        .map_err(|e| e.to_string())
        .and_then(|img| png_bytes(&img).map_err(|e| e.to_string()))
    {
        Ok(p) => p,
        Err(e) => return internal(e),
    };
    let blocks: Vec<ReferenceBlock> = c
        .blocks
        .iter()
        .enumerate()
        .map(|(index, b)| ReferenceBlock {
            index,
            text: b.text.clone(),
            bbox: b.bbox,
            cells: b.cell_rects(),
        })
        .collect();
    Json(json!({
        "id": entry.id,
        "prompt_id": c.prompt_id,
        "width": w,
        "height": h,
        "image": format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png)),
        "blocks": blocks,
    }))
    .into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub revision: u64,
    pub annotations: Vec<Vec<RegionAnnotation>>,
    #[serde(default)]
    pub actor: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelConflict {
    pub error: String,
    pub current_revision: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRejection {
    pub error: String,
    pub diagnostics: Vec<LabelDiagnostic>,
}

pub fn timestamp_now() -> String {
    humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()
}

async fn post_labels(
    State(ds): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Json<LabelSubmission>,
) -> Response {
    let Json(sub) = body;
    let mut ds = ds.write().expect("dataset lock");
    let actor = sub.actor.as_deref().unwrap_or("annotator");
    match ds.submit_labels(&id, sub.revision, &sub.annotations, actor, &timestamp_now()) {
        Ok(Ok(new_revision)) => Json(json!({ "new_revision": new_revision })).into_response(),
        Ok(Err(LabelError::UnknownGroup(g))) => {
            error(StatusCode::NOT_FOUND, format!("no group {g}"))
        }
        Ok(Err(LabelError::Conflict { current })) => (
            StatusCode::CONFLICT,
            Json(LabelConflict {
                error: format!("revision {} is stale", sub.revision),
                current_revision: current,
            }),
        )
            .into_response(),
        Ok(Err(LabelError::Invalid(diagnostics))) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(LabelRejection {
                error: "invalid annotations".into(),
                diagnostics,
            }),
        )
            .into_response(),
        Err(e) => internal(e),
    }
}
