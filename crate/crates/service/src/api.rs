use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::Json;
use inpaintkit_core::io::{decode_mask_png, decode_png, RleMask};
use inpaintkit_core::scenegen::ManifestEntry;
use inpaintkit_core::vocab::{AttributeCategory, ObjectCategory, SceneTag};
use inpaintkit_core::{MaskBuffer, SizeBucket};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Result, ServiceError};
use crate::job::{EditJob, EditParams, EditRequest};
use crate::AppState;

type AppRef = State<Arc<AppState>>;

/// Decodes a mask sent as 1-bit PNG or RLE-JSON.
pub fn decode_mask(bytes: &[u8]) -> inpaintkit_core::Result<MaskBuffer> {
    if bytes.first() == Some(&b'{') {
        let rle: RleMask = serde_json::from_slice(bytes)?;
        return rle.decode();
    }
    decode_mask_png(bytes)
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ServiceError {
    let status = e.status();
    let reason = if status == StatusCode::PAYLOAD_TOO_LARGE {
        "payload_too_large"
    } else {
        "bad_multipart"
    };
    ServiceError::Request {
        status,
        reason,
        message: e.body_text(),
    }
}

pub async fn submit_edit(
    State(state): AppRef,
    multipart: std::result::Result<Multipart, MultipartRejection>,
) -> Result<impl IntoResponse> {
    let mut multipart =
        multipart.map_err(|e| ServiceError::bad_request("bad_multipart", e.body_text()))?;
    let mut parts: HashMap<String, Vec<u8>> = HashMap::new();
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        if !["image", "mask", "prompt", "params"].contains(&name.as_str()) {
            return Err(ServiceError::bad_request("unknown_field", format!("unexpected part {name:?}")));
        }
        let bytes = field.bytes().await.map_err(multipart_error)?;
        parts.insert(name, bytes.to_vec());
    }
    let take = |name: &'static str| {
        parts
            .get(name)
            .ok_or_else(|| ServiceError::bad_request("missing_field", format!("missing part {name:?}")))
    };
    let image_bytes = take("image")?;
    let mask_bytes = take("mask")?;
    let image = decode_png(image_bytes).map_err(|e| ServiceError::bad_request("bad_png", format!("image: {e}")))?;
    let mask = decode_mask(mask_bytes).map_err(|e| ServiceError::bad_request("bad_png", format!("mask: {e}")))?;
    let params: EditParams = match parts.get("params") {
        Some(b) => serde_json::from_slice(b).map_err(|e| ServiceError::bad_request("invalid_params", e.to_string()))?,
        None => EditParams::default(),
    };
    params.validate()?;
    let prompt = match parts.get("prompt") {
        Some(b) => String::from_utf8(b.clone())
            .map_err(|_| ServiceError::bad_request("invalid_params", "prompt is not UTF-8"))?
            .trim()
            .to_string(),
        None => String::new(),
    };
    if prompt.is_empty() && !params.unconditional {
        return Err(ServiceError::bad_request("empty_prompt", "prompt is required unless unconditional is set"));
    }
    if image.shape() != mask.shape() {
        return Err(ServiceError::bad_request(
            "shape_mismatch",
            format!("image is {:?}, mask is {:?}", image.shape(), mask.shape()),
        ));
    }
    if let Some(shape) = state.backend.input_shape(params.model.as_deref()) {
        if image.shape() != shape {
            return Err(ServiceError::bad_request(
                "unsupported_shape",
                format!("model expects {shape:?}, got {:?}", image.shape()),
            ));
        }
    }
    let request = EditRequest {
        image: state.blobs.put(image_bytes)?,
        mask: state.blobs.put(mask_bytes)?,
        prompt,
        params,
    };
    let id = state.jobs.create(&request)?;
    state
        .queue
        .send(id.clone())
        .map_err(|_| ServiceError::State("job queue is closed".into()))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))))
}

pub async fn get_edit(State(state): AppRef, Path(id): Path<String>) -> Result<Json<EditJob>> {
    Ok(Json(state.jobs.get(&id)?))
}

pub async fn get_blob(State(state): AppRef, Path(hash): Path<String>) -> Result<impl IntoResponse> {
    let bytes = state.blobs.get(&hash)?;
    let kind = if bytes.starts_with(b"\x89PNG") {
        "image/png"
    } else {
        "application/octet-stream"
    };
    Ok(([(header::CONTENT_TYPE, kind)], bytes))
}

pub const DEFAULT_PER_PAGE: usize = 50;
pub const MAX_PER_PAGE: usize = 500;

#[derive(Serialize)]
pub struct ItemPage {
    pub items: Vec<ManifestEntry>,
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
    pub next_page: Option<usize>,
}

fn category_matches(entry: &ManifestEntry, value: &str) -> Option<bool> {
    let c = &entry.categories;
    if let Some(a) = AttributeCategory::parse(value) {
        return Some(c.attribute_category == a);
    }
    if let Some(o) = ObjectCategory::parse(value) {
        return Some(c.object_category == o);
    }
    SceneTag::parse(value).map(|s| c.scene == s)
}

/// Filters `items` by the query; pages are 0-based.
pub fn filter_items(items: &[ManifestEntry], query: &HashMap<String, String>) -> Result<ItemPage> {
    let bad = |m: String| ServiceError::bad_request("unknown_filter", m);
    let mut bucket = None;
    let mut category = None;
    let mut page: usize = 0;
    let mut per_page = DEFAULT_PER_PAGE;
    for (k, v) in query {
        match k.as_str() {
            "bucket" if !v.is_empty() => {
                bucket = Some(SizeBucket::parse(v).ok_or_else(|| bad(format!("unknown bucket {v:?}")))?)
            }
            "category" if !v.is_empty() => {
                let c = v.to_lowercase();
                if !is_category(&c) {
                    return Err(bad(format!("unknown category {v:?}")));
                }
                category = Some(c);
            }
            "bucket" | "category" => {}
            "page" => page = v.parse().map_err(|_| bad(format!("bad page {v:?}")))?,
            "per_page" => {
                per_page = v.parse().map_err(|_| bad(format!("bad per_page {v:?}")))?;
                if per_page == 0 || per_page > MAX_PER_PAGE {
                    return Err(bad(format!("per_page must be in 1..={MAX_PER_PAGE}")));
                }
            }
            _ => return Err(bad(format!("unknown filter {k:?}"))),
        }
    }
    let matching: Vec<&ManifestEntry> = items
        .iter()
        .filter(|e| bucket.is_none_or(|b| e.size_bucket == b))
        .filter(|e| category.as_deref().is_none_or(|c| category_matches(e, c) == Some(true)))
        .collect();
    let total = matching.len();
    let start = page.saturating_mul(per_page).min(total);
    let end = (start + per_page).min(total);
    Ok(ItemPage {
        items: matching[start..end].iter().map(|e| (*e).clone()).collect(),
        page,
        per_page,
        total,
        next_page: (end < total).then_some(page + 1),
    })
}

fn is_category(v: &str) -> bool {
    AttributeCategory::parse(v).is_some() || ObjectCategory::parse(v).is_some() || SceneTag::parse(v).is_some()
}

pub async fn list_items(State(state): AppRef, Query(query): Query<HashMap<String, String>>) -> Result<Json<ItemPage>> {
    Ok(Json(filter_items(&state.bench, &query)?))
}

pub async fn latest_report(State(state): AppRef) -> Result<Json<Value>> {
    let path = state.config.reports_dir.join(crate::LATEST_REPORT);
    match std::fs::read(&path) {
        Ok(b) => Ok(Json(serde_json::from_slice(&b)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ServiceError::not_found("no_report", "no evaluation report has been generated"))
        }
        Err(e) => Err(e.into()),
    }
}
