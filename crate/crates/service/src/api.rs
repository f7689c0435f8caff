//! Routes and handlers. Handlers parse, delegate to the library and the
//! store, and serialize.

use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::map_response_with_state;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pimap::encoder::{mentions, placeholder_name, MediaDescriptor};
use pimap::harness::manifest::GalleryManifest;
use pimap::retrieval::{search, Bindings, SearchOutcome};
use pimap::world::render::resolve_file;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::store::{JobKind, JobRecord, MediaRecord, PersonaRecord, PersonaStatus};
use crate::{now, AppState, CONFIG_HEADER, ENCODER_HEADER};

pub fn router(state: AppState) -> Router {
    let limit = state.inner.cfg.max_upload_bytes;
    Router::new()
        .route("/status", get(status))
        .route("/personas", post(create_persona).get(list_personas))
        .route("/personas/{id}", get(get_persona))
        .route("/personas/{id}/train", post(train_persona))
        .route("/personas/{id}/token", get(get_token))
        .route("/jobs/{id}", get(get_job))
        .route("/search", post(search_handler))
        .route("/index", post(index_media))
        .route("/media/{id}/thumbnail", get(thumbnail))
        .fallback(|| async { ServiceError::not_found("no such route") })
        .layer(DefaultBodyLimit::max(limit))
        .layer(map_response_with_state(state.clone(), stamp_headers))
        .with_state(state)
}

async fn stamp_headers(State(state): State<AppState>, mut res: Response) -> Response {
    let h = res.headers_mut();
    for (name, value) in [(ENCODER_HEADER, state.encoder_id()), (CONFIG_HEADER, state.config_hash())] {
        if let Ok(v) = HeaderValue::from_str(value) {
            h.insert(name, v);
        }
    }
    res
}

/// Runs blocking work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ServiceResult<T> + Send + 'static) -> ServiceResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::internal(format!("worker task failed: {e}")))?
}

fn multipart_err(e: axum::extract::multipart::MultipartError) -> ServiceError {
    ServiceError::new(e.status(), e.body_text())
}

#[derive(Serialize)]
struct Status<'a> {
    encoder_id: &'a str,
    config_hash: &'a str,
    index_size: usize,
    personas: usize,
    workers: usize,
    queue_capacity: usize,
}

async fn status(State(s): State<AppState>) -> ServiceResult<Response> {
    let personas = s.store().personas()?.len();
    Ok(Json(Status {
        encoder_id: s.encoder_id(),
        config_hash: s.config_hash(),
        index_size: s.index().len(),
        personas,
        workers: s.inner.cfg.workers,
        queue_capacity: s.inner.cfg.queue_capacity,
    })
    .into_response())
}

struct Upload {
    filename: Option<String>,
    bytes: Bytes,
}

/// Stores one uploaded file and returns its media record; the thumbnail is
/// written before the record exists.
fn ingest_upload(s: &AppState, up: &Upload) -> ServiceResult<MediaRecord> {
    let (media_id, path, img) = s.inner.media.store_upload(&up.bytes)?;
    let descriptor = resolve_file(&path, &media_id)?;
    s.inner.backend.encoder.encode_image(&descriptor).map_err(|e| {
        ServiceError::bad_request(format!(
            "encoder `{}` cannot read {}: {e}",
            s.encoder_id(),
            up.filename.as_deref().unwrap_or("upload")
        ))
    })?;
    s.inner.media.write_thumbnail(&media_id, &img)?;
    let mut labels = BTreeMap::new();
    if let Some(f) = &up.filename {
        labels.insert("filename".to_string(), f.clone());
    }
    let record = MediaRecord {
        media_id,
        descriptor,
        labels,
    };
    if s.store().media(&record.media_id)?.is_none() {
        s.store().put_media(&record)?;
    }
    Ok(record)
}

fn valid_name(name: &str) -> bool {
    name != "tok" && placeholder_name(&format!("@{name}")) == Some(name)
}

async fn create_persona(State(s): State<AppState>, mut mp: Multipart) -> ServiceResult<Response> {
    let (mut name, mut category, mut caption) = (None, None, None);
    let mut uploads = Vec::new();
    while let Some(field) = mp.next_field().await.map_err(multipart_err)? {
        let field_name = field.name().unwrap_or_default().to_string();
        match field_name.as_str() {
            "name" => name = Some(field.text().await.map_err(multipart_err)?.trim().to_string()),
            "category" => category = Some(field.text().await.map_err(multipart_err)?.trim().to_string()),
            "caption" => caption = Some(field.text().await.map_err(multipart_err)?.trim().to_string()),
            "templates" | "templates[]" => {
                let filename = field.file_name().map(str::to_string);
                let bytes = field.bytes().await.map_err(multipart_err)?;
                uploads.push(Upload { filename, bytes });
            }
            other => return Err(ServiceError::bad_request(format!("unexpected field `{other}`"))),
        }
    }
    let name = name
        .filter(|n| !n.is_empty())
        .ok_or_else(|| ServiceError::bad_request("missing `name`"))?;
    if !valid_name(&name) {
        return Err(ServiceError::bad_request(format!(
            "persona name `{name}` must be letters, digits, `_` or `-`"
        )));
    }
    let category = category
        .filter(|c| !c.is_empty())
        .ok_or_else(|| ServiceError::bad_request("missing `category`"))?;
    if uploads.is_empty() {
        return Err(ServiceError::bad_request("at least one template image is required"));
    }
    if s.store().persona(&name)?.is_some() {
        return Err(ServiceError::conflict(format!("persona `{name}` already exists")));
    }
    let state = s.clone();
    let record = blocking(move || {
        let mut templates = Vec::new();
        for up in &uploads {
            let id = ingest_upload(&state, up)?.media_id;
            if !templates.contains(&id) {
                templates.push(id);
            }
        }
        let record = PersonaRecord {
            id: name.clone(),
            category,
            caption: caption.filter(|c| !c.is_empty()),
            templates,
            status: PersonaStatus::Untrained,
            last_job: None,
            created_at: now(),
        };
        if !state.store().insert_persona(&record)? {
            return Err(ServiceError::conflict(format!("persona `{name}` already exists")));
        }
        Ok(record)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn list_personas(State(s): State<AppState>) -> ServiceResult<Json<Vec<PersonaRecord>>> {
    Ok(Json(s.store().personas()?))
}

fn persona_or_404(s: &AppState, id: &str) -> ServiceResult<PersonaRecord> {
    s.store()
        .persona(id)?
        .ok_or_else(|| ServiceError::not_found(format!("no persona `{id}`")))
}

async fn get_persona(State(s): State<AppState>, Path(id): Path<String>) -> ServiceResult<Json<PersonaRecord>> {
    Ok(Json(persona_or_404(&s, &id)?))
}

async fn train_persona(State(s): State<AppState>, Path(id): Path<String>) -> ServiceResult<Response> {
    persona_or_404(&s, &id)?;
    let job = s.submit(JobKind::Personalize, Some(id.clone()), Vec::new(), |job_id| {
        s.store()
            .update_persona(&id, |p| {
                if matches!(p.status, PersonaStatus::Queued | PersonaStatus::Training) {
                    return Err(ServiceError::conflict(format!("persona `{id}` is already being trained")));
                }
                p.status = PersonaStatus::Queued;
                p.last_job = Some(job_id.to_string());
                Ok(())
            })?
            .ok_or_else(|| ServiceError::not_found(format!("no persona `{id}`")))
    })?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_token(State(s): State<AppState>, Path(id): Path<String>) -> ServiceResult<Response> {
    persona_or_404(&s, &id)?;
    let token = s
        .store()
        .token(&id)?
        .ok_or_else(|| ServiceError::conflict(format!("persona `{id}` is not trained")))?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], token.to_bytes()).into_response())
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ServiceResult<Json<JobRecord>> {
    s.store()
        .job(&id)?
        .map(Json)
        .ok_or_else(|| ServiceError::not_found(format!("no job `{id}`")))
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Deserialize)]
pub struct SearchRequest {
    pub query_text: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

/// Bindings for every persona mentioned in `text`: unknown names are
/// unbound (422), untrained personas conflict (409).
fn mentioned_bindings(s: &AppState, text: &str) -> ServiceResult<Bindings> {
    let mut b = Bindings::new();
    for name in mentions(text) {
        let persona = s
            .store()
            .persona(&name)?
            .ok_or_else(|| ServiceError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unbound persona `@{name}`")))?;
        let token = s
            .store()
            .token(&persona.id)?
            .ok_or_else(|| ServiceError::conflict(format!("persona `@{name}` is not trained yet")))?;
        b.insert(name, token);
    }
    Ok(b)
}

async fn search_handler(State(s): State<AppState>, Json(req): Json<SearchRequest>) -> ServiceResult<Json<SearchOutcome>> {
    if req.k == 0 {
        return Err(ServiceError::new(StatusCode::UNPROCESSABLE_ENTITY, "k must be at least 1"));
    }
    let bindings = mentioned_bindings(&s, &req.query_text)?;
    let index = s.index();
    let state = s.clone();
    let out = blocking(move || Ok(search(&*state.inner.backend.encoder, &index, &req.query_text, req.k, &bindings)?)).await?;
    Ok(Json(out))
}

/// Adds media from a JSON gallery manifest or multipart `media` files and
/// queues an index update.
async fn index_media(State(s): State<AppState>, req: Request) -> ServiceResult<Response> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let records: Vec<MediaRecord> = if is_multipart {
        let mut mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ServiceError::bad_request(e.body_text()))?;
        let mut uploads = Vec::new();
        while let Some(field) = mp.next_field().await.map_err(multipart_err)? {
            match field.name().unwrap_or_default() {
                "media" | "media[]" => {
                    let filename = field.file_name().map(str::to_string);
                    uploads.push(Upload {
                        filename,
                        bytes: field.bytes().await.map_err(multipart_err)?,
                    });
                }
                other => return Err(ServiceError::bad_request(format!("unexpected field `{other}`"))),
            }
        }
        let state = s.clone();
        blocking(move || uploads.iter().map(|u| ingest_upload(&state, u)).collect()).await?
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ServiceError::new(e.status(), e.body_text()))?;
        let manifest: GalleryManifest =
            serde_json::from_slice(&body).map_err(|e| ServiceError::bad_request(format!("gallery manifest: {e}")))?;
        manifest.validate()?;
        let state = s.clone();
        blocking(move || ingest_manifest(&state, &manifest)).await?
    };
    if records.is_empty() {
        return Err(ServiceError::bad_request("no media supplied"));
    }
    let mut seen = std::collections::HashSet::new();
    let ids: Vec<String> = records
        .into_iter()
        .map(|r| r.media_id)
        .filter(|id| seen.insert(id.clone()))
        .collect();
    let job = s.submit(JobKind::Index, None, ids, |_| Ok(()))?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

fn ingest_manifest(s: &AppState, manifest: &GalleryManifest) -> ServiceResult<Vec<MediaRecord>> {
    let mut out = Vec::new();
    for item in &manifest.items {
        let id = item.media.media_id();
        if let Some(existing) = s.store().media(id)? {
            if existing.labels != item.labels || !same_source(&existing.descriptor, &item.media) {
                return Err(ServiceError::conflict(format!("media id `{id}` is already taken by other content")));
            }
            out.push(existing);
            continue;
        }
        let descriptor = s.inner.media.ingest_descriptor(&item.media, s.inner.backend.world.as_ref())?;
        let record = MediaRecord {
            media_id: id.to_string(),
            descriptor,
            labels: item.labels.clone(),
        };
        s.store().put_media(&record)?;
        out.push(record);
    }
    Ok(out)
}

/// Synthetic descriptors compare exactly; file media compare by kind, since
/// stored copies live at content-addressed paths.
fn same_source(stored: &MediaDescriptor, incoming: &MediaDescriptor) -> bool {
    match (stored, incoming) {
        (MediaDescriptor::Synthetic(a), MediaDescriptor::Synthetic(b)) => a == b,
        (MediaDescriptor::Image { .. }, MediaDescriptor::Image { .. }) => true,
        (MediaDescriptor::Video { frames: a, .. }, MediaDescriptor::Video { frames: b, .. }) => a.len() == b.len(),
        _ => false,
    }
}

async fn thumbnail(State(s): State<AppState>, Path(id): Path<String>) -> ServiceResult<Response> {
    if id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(ServiceError::not_found(format!("no media `{id}`")));
    }
    let path = s.inner.media.thumbnail_path(&id);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ServiceError::not_found(format!("no thumbnail for `{id}`")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}
