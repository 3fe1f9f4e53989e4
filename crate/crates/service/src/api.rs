use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use exedit_core::image_ops::decode_image;
use exedit_core::pipeline::EditOptions;
use serde::Serialize;
use tower_http::services::ServeDir;

use crate::bundle::zip_dir;
use crate::error::ServiceError;
use crate::job::{Job, JobState};
use crate::queue::{Health, JobQueue, Submission};

type AppState = Arc<JobQueue>;

#[derive(Debug, Serialize)]
struct Submitted {
    id: String,
    state: JobState,
}

pub fn router(queue: Arc<JobQueue>) -> Router {
    let limit = queue.config().max_upload_bytes;
    let static_dir = queue.config().static_dir.clone();
    let api = Router::new()
        .route("/jobs", post(submit).get(list))
        .route("/jobs/{id}", get(status))
        .route("/jobs/{id}/result", get(result))
        .route("/jobs/{id}/cancel", post(cancel))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(queue);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Parses `lambdas` as a JSON array or a comma-separated list.
fn parse_lambdas(text: &str) -> Result<Vec<f64>, ServiceError> {
    let text = text.trim();
    if text.starts_with('[') {
        return serde_json::from_str(text).map_err(|e| ServiceError::Validation(format!("lambdas: {e}")));
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| ServiceError::Validation(format!("lambdas: {s:?}: {e}")))
        })
        .collect()
}

async fn read_submission(mut form: Multipart) -> Result<Submission, ServiceError> {
    let bad = |e: axum::extract::multipart::MultipartError| ServiceError::Validation(format!("multipart body: {e}"));
    let (mut x, mut x_edit, mut y) = (None, None, None);
    let mut options = EditOptions::default();
    let mut lambda = None;
    let mut lambdas = None;
    while let Some(field) = form.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_owned();
        match name.as_str() {
            "x" | "x_edit" | "xedit" | "y" => {
                let bytes = field.bytes().await.map_err(bad)?;
                let slot = match name.as_str() {
                    "x" => &mut x,
                    "y" => &mut y,
                    _ => &mut x_edit,
                };
                *slot = Some(bytes);
            }
            "options" => {
                let text = field.text().await.map_err(bad)?;
                options = serde_json::from_str(&text).map_err(|e| ServiceError::Validation(format!("options: {e}")))?;
            }
            "lambda" => {
                let text = field.text().await.map_err(bad)?;
                let v = text
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| ServiceError::Validation(format!("lambda: {e}")))?;
                lambda = Some(v);
            }
            "lambdas" => lambdas = Some(parse_lambdas(&field.text().await.map_err(bad)?)?),
            other => return Err(ServiceError::Validation(format!("unexpected form field {other:?}"))),
        }
    }
    if let Some(l) = lambda {
        options.lambda = l;
    }
    let missing = |n: &str| ServiceError::Validation(format!("missing image field {n:?}"));
    let (x, x_edit, y) = (x.ok_or_else(|| missing("x"))?, x_edit.ok_or_else(|| missing("x_edit"))?, y.ok_or_else(|| missing("y"))?);
    let decoded = tokio::task::spawn_blocking(move || -> Result<_, ServiceError> {
        let decode = |b: &[u8], n: &str| decode_image(b).map_err(|e| ServiceError::Validation(format!("{n}: {e}")));
        Ok((decode(&x, "x")?, decode(&x_edit, "x_edit")?, decode(&y, "y")?))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Submission {
        x: decoded.0,
        x_edit: decoded.1,
        y: decoded.2,
        options,
        lambdas,
    })
}

async fn submit(State(queue): State<AppState>, form: Multipart) -> Result<impl IntoResponse, ServiceError> {
    let submission = read_submission(form).await?;
    let job = queue.submit(submission)?;
    Ok((
        StatusCode::ACCEPTED,
        [(header::LOCATION, format!("/jobs/{}", job.id))],
        Json(Submitted {
            id: job.id,
            state: job.state,
        }),
    ))
}

async fn list(State(queue): State<AppState>) -> Json<Vec<Job>> {
    Json(queue.list())
}

async fn status(State(queue): State<AppState>, Path(id): Path<String>) -> Result<Json<Job>, ServiceError> {
    queue.status(&id).map(Json)
}

async fn cancel(State(queue): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    queue.cancel(&id).map(|job| (StatusCode::ACCEPTED, Json(job)))
}

async fn result(State(queue): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    let (job, dir) = queue.result_dir(&id)?;
    let bytes = tokio::task::spawn_blocking(move || zip_dir(&dir))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map_err(|e| ServiceError::Internal(format!("reading bundle: {e}")))?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/zip".to_owned()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{}.zip\"", job.id)),
        ],
        bytes,
    ))
}

async fn health(State(queue): State<AppState>) -> Json<Health> {
    Json(queue.health())
}
