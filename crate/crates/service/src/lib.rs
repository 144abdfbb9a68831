//! HTTP front end for interactive label debugging: rank training points,
//! correct labels, retrain, and watch accuracy and flip recovery move.

pub mod error;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use repkit_core::debug_sim::Metric;
use repkit_core::influence::argmax;
use repkit_core::representer::{explain, Explanation};

pub use error::ApiError;
pub use session::{AuditEntry, CurveEntry, JobStatus, ServiceConfig, Session, Snapshot};

type Shared = Arc<Session>;

const DEFAULT_LIMIT: usize = 20;

const INDEX_HTML: &str = "<!doctype html><meta charset=\"utf-8\"><title>repkit</title>\
<p>repkit debug service. The JSON API is under <code>/api</code>; \
start the triage UI with <code>--static DIR</code>.</p>";

/// Builds the router. With `static_dir`, files under it are served at `/`.
pub fn router(session: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/status", get(status))
        .route("/api/ranking", get(ranking))
        .route("/api/labels/{index}", post(set_label))
        .route("/api/retrain", post(retrain))
        .route("/api/jobs/{id}", get(job))
        .route("/api/curve", get(curve))
        .route("/api/explain", get(explain_point))
        .route("/api/audit", get(audit))
        .with_state(session);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(INDEX_HTML) })),
    }
}

/// Serves until the process is stopped.
pub async fn serve(session: Shared, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(session, static_dir)).await
}

#[derive(Serialize)]
struct StatusBody {
    labels_version: u64,
    weights_version: Option<u64>,
    fitted_labels_version: Option<u64>,
    stale: bool,
    running_job: Option<u64>,
    n_train: usize,
    n_test: usize,
    num_classes: usize,
    class_names: Option<Vec<String>>,
}

async fn status(State(s): State<Shared>) -> Json<StatusBody> {
    let (labels_version, _) = s.labels();
    let snap = s.snapshot();
    let b = s.bundle();
    Json(StatusBody {
        labels_version,
        weights_version: snap.as_ref().map(|s| s.weights_version),
        fitted_labels_version: snap.as_ref().map(|s| s.labels_version),
        stale: snap.as_ref().is_some_and(|s| s.labels_version != labels_version),
        running_job: s.running_job(),
        n_train: b.n_train(),
        n_test: b.n_test(),
        num_classes: b.num_classes(),
        class_names: b.manifest.class_names.clone(),
    })
}

#[derive(Deserialize)]
struct RankingQuery {
    metric: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPoint {
    pub train_index: usize,
    /// `|α_{i,y_i}|` or `|self-influence|`; absent for the random metric.
    pub score: Option<f64>,
    pub current_label: usize,
    pub inspected_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPage {
    pub metric: Metric,
    pub weights_version: u64,
    pub fitted_labels_version: u64,
    pub labels_version: u64,
    pub stale: bool,
    pub total: usize,
    pub offset: usize,
    pub items: Vec<RankedPoint>,
}

async fn ranking(State(s): State<Shared>, Query(q): Query<RankingQuery>) -> Result<Json<RankingPage>, ApiError> {
    let metric: Metric = q
        .metric
        .as_deref()
        .unwrap_or("representer")
        .parse()
        .map_err(|e: repkit_core::Error| ApiError::BadRequest(e.to_string()))?;
    let snap = s.snapshot().ok_or(ApiError::NoFitYet)?;
    let seed = q.seed.unwrap_or(s.config().random_seed);
    let session = s.clone();
    let snap_for_rank = snap.clone();
    let (order, scores) = tokio::task::spawn_blocking(move || -> Result<(Vec<usize>, Option<Vec<f64>>), ApiError> {
        let snap = snap_for_rank;
        match metric {
            Metric::Representer => Ok((snap.representer_order.clone(), Some(snap.representer_scores.clone()))),
            Metric::Influence => {
                let (scores, order) = snap.influence_ranking()?;
                Ok((order.to_vec(), Some(scores.iter().map(|v| v.abs()).collect())))
            }
            Metric::Random => Ok((session.random_order(&snap, seed)?, None)),
        }
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;

    let (labels_version, labels) = s.labels();
    let inspected = s.inspected();
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_LIMIT);
    let items = order
        .iter()
        .skip(offset)
        .take(limit)
        .map(|&i| RankedPoint {
            train_index: i,
            score: scores.as_ref().map(|v| v[i]),
            current_label: labels[i],
            inspected_flag: inspected.contains(&i),
        })
        .collect();
    Ok(Json(RankingPage {
        metric,
        weights_version: snap.weights_version,
        fitted_labels_version: snap.labels_version,
        labels_version,
        stale: snap.labels_version != labels_version,
        total: order.len(),
        offset,
        items,
    }))
}

#[derive(Deserialize)]
struct LabelBody {
    label: usize,
}

async fn set_label(
    State(s): State<Shared>,
    Path(index): Path<usize>,
    Json(body): Json<LabelBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let version = s.set_label(index, body.label)?;
    Ok(Json(serde_json::json!({ "labels_version": version })))
}

async fn retrain(State(s): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    let (id, version, labels) = s.begin_retrain()?;
    let session = s.clone();
    tokio::task::spawn_blocking(move || session.run_retrain(id, version, &labels));
    Ok((
        StatusCode::ACCEPTED,
        Json(serde_json::json!({ "job_id": id, "labels_version": version })),
    ))
}

async fn job(State(s): State<Shared>, Path(id): Path<u64>) -> Result<Json<serde_json::Value>, ApiError> {
    let status = s.job(id).ok_or(ApiError::NotFound { what: "job", index: id })?;
    let mut body = serde_json::to_value(&status).map_err(|e| ApiError::Internal(e.to_string()))?;
    body["job_id"] = id.into();
    Ok(Json(body))
}

async fn curve(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "points": s.curve() }))
}

#[derive(Deserialize)]
struct ExplainQuery {
    test: usize,
    class: Option<usize>,
    top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainBody {
    pub weights_version: u64,
    pub fitted_labels_version: u64,
    pub stale: bool,
    pub explanation: Explanation,
}

async fn explain_point(State(s): State<Shared>, Query(q): Query<ExplainQuery>) -> Result<Json<ExplainBody>, ApiError> {
    let snap = s.snapshot().ok_or(ApiError::NoFitYet)?;
    let b = &snap.bundle;
    if q.test >= b.n_test() {
        return Err(ApiError::NotFound {
            what: "test index",
            index: q.test as u64,
        });
    }
    let class = match q.class {
        Some(c) if c >= b.num_classes() => {
            return Err(ApiError::BadRequest(format!("class {c} out of range")));
        }
        Some(c) => c,
        None => argmax(&snap.weights.logits_for(b.test_features.row(q.test))),
    };
    let explanation = explain(&snap.weights, &snap.alphas, b, q.test, class, q.top_k.unwrap_or(5))?;
    let (labels_version, _) = s.labels();
    Ok(Json(ExplainBody {
        weights_version: snap.weights_version,
        fitted_labels_version: snap.labels_version,
        stale: snap.labels_version != labels_version,
        explanation,
    }))
}

async fn audit(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "initial_labels": s.initial_labels(), "entries": s.audit() }))
}
