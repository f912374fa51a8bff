//! Read-only HTTP query service over one retrieval index.
//!
//! `POST /query` takes `{"embedding": [..]}` or `{"class": "name"}` plus an
//! optional `"k"` (default 6) and answers
//! `{"results": [{"video_id", "score"}], "fingerprint"}`.
//! Bodies that are not a valid request get 400; well-formed requests that
//! cannot be answered (wrong dimension, unknown class, zero vector) get
//! 422. `GET /healthz` answers 200.

use std::io::Write as _;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use videmb::data::{ClassPrototypes, Dataset};
use videmb::retrieval::{RankedResult, RetrievalIndex, DEFAULT_K};

use crate::args::ServeArgs;
use crate::commands::{CliError, CliResult};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub embedding: Option<Vec<f32>>,
    pub class: Option<String>,
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub video_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
    pub fingerprint: String,
}

impl QueryResponse {
    pub fn new(ranked: &RankedResult, fingerprint: &str) -> Self {
        Self {
            results: ranked
                .items
                .iter()
                .map(|i| QueryHit { video_id: i.video_id.clone(), score: i.score })
                .collect(),
            fingerprint: fingerprint.to_string(),
        }
    }
}

pub struct AppState {
    pub index: RetrievalIndex,
    pub prototypes: Option<ClassPrototypes>,
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    let body = serde_json::json!({ "error": msg.to_string() }).to_string();
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn answer(state: &AppState, body: &[u8]) -> Response {
    let req: QueryRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let vector = match (req.embedding, req.class) {
        (Some(v), None) => v,
        (None, Some(name)) => {
            let Some(protos) = &state.prototypes else {
                return error(StatusCode::UNPROCESSABLE_ENTITY, "class queries need a dataset; start with --data");
            };
            match protos.index_of(&name) {
                Some(c) => protos.vector(c).to_vec(),
                None => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown class {name}")),
            }
        }
        _ => return error(StatusCode::BAD_REQUEST, "give exactly one of embedding or class"),
    };
    match state.index.query(&vector, req.k.unwrap_or(DEFAULT_K)) {
        Ok(ranked) => {
            let body = serde_json::to_string(&QueryResponse::new(&ranked, state.index.fingerprint()))
                .expect("response serializes");
            (StatusCode::OK, [(header::CONTENT_TYPE, "application/json")], body).into_response()
        }
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
    }
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    answer(&state, &body)
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/query", post(query))
        .with_state(state)
}

pub fn run(a: ServeArgs, threads: usize) -> CliResult {
    let index = RetrievalIndex::load(&a.index)?;
    let prototypes = match &a.data {
        Some(dir) => {
            let p = Dataset::open(dir)?.prototypes;
            if p.dim() != index.dim() {
                return Err(videmb::Error::DimMismatch { expected: index.dim(), actual: p.dim() }.into());
            }
            Some(p)
        }
        None => None,
    };
    let state = Arc::new(AppState { index, prototypes });
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(threads)
        .enable_io()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.bind).await?;
        let addr = listener.local_addr()?;
        let mut out = std::io::stdout();
        writeln!(out, "listening on http://{addr}")?;
        out.flush()?;
        axum::serve(listener, router(state)).await.map_err(CliError::from)
    })
}
