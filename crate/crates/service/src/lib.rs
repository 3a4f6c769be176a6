//! HTTP service: asynchronous edit jobs, benchmark browsing and evaluation
//! reports.
//!
//! | route | |
//! |---|---|
//! | `POST /v1/edit` | multipart `image`, `mask`, `prompt`, `params`; 202 `{job_id}` |
//! | `GET /v1/edit/{id}` | job status, output URIs and provenance |
//! | `GET /v1/blobs/{hash}` | stored input or output raster |
//! | `GET /v1/benchmark/items` | `bucket`, `category`, `page`, `per_page` |
//! | `GET /v1/reports/latest` | most recent agreement report |

pub mod api;
pub mod error;
pub mod job;
pub mod store;
pub mod worker;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use inpaintkit_core::scenegen::{read_manifest, ManifestEntry, MANIFEST_FILE};
use tokio::sync::mpsc;

pub use error::{Result, ServiceError};
pub use worker::{CascadeBackend, EditBackend};

pub const LATEST_REPORT: &str = "latest.json";
pub const DEFAULT_MAX_BODY: usize = 8 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Holds `jobs.sqlite` and `blobs/`.
    pub data_dir: PathBuf,
    /// Directory with a benchmark manifest; a missing manifest serves no items.
    pub bench_dir: Option<PathBuf>,
    pub reports_dir: PathBuf,
    pub max_body_bytes: usize,
    pub workers: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        Self {
            reports_dir: data_dir.join("reports"),
            data_dir,
            bench_dir: None,
            max_body_bytes: DEFAULT_MAX_BODY,
            workers: 1,
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub jobs: store::JobStore,
    pub blobs: store::BlobStore,
    pub backend: Arc<dyn EditBackend>,
    pub bench: Vec<ManifestEntry>,
    queue: worker::JobQueue,
}

/// Opens the stores, starts the workers and returns the router. Must be
/// called inside a tokio runtime.
pub fn build(config: ServiceConfig, backend: Arc<dyn EditBackend>) -> Result<(Router, Arc<AppState>)> {
    std::fs::create_dir_all(&config.data_dir)?;
    let jobs = store::JobStore::open(&config.data_dir.join("jobs.sqlite"))?;
    let blobs = store::BlobStore::open(config.data_dir.join("blobs"))?;
    let bench = match &config.bench_dir {
        Some(dir) if dir.join(MANIFEST_FILE).exists() => read_manifest(dir)?,
        _ => Vec::new(),
    };
    let pending = jobs.unfinished()?;
    let (tx, rx) = mpsc::unbounded_channel();
    let state = Arc::new(AppState {
        jobs,
        blobs,
        backend,
        bench,
        queue: tx,
        config,
    });
    for id in pending {
        // a job interrupted mid-run cannot go back to queued
        if state.jobs.get(&id)?.status == job::JobStatus::Running {
            state.jobs.mark_failed(&id, "interrupted by restart")?;
        } else {
            let _ = state.queue.send(id);
        }
    }
    worker::spawn_workers(state.clone(), rx, state.config.workers);
    let router = Router::new()
        .route("/v1/edit", post(api::submit_edit))
        .route("/v1/edit/{id}", get(api::get_edit))
        .route("/v1/blobs/{hash}", get(api::get_blob))
        .route("/v1/benchmark/items", get(api::list_items))
        .route("/v1/reports/latest", get(api::latest_report))
        .layer(DefaultBodyLimit::max(state.config.max_body_bytes))
        .with_state(state.clone());
    Ok((router, state))
}

pub async fn serve(config: ServiceConfig, backend: Arc<dyn EditBackend>, addr: SocketAddr) -> Result<()> {
    let (router, _) = build(config, backend)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router).await?;
    Ok(())
}
