//! Job-oriented HTTP service over the editing pipeline.
//!
//! Requests are handled concurrently; jobs run one at a time, in submission
//! order, on a single worker thread that owns the editor. Clients poll
//! `GET /jobs/{id}` and download a zip bundle once the job is done.

pub mod api;
pub mod bundle;
pub mod config;
pub mod error;
pub mod job;
pub mod queue;

use std::sync::Arc;

pub use api::router;
pub use config::ServiceConfig;
pub use error::ServiceError;
pub use job::{Job, JobResult, JobState};
pub use queue::{stub_loader, EditorLoader, Health, JobQueue, Submission};

/// Serves the API until ctrl-c.
pub async fn serve(config: ServiceConfig, loader: EditorLoader) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.results_dir)?;
    let addr = config.addr();
    let queue = Arc::new(JobQueue::start(config, loader));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(queue))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
