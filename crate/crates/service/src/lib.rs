//! HTTP JSON service over a trained model: samples, predictions with explanations,
//! interaction sessions and atlas curation under `/api/v1`.

pub mod config;
mod error;
mod routes;
mod state;

use std::net::SocketAddr;

pub use config::ServiceConfig;
pub use error::ApiError;
pub use routes::{
    router, AtlasResponse, DiscardResponse, PredictResponse, PrototypeEntry, SampleSummary, IDEMPOTENCY_HEADER,
};
pub use state::{AppState, AtlasEdits, InteractResult, ModelPaths, Session};

/// Binds and serves until ctrl-c.
pub async fn serve(state: AppState) -> std::io::Result<()> {
    let cfg = &state.0.config;
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
