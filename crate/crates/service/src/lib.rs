//! HTTP service for interactive sessions: a user submits a prompt, sees the
//! round's images, rates them, and repeats until satisfied or out of rounds.
//! Every state change is an event in a per-session JSONL log, so a restart
//! rebuilds all sessions.

pub mod api;
pub mod error;
pub mod runner;
pub mod session;
pub mod store;

pub use api::{router, AppState};
pub use error::ServiceError;

use homodiv_core::config::GlobalConfig;

/// Binds `service.host:service.port` and serves until interrupted.
pub async fn serve(config: &GlobalConfig) -> Result<(), ServiceError> {
    let stack = config.build_stack()?;
    let state = AppState::open(config, stack)?;
    let addr = format!("{}:{}", config.service.host, config.service.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
