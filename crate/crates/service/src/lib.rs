//! HTTP service that runs interactive selection sessions.
//!
//! A client creates a session for an app and a specification, answers the
//! queries it is shown on the 1..9 scale, and reads the recommendation once
//! the budget is spent.

pub mod api;
pub mod routes;
pub mod session;

use std::future::Future;
use std::sync::Arc;

pub use routes::router;
pub use session::{ServiceConfig, SessionManager, SessionRecord, StoreError};

/// Serves until `shutdown` resolves, then aborts live sessions and waits
/// for their workers to record it.
pub async fn serve(
    listener: tokio::net::TcpListener,
    manager: Arc<SessionManager>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}");
    }
    let app = router(manager.clone());
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await;
    tokio::task::spawn_blocking(move || manager.shutdown())
        .await
        .map_err(std::io::Error::other)?;
    result
}
