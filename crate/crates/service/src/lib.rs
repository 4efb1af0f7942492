//! HTTP JSON API over a loaded checkpoint: counterfactual plan comparison,
//! integrated-gradients attribution, and template explanations.
//!
//! Routes: `GET /health`, `GET /models`, `GET /schema`, `POST /predict`,
//! `POST /attribute`. The checkpoint is loaded once and shared read-only;
//! identical requests produce identical bodies apart from `latency_ms`.

pub mod api;
mod error;
mod handlers;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::http::{header, HeaderValue, Method};
use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, CorsLayer};

use counterfact_core::seqmodel::{read_checkpoint, ModelCheckpoint};

pub use error::ApiError;
pub use handlers::{attribute, history_record, parse_body, plan_from_spec, predict, scan_models};

/// A checkpoint ready to serve, with its content digest.
#[derive(Debug)]
pub struct LoadedModel {
    pub ckpt: ModelCheckpoint,
    pub digest: String,
}

impl LoadedModel {
    pub fn new(ckpt: ModelCheckpoint) -> counterfact_core::Result<Self> {
        let digest = ckpt.digest()?;
        Ok(Self { ckpt, digest })
    }

    pub fn load(path: &Path) -> counterfact_core::Result<Self> {
        Self::new(read_checkpoint(path)?)
    }
}

/// Shared, immutable service state.
#[derive(Clone, Debug, Default)]
pub struct AppState {
    pub model: Option<Arc<LoadedModel>>,
    /// Directory listed by `GET /models`.
    pub models_dir: Option<PathBuf>,
}

impl AppState {
    pub fn with_model(model: LoadedModel) -> Self {
        Self {
            model: Some(Arc::new(model)),
            models_dir: None,
        }
    }
}

/// Build the router; `cors_origins` lists browser origins allowed to call the API.
pub fn router(state: AppState, cors_origins: &[String]) -> Result<Router, ApiError> {
    let mut app = Router::new()
        .route("/health", get(handlers::health))
        .route("/models", get(handlers::models))
        .route("/schema", get(handlers::schema))
        .route("/predict", post(handlers::predict_route))
        .route("/attribute", post(handlers::attribute_route))
        .fallback(handlers::fallback)
        .with_state(state);
    if !cors_origins.is_empty() {
        let origins = cors_origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| ApiError::bad("cors_origins", format!("invalid origin `{o}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

/// Serve until the listener fails or the process stops.
pub async fn serve(listener: TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}

/// Serve until `shutdown` resolves, then finish in-flight requests.
pub async fn serve_until<F>(listener: TcpListener, app: Router, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
