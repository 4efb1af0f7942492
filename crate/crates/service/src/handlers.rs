use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;

use counterfact_core::dataio::{Schema, TrajectoryRecord};
use counterfact_core::inference::{
    counterfactual_compare, default_plans, integrated_gradients, prepare_history, ExplanationContext,
    ExplanationProvider, IgConfig, TemplateProvider, TreatmentPlan,
};
use counterfact_core::numkit::Tensor;
use counterfact_core::seqmodel::{read_checkpoint_header, CHECKPOINT_FORMAT_VERSION};
use counterfact_core::Error as CoreError;

use crate::api::*;
use crate::error::ApiError;
use crate::{AppState, LoadedModel};

/// Parse a JSON body, naming the offending field on failure.
pub fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { None } else { Some(path) };
        ApiError::BadRequest {
            field,
            message: e.into_inner().to_string(),
        }
    })
}

fn check_flags(values: &[f64], field: &str) -> Result<(), ApiError> {
    for (i, v) in values.iter().enumerate() {
        if *v != 0.0 && *v != 1.0 {
            return Err(ApiError::bad(format!("{field}[{i}]"), format!("treatment flag must be 0 or 1, got {v}")));
        }
    }
    Ok(())
}

fn check_width(len: usize, want: usize, field: &str) -> Result<(), ApiError> {
    if len != want {
        return Err(ApiError::bad(field, format!("expected {want} values, got {len}")));
    }
    Ok(())
}

/// Validate an inline history against the schema and convert it to a raw record.
pub fn history_record(h: &HistoryInput, schema: &Schema) -> Result<TrajectoryRecord, ApiError> {
    let (dx, da, dy, dv) = (schema.d_x(), schema.d_a(), schema.d_y(), schema.d_v());
    let t = h.y.len();
    if t == 0 {
        return Err(ApiError::bad("history.y", "history needs at least one step"));
    }
    check_width(h.v.len(), dv, "history.v")?;
    if let Some(i) = h.v.iter().position(|v| !v.is_finite()) {
        return Err(ApiError::bad(format!("history.v[{i}]"), "static covariates must be finite"));
    }
    if h.x.len() != t {
        return Err(ApiError::bad("history.x", format!("expected {t} rows to match history.y, got {}", h.x.len())));
    }
    if h.a.len() != t && h.a.len() + 1 != t {
        return Err(ApiError::bad(
            "history.a",
            format!("expected {t} or {} rows, got {}", t - 1, h.a.len()),
        ));
    }
    let mut x = Vec::with_capacity(t * dx);
    let mut mask = Vec::with_capacity(t * dx);
    for (r, row) in h.x.iter().enumerate() {
        check_width(row.len(), dx, &format!("history.x[{r}]"))?;
        for (i, v) in row.iter().enumerate() {
            match v {
                Some(v) if v.is_finite() => {
                    x.push(*v);
                    mask.push(true);
                }
                Some(_) => return Err(ApiError::bad(format!("history.x[{r}][{i}]"), "covariates must be finite")),
                None => {
                    x.push(f64::NAN);
                    mask.push(false);
                }
            }
        }
    }
    let mut y = Vec::with_capacity(t * dy);
    for (r, row) in h.y.iter().enumerate() {
        check_width(row.len(), dy, &format!("history.y[{r}]"))?;
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(ApiError::bad(format!("history.y[{r}][{i}]"), "outcomes must be finite"));
        }
        y.extend_from_slice(row);
    }
    let mut a = Vec::with_capacity(t * da);
    for (r, row) in h.a.iter().enumerate() {
        let field = format!("history.a[{r}]");
        check_width(row.len(), da, &field)?;
        check_flags(row, &field)?;
        a.extend_from_slice(row);
    }
    // the last treatment row is never read: forecasts take the plan's first step
    a.resize(t * da, 0.0);
    for (k, g) in schema.one_hot_groups.iter().enumerate() {
        let s: f64 = g.columns.iter().map(|&c| h.v[c]).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(ApiError::bad("history.v", format!("one-hot group {k} (`{}`) sums to {s}", g.name)));
        }
    }
    let record = TrajectoryRecord {
        patient_id: h.patient_id.clone().unwrap_or_else(|| "request".into()),
        v: h.v.clone(),
        x,
        a,
        y,
        mask,
        len: t,
    };
    record.check(schema).map_err(|e| ApiError::bad("history", e.to_string()))?;
    Ok(record)
}

pub fn plan_from_spec(
    spec: &PlanSpec,
    horizon: usize,
    d_a: usize,
    field: &str,
) -> Result<TreatmentPlan, ApiError> {
    let steps = match (&spec.steps, &spec.constant) {
        (Some(steps), None) => {
            for (k, s) in steps.iter().enumerate() {
                let f = format!("{field}.steps[{k}]");
                check_width(s.len(), d_a, &f)?;
                check_flags(s, &f)?;
            }
            if steps.len() != horizon {
                return Err(ApiError::unprocessable(
                    format!("{field}.steps"),
                    format!("plan `{}` has {} steps but the horizon is {horizon}", spec.label, steps.len()),
                ));
            }
            steps.clone()
        }
        (None, Some(c)) => {
            let f = format!("{field}.constant");
            check_width(c.len(), d_a, &f)?;
            check_flags(c, &f)?;
            vec![c.clone(); horizon]
        }
        _ => {
            return Err(ApiError::bad(field, "a plan needs exactly one of `steps` or `constant`"));
        }
    };
    Ok(TreatmentPlan {
        label: spec.label.clone(),
        steps,
    })
}

fn check_horizon(horizon: usize) -> Result<(), ApiError> {
    if horizon < 1 || horizon > MAX_HORIZON {
        return Err(ApiError::bad("horizon", format!("horizon must be in 1..={MAX_HORIZON}, got {horizon}")));
    }
    Ok(())
}

fn ig_config(steps: usize, channel: usize, d_y: usize) -> Result<IgConfig, ApiError> {
    let min = counterfact_core::inference::IG_STEPS_MIN;
    if steps < min || steps > MAX_IG_STEPS {
        return Err(ApiError::bad("ig_steps", format!("ig_steps must be in {min}..={MAX_IG_STEPS}, got {steps}")));
    }
    if channel >= d_y {
        return Err(ApiError::bad("target_channel", format!("target_channel must be < {d_y}, got {channel}")));
    }
    Ok(IgConfig {
        steps,
        target_channel: channel,
    })
}

/// Engine failures after validation are input problems only when the
/// history could not be imputed; everything else is internal.
fn engine_error(e: CoreError) -> ApiError {
    match e {
        CoreError::Imputation { .. } => ApiError::bad("history.x", e.to_string()),
        other => ApiError::internal(other),
    }
}

fn encoded_history(m: &LoadedModel, h: &HistoryInput) -> Result<Tensor, ApiError> {
    let record = history_record(h, &m.ckpt.schema)?;
    prepare_history(&m.ckpt, &record).map_err(engine_error)
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Counterfactual comparison, attribution, and explanation for one request.
pub fn predict(m: &LoadedModel, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let start = Instant::now();
    let schema = &m.ckpt.schema;
    check_horizon(req.horizon)?;
    let ig = ig_config(req.ig_steps, req.target_channel, schema.d_y())?;
    let [lo, hi] = req.target_range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(ApiError::bad("target_range", "target_range must be finite with lo < hi"));
    }
    let plans: Vec<TreatmentPlan> = match &req.plans {
        None => default_plans(schema, req.horizon),
        Some(specs) if specs.is_empty() => return Err(ApiError::bad("plans", "plans must be non-empty")),
        Some(specs) => specs
            .iter()
            .enumerate()
            .map(|(i, s)| plan_from_spec(s, req.horizon, schema.d_a(), &format!("plans[{i}]")))
            .collect::<Result<_, _>>()?,
    };
    let attr_idx = match &req.attribute_plan {
        None => 0,
        Some(label) => plans
            .iter()
            .position(|p| &p.label == label)
            .ok_or_else(|| ApiError::unprocessable("attribute_plan", format!("no plan labelled `{label}`")))?,
    };
    let inputs = encoded_history(m, &req.history)?;
    let result = counterfactual_compare(&m.ckpt, &inputs, &plans).map_err(engine_error)?;
    let report = integrated_gradients(&m.ckpt, &inputs, &plans[attr_idx], &ig).map_err(engine_error)?;
    let attribution = AttributionView::from_report(&report, req.top_k, req.include_phi);
    let mut ctx = ExplanationContext::from_checkpoint(&m.ckpt, &inputs, result, plans, report, req.target_range)
        .map_err(engine_error)?;
    ctx.top_k = req.top_k;
    let explanation = TemplateProvider.explain(&ctx).map_err(engine_error)?;
    let trajectories = ctx
        .result
        .labels
        .iter()
        .zip(&ctx.result.trajectories)
        .map(|(label, values)| PlanTrajectory {
            label: label.clone(),
            values: values.clone(),
        })
        .collect();
    Ok(PredictResponse {
        model_digest: m.digest.clone(),
        origin: ctx.result.origin,
        horizon: ctx.result.horizon,
        outcome_names: schema.y.iter().map(|f| f.name.clone()).collect(),
        observed: ctx.history.clone(),
        trajectories,
        attribution,
        explanation: explanation.into(),
        latency_ms: elapsed_ms(start),
    })
}

/// Attribution of one plan's forecast without the explanation.
pub fn attribute(m: &LoadedModel, req: &AttributeRequest) -> Result<AttributeResponse, ApiError> {
    let start = Instant::now();
    let schema = &m.ckpt.schema;
    check_horizon(req.horizon)?;
    let ig = ig_config(req.ig_steps, req.target_channel, schema.d_y())?;
    let plan = plan_from_spec(&req.plan, req.horizon, schema.d_a(), "plan")?;
    let inputs = encoded_history(m, &req.history)?;
    let report = integrated_gradients(&m.ckpt, &inputs, &plan, &ig).map_err(engine_error)?;
    Ok(AttributeResponse {
        model_digest: m.digest.clone(),
        attribution: AttributionView::from_report(&report, req.top_k, req.include_phi),
        latency_ms: elapsed_ms(start),
    })
}

/// Read-only scan of `*.ckpt` files; unreadable entries are flagged, not fatal.
pub fn scan_models(dir: &Path) -> Vec<ModelEntry> {
    let Ok(read) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut paths: Vec<_> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let file = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            match read_checkpoint_header(&p) {
                Ok(h) => ModelEntry {
                    file,
                    ok: true,
                    error: None,
                    format_version: Some(h.format_version),
                    train_config_digest: Some(h.train_config_digest),
                    config: serde_json::to_value(&h.model).ok(),
                },
                Err(e) => ModelEntry {
                    file,
                    ok: false,
                    error: Some(e.to_string()),
                    format_version: None,
                    train_config_digest: None,
                    config: None,
                },
            }
        })
        .collect()
}

fn loaded(state: &AppState) -> Result<Arc<LoadedModel>, ApiError> {
    state.model.clone().ok_or(ApiError::NoModel)
}

/// Run CPU-bound work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

pub(crate) async fn health(State(state): State<AppState>) -> Response {
    match &state.model {
        Some(m) => Json(HealthResponse {
            status: "ok".into(),
            model_digest: Some(m.digest.clone()),
            format_version: Some(CHECKPOINT_FORMAT_VERSION),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(HealthResponse {
                status: "no_model".into(),
                model_digest: None,
                format_version: None,
            }),
        )
            .into_response(),
    }
}

pub(crate) async fn models(State(state): State<AppState>) -> Result<Json<ModelsResponse>, ApiError> {
    let dir = state.models_dir.clone();
    let models = blocking(move || Ok(dir.map(|d| scan_models(&d)).unwrap_or_default())).await?;
    Ok(Json(ModelsResponse { models }))
}

pub(crate) async fn schema() -> Json<serde_json::Value> {
    Json(published_schemas())
}

pub(crate) async fn predict_route(State(state): State<AppState>, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let m = loaded(&state)?;
    let req: PredictRequest = parse_body(&body)?;
    Ok(Json(blocking(move || predict(&m, &req)).await?))
}

pub(crate) async fn attribute_route(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<AttributeResponse>, ApiError> {
    let m = loaded(&state)?;
    let req: AttributeRequest = parse_body(&body)?;
    Ok(Json(blocking(move || attribute(&m, &req)).await?))
}

pub(crate) async fn fallback() -> ApiError {
    ApiError::NotFound
}
