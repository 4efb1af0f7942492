//! Request and response bodies of the JSON API.
//!
//! These types are the published contract (see `GET /schema`); they are kept
//! separate from the engine types so the wire format stays stable.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use counterfact_core::inference::{AttributionReport, Explanation};

pub const DEFAULT_HORIZON: usize = 6;
pub const DEFAULT_TOP_K: usize = 5;
/// Upper bound on requested IG steps per request.
pub const MAX_IG_STEPS: usize = 4096;
/// Upper bound on the forecast horizon per request.
pub const MAX_HORIZON: usize = 64;

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}
fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_ig_steps() -> usize {
    counterfact_core::inference::IG_STEPS_DEFAULT
}

/// Patient history in raw data units, one row per observed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct HistoryInput {
    #[serde(default)]
    pub patient_id: Option<String>,
    /// Static covariates, one value per static feature.
    pub v: Vec<f64>,
    /// Time-varying covariates per step; `null` marks a missing value.
    pub x: Vec<Vec<Option<f64>>>,
    /// Treatment flags (0 or 1) per step. The row for the last step may be
    /// omitted; it is replaced by the first step of each plan.
    pub a: Vec<Vec<f64>>,
    /// Observed outcomes per step.
    pub y: Vec<Vec<f64>>,
}

/// A treatment plan, either spelled out per step or held constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub label: String,
    /// Per-step flags; length must equal the horizon.
    #[serde(default)]
    pub steps: Option<Vec<Vec<f64>>>,
    /// Flags repeated over the whole horizon.
    #[serde(default)]
    pub constant: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub history: HistoryInput,
    /// Plans to compare; the four constant default plans when omitted.
    #[serde(default)]
    pub plans: Option<Vec<PlanSpec>>,
    /// Forecast steps τ.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Number of features listed in the attribution summary.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Desired outcome range `[lo, hi]` in outcome units.
    pub target_range: [f64; 2],
    /// Outcome channel to attribute and explain.
    #[serde(default)]
    pub target_channel: usize,
    /// Label of the plan to attribute; the first plan when omitted.
    #[serde(default)]
    pub attribute_plan: Option<String>,
    /// Integrated-gradients steps m.
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    /// Include the full per-step attribution matrix.
    #[serde(default)]
    pub include_phi: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AttributeRequest {
    pub history: HistoryInput,
    pub plan: PlanSpec,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub target_channel: usize,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub include_phi: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FeatureWeightView {
    pub name: String,
    /// Mean attribution over forecast steps.
    pub raw: f64,
    /// Softmax-normalized weight.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AttributionView {
    pub plan_label: String,
    pub target_channel: usize,
    pub ig_steps: usize,
    pub baseline: String,
    pub input_names: Vec<String>,
    pub top: Vec<FeatureWeightView>,
    /// Normalized weight per input column; sums to 1.
    pub omega: Vec<f64>,
    pub omega_raw: Vec<f64>,
    /// `phi[j][i]`: contribution of input column i to forecast step j.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<Vec<f64>>>,
    pub completeness_gap: Vec<f64>,
    pub output_delta: Vec<f64>,
}

impl AttributionView {
    pub fn from_report(r: &AttributionReport, top_k: usize, include_phi: bool) -> Self {
        Self {
            plan_label: r.plan_label.clone(),
            target_channel: r.target_channel,
            ig_steps: r.steps,
            baseline: r.baseline.clone(),
            input_names: r.input_names.clone(),
            top: r
                .top(top_k)
                .into_iter()
                .map(|f| FeatureWeightView {
                    name: f.name,
                    raw: f.raw,
                    weight: f.weight,
                })
                .collect(),
            omega: r.omega.clone(),
            omega_raw: r.omega_raw.clone(),
            phi: include_phi.then(|| r.phi.clone()),
            completeness_gap: r.completeness_gap.clone(),
            output_delta: r.output_delta.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SectionView {
    pub title: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PreferenceView {
    pub label: String,
    /// Integer percent; all plans sum to 100.
    pub score: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExplanationView {
    pub provider: String,
    pub sections: Vec<SectionView>,
    pub preferences: Vec<PreferenceView>,
}

impl From<Explanation> for ExplanationView {
    fn from(e: Explanation) -> Self {
        Self {
            provider: e.provider,
            sections: e
                .sections
                .into_iter()
                .map(|s| SectionView {
                    title: s.title,
                    text: s.text,
                })
                .collect(),
            preferences: e
                .preferences
                .into_iter()
                .map(|p| PreferenceView {
                    label: p.label,
                    score: p.score,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PlanTrajectory {
    pub label: String,
    /// `values[k][c]`: outcome channel c at forecast step k, outcome units.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PredictResponse {
    pub model_digest: String,
    /// History steps preceding the first forecast.
    pub origin: usize,
    pub horizon: usize,
    pub outcome_names: Vec<String>,
    /// Observed target-channel outcomes.
    pub observed: Vec<f64>,
    pub trajectories: Vec<PlanTrajectory>,
    pub attribution: AttributionView,
    pub explanation: ExplanationView,
    /// Server-side handling time in milliseconds.
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AttributeResponse {
    pub model_digest: String,
    pub attribution: AttributionView,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HealthResponse {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_version: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelEntry {
    pub file: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config_digest: Option<String>,
    /// Model architecture from the checkpoint header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelsResponse {
    pub models: Vec<ModelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ErrorDetail {
    /// `bad_request`, `unprocessable`, `no_model`, `not_found`, or `internal`.
    pub code: String,
    pub message: String,
    /// Offending request field as a path, e.g. `plans[0].steps[2][1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    /// Correlation id of an internal failure, also written to the server log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

/// JSON Schemas of every request and response body.
pub fn published_schemas() -> serde_json::Value {
    serde_json::json!({
        "PredictRequest": schemars::schema_for!(PredictRequest),
        "PredictResponse": schemars::schema_for!(PredictResponse),
        "AttributeRequest": schemars::schema_for!(AttributeRequest),
        "AttributeResponse": schemars::schema_for!(AttributeResponse),
        "HealthResponse": schemars::schema_for!(HealthResponse),
        "ModelsResponse": schemars::schema_for!(ModelsResponse),
        "ErrorBody": schemars::schema_for!(ErrorBody),
    })
}
