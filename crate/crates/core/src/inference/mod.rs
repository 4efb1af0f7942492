//! Autoregressive multi-step rollout, plan comparison, integrated-gradients
//! attribution, and the template explanation with preference scores.

mod attribution;
mod explain;

use serde::{Deserialize, Serialize};

pub use attribution::{
    aggregate_attribution, integrated_gradients, integrated_gradients_fn, AttributionReport, FeatureWeight,
    IgConfig, COMPLETENESS_REL_TOL, IG_STEPS_DEFAULT, IG_STEPS_MIN, IG_STEPS_VERIFY,
};
pub use explain::{
    preference_scores, template_explanation, Explanation, ExplanationContext, ExplanationProvider,
    ExplanationSection, FeatureSummary, PlanPreference, PreferenceWeights, TemplateProvider,
};

use crate::dataio::{impute_dataset, zscore_apply, Dataset, NormStats, Schema, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::seqmodel::{build_inputs, check_binary, Model, ModelCheckpoint};

/// A labeled per-step treatment assignment ā_{t..t+τ−1}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPlan {
    pub label: String,
    /// `steps[k]` is the multi-hot assignment applied at forecast step k.
    pub steps: Vec<Vec<f64>>,
}

impl TreatmentPlan {
    pub fn constant(label: impl Into<String>, assignment: &[f64], horizon: usize) -> Self {
        Self {
            label: label.into(),
            steps: vec![assignment.to_vec(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn validate(&self, d_a: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Precondition(format!("plan `{}` has horizon 0", self.label)));
        }
        for (k, a) in self.steps.iter().enumerate() {
            if a.len() != d_a {
                return Err(Error::shape(format!("plan `{}` step {k}", self.label), &[d_a], &[a.len()]));
            }
            check_binary(a, &format!("plan `{}` step {k}", self.label))?;
        }
        Ok(())
    }

    /// Active treatment-steps over τ·d_a.
    pub fn intensity(&self) -> f64 {
        let cells: usize = self.steps.iter().map(Vec::len).sum();
        if cells == 0 {
            return 0.0;
        }
        self.steps.iter().flatten().filter(|&&v| v != 0.0).count() as f64 / cells as f64
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Label of a joint arm: "None", a channel name, "Both"/"All", or names joined by "+".
pub fn arm_plan_label(schema: &Schema, arm: usize) -> String {
    let da = schema.d_a();
    let active: Vec<String> = (0..da).filter(|k| arm & (1 << k) != 0).map(|k| capitalize(&schema.a[k].name)).collect();
    match active.len() {
        0 => "None".into(),
        1 => active[0].clone(),
        n if n == da && da == 2 => "Both".into(),
        n if n == da => "All".into(),
        _ => active.join("+"),
    }
}

/// One constant plan per treatment combination, ordered by arm index
/// (None, Chemo, Radio, Both for the simulator schema).
pub fn default_plans(schema: &Schema, horizon: usize) -> Vec<TreatmentPlan> {
    let da = schema.d_a();
    (0..1usize << da)
        .map(|arm| {
            let a: Vec<f64> = (0..da).map(|k| if arm & (1 << k) != 0 { 1.0 } else { 0.0 }).collect();
            TreatmentPlan::constant(arm_plan_label(schema, arm), &a, horizon)
        })
        .collect()
}

/// Column offsets of an encoder input row: x | y | v | a_{t−1}.
#[derive(Clone, Debug)]
pub(crate) struct RowLayout {
    pub dx: usize,
    pub dy: usize,
    pub dv: usize,
    pub width: usize,
    /// (x column, outcome channel, ∂x_norm/∂y_norm, offset) for covariates mirroring an outcome.
    pub tracked: Vec<(usize, usize, f64, f64)>,
}

impl RowLayout {
    pub fn new(schema: &Schema, stats: &NormStats) -> Self {
        let tracked = (0..schema.d_x())
            .filter_map(|i| {
                schema.tracked_outcome(i).map(|k| {
                    // x_norm = (y_norm·σ_y + μ_y − μ_x) / σ_x
                    let scale = stats.y_std[k] / stats.x_std[i];
                    let offset = (stats.y_mean[k] - stats.x_mean[i]) / stats.x_std[i];
                    (i, k, scale, offset)
                })
            })
            .collect();
        Self {
            dx: schema.d_x(),
            dy: schema.d_y(),
            dv: schema.d_v(),
            width: schema.input_width(),
            tracked,
        }
    }

    pub fn is_tracked(&self, i: usize) -> bool {
        self.tracked.iter().any(|t| t.0 == i)
    }

    /// Next input row after predicting `y` under `a`: untracked covariates and
    /// statics carried forward from `prev`.
    pub fn next_row(&self, prev: &[f64], y: &[f64], a: &[f64]) -> Vec<f64> {
        let mut row = prev.to_vec();
        for &(i, k, scale, offset) in &self.tracked {
            row[i] = y[k] * scale + offset;
        }
        row[self.dx..self.dx + self.dy].copy_from_slice(y);
        row[self.dx + self.dy + self.dv..].copy_from_slice(a);
        row
    }
}

fn check_plan_inputs(model: &Model, inputs: &Tensor, plan: &TreatmentPlan) -> Result<()> {
    plan.validate(model.config.d_a)?;
    let s = inputs.shape();
    let w = model.config.encoder.input_width;
    if s.len() != 2 || s[1] != w || s[0] == 0 {
        return Err(Error::shape("rollout history", &[0, w], s));
    }
    if let Some(i) = inputs.first_non_finite() {
        return Err(Error::NonFinite {
            context: "rollout history".into(),
            index: i,
        });
    }
    Ok(())
}

/// Normalized predictions ŷ_{t+1..t+τ} from normalized encoder input rows.
///
/// Each prediction is appended to the history together with the planned
/// treatment before re-encoding; only the receptive field is re-encoded.
pub fn rollout_normalized(
    model: &Model,
    schema: &Schema,
    stats: &NormStats,
    inputs: &Tensor,
    plan: &TreatmentPlan,
) -> Result<Vec<Vec<f64>>> {
    check_plan_inputs(model, inputs, plan)?;
    let layout = RowLayout::new(schema, stats);
    let w = layout.width;
    let rf = model.config.encoder.receptive_field();
    let t = inputs.shape()[0];
    let keep = t.min(rf);
    let mut window: Vec<f64> = inputs.data()[(t - keep) * w..].to_vec();
    let mut out = Vec::with_capacity(plan.horizon());
    for (k, a) in plan.steps.iter().enumerate() {
        let rows = window.len() / w;
        let repr = model.encoder.encode_last(&Tensor::new(&[rows, w], window.clone())?)?;
        let y = model.predict_outcome(&repr, a)?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("rollout step {k}"),
                index: i,
            });
        }
        if k + 1 < plan.horizon() {
            let next = layout.next_row(&window[(rows - 1) * w..], &y, a);
            window.extend_from_slice(&next);
            if rows + 1 > rf {
                window.drain(..w);
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Denormalized rollout under `plan` from normalized input rows.
pub fn rollout(ckpt: &ModelCheckpoint, inputs: &Tensor, plan: &TreatmentPlan) -> Result<Vec<Vec<f64>>> {
    let ys = rollout_normalized(&ckpt.model, &ckpt.schema, &ckpt.normalization, inputs, plan)?;
    Ok(denormalize_outcomes(&ckpt.normalization, ys))
}

pub(crate) fn denormalize_outcomes(stats: &NormStats, ys: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    ys.into_iter()
        .map(|y| y.iter().enumerate().map(|(k, &v)| stats.denorm_y(k, v)).collect())
        .collect()
}

/// Impute and normalize a raw-unit history with the checkpoint statistics,
/// returning the encoder input rows.
pub fn prepare_history(ckpt: &ModelCheckpoint, raw: &TrajectoryRecord) -> Result<Tensor> {
    raw.check(&ckpt.schema)?;
    let ds = Dataset::new(ckpt.schema.clone(), vec![raw.clone()]);
    let ds = zscore_apply(&impute_dataset(&ds)?, &ckpt.normalization)?;
    build_inputs(&ds.records[0], &ckpt.schema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    /// Number of history steps the forecasts start after.
    pub origin: usize,
    pub horizon: usize,
    pub labels: Vec<String>,
    /// `trajectories[p][k]` is the denormalized outcome vector at step k under plan p.
    pub trajectories: Vec<Vec<Vec<f64>>>,
}

/// Roll every plan out from the same history.
pub fn counterfactual_compare(
    ckpt: &ModelCheckpoint,
    inputs: &Tensor,
    plans: &[TreatmentPlan],
) -> Result<CounterfactualResult> {
    let first = plans
        .first()
        .ok_or_else(|| Error::Precondition("counterfactual_compare needs at least one plan".into()))?;
    let horizon = first.horizon();
    if let Some(p) = plans.iter().find(|p| p.horizon() != horizon) {
        return Err(Error::Precondition(format!(
            "plan `{}` has horizon {} but `{}` has {horizon}",
            p.label,
            p.horizon(),
            first.label
        )));
    }
    let trajectories = plans.iter().map(|p| rollout(ckpt, inputs, p)).collect::<Result<_>>()?;
    Ok(CounterfactualResult {
        origin: inputs.shape()[0],
        horizon,
        labels: plans.iter().map(|p| p.label.clone()).collect(),
        trajectories,
    })
}
