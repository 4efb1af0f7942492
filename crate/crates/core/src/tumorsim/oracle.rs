use serde::{Deserialize, Serialize};

use super::{decay_and_dose_chemo, step_tumor, ChemoState, SimCohortConfig, SimTruth};
use crate::dataio::TrajectoryRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Reuse the factual noise realization (common-noise counterfactuals).
    #[default]
    Common,
    /// Deterministic dynamics, ε = 0.
    Zero,
}

/// Ground-truth volumes under `plan`, starting from the factual state at step
/// `start`.
///
/// `plan[k]` is the (chemo, radio) assignment at step `start + k`; the result
/// holds Y_{start+1} ..= Y_{start+plan.len()}. The record must be in raw
/// (un-normalized) units with the simulator schema.
pub fn counterfactual_oracle(
    record: &TrajectoryRecord,
    truth: Option<&SimTruth>,
    start: usize,
    plan: &[Vec<f64>],
    cfg: &SimCohortConfig,
    noise: NoisePolicy,
) -> Result<Vec<f64>> {
    let truth = truth.ok_or_else(|| {
        Error::MissingTruth(format!("record `{}` has no stored parameters or noise", record.patient_id))
    })?;
    if truth.patient_id != record.patient_id {
        return Err(Error::MissingTruth(format!(
            "truth for `{}` paired with record `{}`",
            truth.patient_id, record.patient_id
        )));
    }
    if start >= record.len {
        return Err(Error::Precondition(format!("start step {start} beyond record length {}", record.len)));
    }
    if noise == NoisePolicy::Common && start + plan.len() > truth.noise.len() {
        return Err(Error::MissingTruth(format!(
            "record `{}` stores noise for {} transitions; plan needs {}",
            record.patient_id,
            truth.noise.len(),
            start + plan.len()
        )));
    }
    // X = (volume, carried-over concentration), Y = volume
    let mut vol = record.y[start];
    let mut chemo = ChemoState {
        concentration: record.x[start * 2 + 1],
    };
    let mut out = Vec::with_capacity(plan.len());
    for (k, a) in plan.iter().enumerate() {
        if a.len() != 2 || a.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Precondition(format!("plan step {k} is not a (chemo, radio) flag pair")));
        }
        chemo = decay_and_dose_chemo(chemo, a[0] != 0.0, cfg.chemo_half_life, cfg.chemo_dose);
        let d = if a[1] != 0.0 { cfg.radio_dose } else { 0.0 };
        let eps = match noise {
            NoisePolicy::Common => truth.noise[start + k],
            NoisePolicy::Zero => 0.0,
        };
        vol = step_tumor(vol, chemo.concentration, d, &truth.params, eps, cfg.y_min)?;
        out.push(vol);
    }
    Ok(out)
}
