//! Metrics and probes: RMSE, classification metrics, AUROC, ECE, rolling-origin
//! multi-horizon evaluation, counterfactual error against the simulator oracle,
//! the frozen-encoder reconstruction probe, and representation export.

mod metrics;
mod probe;

pub use metrics::{
    auroc, classification_metrics, ece, mann_whitney_auc, mean_sd, paired_t_test, rmse, ClassificationMetrics,
    Confusion, PairedTTest, ECE_BINS_DEFAULT,
};
pub use probe::{
    delta_r2, encoder_hash, masked_mse_with_grad, probe_variables, reconstruction_probe, ProbeConfig, ProbeReport,
    ProbeRun,
};

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::{rolling_origin_windows, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::inference::{default_plans, rollout_normalized, TreatmentPlan};
use crate::numkit::Tensor;
use crate::seqmodel::{build_inputs, ModelCheckpoint};
use crate::tumorsim::{counterfactual_oracle, NoisePolicy, SimCohortConfig, SimTruth};

fn default_tau_max() -> usize {
    6
}
fn default_t_min() -> usize {
    1
}
fn default_ece_bins() -> usize {
    ECE_BINS_DEFAULT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Longest forecast horizon τ_max (steps).
    #[serde(default = "default_tau_max")]
    pub tau_max: usize,
    /// Earliest forecasting origin (history steps).
    #[serde(default = "default_t_min")]
    pub t_min: usize,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    /// Noise realization used by the counterfactual oracle.
    #[serde(default)]
    pub oracle_noise: NoisePolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau_max: default_tau_max(),
            t_min: default_t_min(),
            ece_bins: default_ece_bins(),
            oracle_noise: NoisePolicy::Common,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_max < 1 {
            return Err(Error::Config("tau_max must be >= 1".into()));
        }
        if self.t_min < 1 {
            return Err(Error::Config("t_min must be >= 1".into()));
        }
        if self.ece_bins < 1 {
            return Err(Error::Config("ece_bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Binary-classification block of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationBlock {
    pub metrics: ClassificationMetrics,
    pub auroc: f64,
    pub threshold: f64,
}

/// Threshold probabilities and compute the classification block.
pub fn classification_block(probs: &[f64], labels: &[f64], threshold: f64) -> Result<ClassificationBlock> {
    let pred: Vec<f64> = probs.iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect();
    Ok(ClassificationBlock {
        metrics: classification_metrics(&pred, labels)?,
        auroc: auroc(probs, labels)?,
        threshold,
    })
}

/// Counterfactual error per plan and horizon against the simulator oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRmse {
    pub plans: Vec<String>,
    /// `per_plan[p][k]`: RMSE at horizon k+1 under plan p.
    pub per_plan: Vec<Vec<f64>>,
    /// Pooled over plans, per horizon.
    pub pooled: Vec<f64>,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau_max: usize,
    /// `horizon_rmse[k]`: factual RMSE at horizon k+1, outcome units.
    pub horizon_rmse: Vec<f64>,
    pub windows: usize,
    pub counterfactual: Option<CounterfactualRmse>,
    pub classification: Option<ClassificationBlock>,
    pub ece: Option<f64>,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    /// Every reported number is finite.
    pub fn check_finite(&self) -> Result<()> {
        let mut all: Vec<f64> = self.horizon_rmse.clone();
        if let Some(c) = &self.counterfactual {
            all.extend(c.per_plan.iter().flatten());
            all.extend(&c.pooled);
        }
        if let Some(c) = &self.classification {
            let m = &c.metrics;
            all.extend([m.accuracy, m.precision, m.recall, m.f1, c.auroc]);
        }
        all.extend(self.ece);
        match all.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                context: "evaluation report".into(),
                index: i,
            }),
            None => Ok(()),
        }
    }
}

fn check_eval_inputs<'a>(ckpt: &ModelCheckpoint, ds: &'a Dataset) -> Result<&'a NormStats> {
    if ds.schema != ckpt.schema {
        return Err(Error::Schema("evaluation dataset schema differs from the checkpoint".into()));
    }
    match &ds.normalization {
        Some(s) if *s == ckpt.normalization => Ok(s),
        _ => Err(Error::Precondition("evaluation data must use the checkpoint normalization".into())),
    }
}

fn rows_prefix(inputs: &Tensor, n: usize) -> Result<Tensor> {
    let w = inputs.shape()[1];
    Tensor::new(&[n, w], inputs.data()[..n * w].to_vec())
}

/// Rolling-origin factual RMSE per horizon (denormalized, all outcome channels pooled).
///
/// Every origin in `t_min ..= T − tau_max` contributes to every horizon, so
/// the horizons are compared on the same windows.
pub fn horizon_rmse(ckpt: &ModelCheckpoint, ds: &Dataset, tau_max: usize, t_min: usize) -> Result<(Vec<f64>, usize)> {
    let stats = check_eval_inputs(ckpt, ds)?;
    let s = &ckpt.schema;
    let dy = s.d_y();
    let mut sse = vec![0.0; tau_max];
    let mut count = 0usize;
    for r in &ds.records {
        let windows = rolling_origin_windows(r, tau_max, t_min)?;
        if windows.is_empty() {
            continue;
        }
        let inputs = build_inputs(r, s)?;
        for w in windows {
            let plan = TreatmentPlan {
                label: "factual".into(),
                steps: w.factual_plan(s, tau_max),
            };
            let pred = rollout_normalized(&ckpt.model, s, stats, &rows_prefix(&inputs, w.origin)?, &plan)?;
            for (k, (p, t)) in pred.iter().zip(w.targets(s, tau_max)).enumerate() {
                for c in 0..dy {
                    let e = stats.denorm_y(c, p[c]) - stats.denorm_y(c, t[c]);
                    sse[k] += e * e;
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Precondition(format!(
            "no record is long enough for horizon {tau_max} from origin {t_min}"
        )));
    }
    let n = (count * dy) as f64;
    Ok((sse.into_iter().map(|v| (v / n).sqrt()).collect(), count))
}

/// Counterfactual RMSE of constant plans against the simulator oracle.
///
/// `normalized` and `raw` hold the same patients in the same order; `raw`
/// supplies the factual state the oracle starts from.
pub fn counterfactual_rmse(
    ckpt: &ModelCheckpoint,
    normalized: &Dataset,
    raw: &Dataset,
    truth: &[SimTruth],
    sim: &SimCohortConfig,
    cfg: &EvalConfig,
) -> Result<CounterfactualRmse> {
    cfg.validate()?;
    let stats = check_eval_inputs(ckpt, normalized)?;
    if raw.records.len() != normalized.records.len() {
        return Err(Error::Precondition("raw and normalized datasets differ in size".into()));
    }
    if ckpt.schema.d_y() != 1 {
        return Err(Error::Schema("counterfactual oracle covers a single outcome".into()));
    }
    let by_id: HashMap<&str, &SimTruth> = truth.iter().map(|t| (t.patient_id.as_str(), t)).collect();
    let s = &ckpt.schema;
    let plans = default_plans(s, cfg.tau_max);
    let mut sse = vec![vec![0.0; cfg.tau_max]; plans.len()];
    let mut count = 0usize;
    for (r, raw_r) in normalized.records.iter().zip(&raw.records) {
        if r.patient_id != raw_r.patient_id {
            return Err(Error::Precondition(format!(
                "record order mismatch: `{}` vs `{}`",
                r.patient_id, raw_r.patient_id
            )));
        }
        let windows = rolling_origin_windows(r, cfg.tau_max, cfg.t_min)?;
        if windows.is_empty() {
            continue;
        }
        let t = by_id.get(r.patient_id.as_str()).copied();
        let inputs = build_inputs(r, s)?;
        for w in windows {
            let hist = rows_prefix(&inputs, w.origin)?;
            for (p, plan) in plans.iter().enumerate() {
                let pred = rollout_normalized(&ckpt.model, s, stats, &hist, plan)?;
                let truth_y = counterfactual_oracle(raw_r, t, w.origin - 1, &plan.steps, sim, cfg.oracle_noise)?;
                for (k, (y, o)) in pred.iter().zip(&truth_y).enumerate() {
                    let e = stats.denorm_y(0, y[0]) - o;
                    sse[p][k] += e * e;
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Precondition("no window fits the counterfactual horizon".into()));
    }
    let n = count as f64;
    let per_plan: Vec<Vec<f64>> = sse.iter().map(|row| row.iter().map(|v| (v / n).sqrt()).collect()).collect();
    let pooled = (0..cfg.tau_max)
        .map(|k| (sse.iter().map(|row| row[k]).sum::<f64>() / (n * plans.len() as f64)).sqrt())
        .collect();
    Ok(CounterfactualRmse {
        plans: plans.into_iter().map(|p| p.label).collect(),
        per_plan,
        pooled,
        windows: count,
    })
}

/// Oracle inputs for counterfactual evaluation on simulated data.
pub struct OracleData<'a> {
    pub raw: &'a Dataset,
    pub truth: &'a [SimTruth],
    pub sim: &'a SimCohortConfig,
}

/// Factual multi-horizon evaluation plus, on simulated data, counterfactual error.
pub fn evaluate(
    ckpt: &ModelCheckpoint,
    ds: &Dataset,
    oracle: Option<OracleData<'_>>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let (horizon_rmse, windows) = horizon_rmse(ckpt, ds, cfg.tau_max, cfg.t_min)?;
    let counterfactual = oracle
        .map(|o| counterfactual_rmse(ckpt, ds, o.raw, o.truth, o.sim, cfg))
        .transpose()?;
    let report = EvalReport {
        tau_max: cfg.tau_max,
        horizon_rmse,
        windows,
        counterfactual,
        classification: None,
        ece: None,
        seed,
        config_digest: ckpt.train_config_digest.clone(),
    };
    report.check_finite()?;
    Ok(report)
}

/// `model,tau_1..tau_n` with one row per labelled horizon vector.
pub fn write_horizon_csv<W: Write>(rows: &[(String, Vec<f64>)], out: W) -> Result<()> {
    let n = rows.first().map(|r| r.1.len()).unwrap_or(0);
    if rows.iter().any(|r| r.1.len() != n) {
        return Err(Error::Precondition("horizon rows differ in length".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    header.extend((1..=n).map(|k| format!("tau_{k}")));
    w.write_record(&header)?;
    for (label, vals) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("horizon csv", e))?;
    Ok(())
}

/// Per-horizon mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub model: String,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub seeds: usize,
}

pub fn summarize_seeds(model: &str, runs: &[Vec<f64>]) -> Result<HorizonSummary> {
    let n = runs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Precondition("no runs to summarize".into()))?;
    if runs.iter().any(|r| r.len() != n) {
        return Err(Error::Precondition("runs differ in horizon count".into()));
    }
    let (mean, sd) = (0..n)
        .map(|k| mean_sd(&runs.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .unzip();
    Ok(HorizonSummary {
        model: model.to_string(),
        mean,
        sd,
        seeds: runs.len(),
    })
}

/// `model,tau_1..tau_n` with `mean ± sd` cells.
pub fn write_summary_csv<W: Write>(rows: &[HorizonSummary], out: W) -> Result<()> {
    let n = rows.first().map(|r| r.mean.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    header.extend((1..=n).map(|k| format!("tau_{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.model.clone()];
        rec.extend(r.mean.iter().zip(&r.sd).map(|(m, s)| format!("{m:.4} ± {s:.4}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("summary csv", e))?;
    Ok(())
}

/// Header of the representation export: `patient_id, t, B_1..B_D`, treatments, statics.
pub fn representation_header(ckpt: &ModelCheckpoint) -> Vec<String> {
    let mut h = vec!["patient_id".to_string(), "t".to_string()];
    h.extend((1..=ckpt.model.repr_dim()).map(|i| format!("B_{i}")));
    h.extend(ckpt.schema.a.iter().map(|f| f.name.clone()));
    h.extend(ckpt.schema.v.iter().map(|f| f.name.clone()));
    h
}

/// One CSV row per (patient, step): the representation B_t, the treatment
/// taken at step t, and the static covariates in data units.
pub fn export_representations<W: Write>(ckpt: &ModelCheckpoint, ds: &Dataset, out: W) -> Result<usize> {
    let stats = check_eval_inputs(ckpt, ds)?;
    let s = &ckpt.schema;
    let da = s.d_a();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(representation_header(ckpt))?;
    let mut rows = 0;
    for r in &ds.records {
        if r.len == 0 {
            continue;
        }
        let repr = ckpt.model.encoder.encode(&build_inputs(r, s)?)?;
        let statics: Vec<String> = r
            .v
            .iter()
            .enumerate()
            .map(|(i, v)| (v * stats.v_std[i] + stats.v_mean[i]).to_string())
            .collect();
        for t in 0..r.len {
            let mut rec = vec![r.patient_id.clone(), t.to_string()];
            rec.extend(repr.row(t).iter().map(|v| v.to_string()));
            rec.extend(r.a_row(t, da).iter().map(|v| v.to_string()));
            rec.extend(statics.iter().cloned());
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io("representation csv", e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests;
