use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, NormStats};
use super::record::{arm_index, Schema, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::numkit::RngStream;

// ---------------------------------------------------------------------------
// Imputation
// ---------------------------------------------------------------------------

/// Forward-fill each covariate, then back-fill any leading gap.
///
/// The observation mask is left untouched so imputed cells stay auditable.
pub fn impute_locf_nocb(record: &TrajectoryRecord, schema: &Schema) -> Result<TrajectoryRecord> {
    let dx = schema.d_x();
    let mut out = record.clone();
    for i in 0..dx {
        let first = (0..record.len).find(|&t| record.mask[t * dx + i] && !record.x[t * dx + i].is_nan());
        let Some(first) = first else {
            return Err(Error::Imputation {
                record: record.patient_id.clone(),
                feature: schema.x[i].name.clone(),
            });
        };
        let mut last = record.x[first * dx + i];
        for t in 0..record.len {
            let k = t * dx + i;
            if record.mask[k] && !record.x[k].is_nan() {
                last = record.x[k];
            } else {
                // before `first` this is the back-filled value
                out.x[k] = last;
            }
        }
    }
    Ok(out)
}

pub fn impute_dataset(ds: &Dataset) -> Result<Dataset> {
    let mut out = ds.clone();
    out.records = ds
        .records
        .iter()
        .map(|r| impute_locf_nocb(r, &ds.schema))
        .collect::<Result<_>>()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Z-score
// ---------------------------------------------------------------------------

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let vals: Vec<f64> = values.inspect(|v| {
        n += 1;
        sum += v;
    })
    .collect();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

/// Fit per-feature population mean/σ on a (training) dataset.
///
/// One-hot static columns keep μ = 0, σ = 1.
pub fn zscore_fit(train: &Dataset) -> Result<NormStats> {
    if train.normalization.is_some() {
        return Err(Error::Precondition("zscore_fit called on an already normalized dataset".into()));
    }
    let s = &train.schema;
    let (dx, dy, dv) = (s.d_x(), s.d_y(), s.d_v());
    let mut stats = NormStats::identity(s);
    for i in 0..dx {
        let (m, sd) = mean_std(train.records.iter().flat_map(|r| {
            (0..r.len).filter_map(move |t| {
                let k = t * dx + i;
                (r.mask[k] && !r.x[k].is_nan()).then(|| r.x[k])
            })
        }));
        stats.x_mean[i] = m;
        stats.x_std[i] = sd;
    }
    for k in 0..dy {
        let (m, sd) = mean_std(train.records.iter().flat_map(|r| (0..r.len).map(move |t| r.y[t * dy + k])));
        stats.y_mean[k] = m;
        stats.y_std[k] = sd;
    }
    for j in 0..dv {
        if s.is_one_hot_column(j) {
            continue;
        }
        let (m, sd) = mean_std(train.records.iter().map(|r| r.v[j]));
        stats.v_mean[j] = m;
        stats.v_std[j] = sd;
    }
    Ok(stats)
}

pub fn zscore_apply(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if !stats.matches(&ds.schema) {
        return Err(Error::Schema("normalization stats do not match dataset schema".into()));
    }
    if ds.normalization.is_some() {
        return Err(Error::Precondition("dataset is already normalized".into()));
    }
    let s = &ds.schema;
    let (dx, dy) = (s.d_x(), s.d_y());
    let mut out = ds.clone();
    for r in &mut out.records {
        for (k, v) in r.x.iter_mut().enumerate() {
            let i = k % dx;
            *v = (*v - stats.x_mean[i]) / stats.x_std[i];
        }
        for (k, v) in r.y.iter_mut().enumerate() {
            let i = k % dy;
            *v = (*v - stats.y_mean[i]) / stats.y_std[i];
        }
        for (j, v) in r.v.iter_mut().enumerate() {
            *v = (*v - stats.v_mean[j]) / stats.v_std[j];
        }
    }
    out.normalization = Some(stats.clone());
    Ok(out)
}

/// Undo [`zscore_apply`].
pub fn zscore_invert(ds: &Dataset) -> Result<Dataset> {
    let Some(stats) = ds.normalization.clone() else {
        return Err(Error::Precondition("dataset is not normalized".into()));
    };
    let s = &ds.schema;
    let (dx, dy) = (s.d_x(), s.d_y());
    let mut out = ds.clone();
    for r in &mut out.records {
        for (k, v) in r.x.iter_mut().enumerate() {
            let i = k % dx;
            *v = *v * stats.x_std[i] + stats.x_mean[i];
        }
        for (k, v) in r.y.iter_mut().enumerate() {
            let i = k % dy;
            *v = *v * stats.y_std[i] + stats.y_mean[i];
        }
        for (j, v) in r.v.iter_mut().enumerate() {
            *v = *v * stats.v_std[j] + stats.v_mean[j];
        }
    }
    out.normalization = None;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rolling-origin windows
// ---------------------------------------------------------------------------

/// A forecasting origin inside one record.
///
/// The history covers steps `0..origin`; the first forecast target is step
/// `origin`, reached under the treatment taken at step `origin - 1`.
#[derive(Clone, Copy, Debug)]
pub struct HistoryWindow<'a> {
    pub record: &'a TrajectoryRecord,
    pub origin: usize,
    pub tau_max: usize,
}

impl<'a> HistoryWindow<'a> {
    pub fn new(record: &'a TrajectoryRecord, origin: usize, tau_max: usize) -> Result<Self> {
        if origin == 0 || origin + tau_max > record.len {
            return Err(Error::Precondition(format!(
                "window origin {origin} with horizon {tau_max} does not fit a record of length {}",
                record.len
            )));
        }
        Ok(Self {
            record,
            origin,
            tau_max,
        })
    }

    /// Whole record as history, no factual future.
    pub fn full(record: &'a TrajectoryRecord) -> Self {
        Self {
            record,
            origin: record.len,
            tau_max: 0,
        }
    }

    /// Copy of the record truncated to the observable history.
    pub fn history(&self, schema: &Schema) -> TrajectoryRecord {
        truncate_record(self.record, self.origin, schema)
    }

    /// Factual treatments a_{origin-1 .. origin-1+tau}.
    pub fn factual_plan(&self, schema: &Schema, tau: usize) -> Vec<Vec<f64>> {
        let da = schema.d_a();
        (0..tau)
            .map(|k| self.record.a_row(self.origin - 1 + k, da).to_vec())
            .collect()
    }

    /// Factual outcomes y_{origin .. origin+tau}.
    pub fn targets(&self, schema: &Schema, tau: usize) -> Vec<Vec<f64>> {
        let dy = schema.d_y();
        (0..tau)
            .map(|k| self.record.y_row(self.origin + k, dy).to_vec())
            .collect()
    }
}

pub fn truncate_record(r: &TrajectoryRecord, len: usize, schema: &Schema) -> TrajectoryRecord {
    let (dx, da, dy) = (schema.d_x(), schema.d_a(), schema.d_y());
    TrajectoryRecord {
        patient_id: r.patient_id.clone(),
        v: r.v.clone(),
        x: r.x[..len * dx].to_vec(),
        a: r.a[..len * da].to_vec(),
        y: r.y[..len * dy].to_vec(),
        mask: r.mask[..len * dx].to_vec(),
        len,
    }
}

/// One window per origin in `t_min ..= T - tau_max`.
pub fn rolling_origin_windows(record: &TrajectoryRecord, tau_max: usize, t_min: usize) -> Result<Vec<HistoryWindow<'_>>> {
    if tau_max < 1 {
        return Err(Error::Precondition("tau_max must be >= 1".into()));
    }
    let t_min = t_min.max(1);
    if record.len <= tau_max {
        return Ok(Vec::new());
    }
    Ok((t_min..=record.len - tau_max)
        .map(|origin| HistoryWindow {
            record,
            origin,
            tau_max,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Patient-level split
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, ratios: [f64; 3], stream: &mut RngStream) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if n < nonzero {
        return Err(Error::Precondition(format!(
            "{n} patients cannot fill {nonzero} non-empty partitions"
        )));
    }
    let mut n_train = (ratios[0] * n as f64).round() as usize;
    let mut n_val = (ratios[1] * n as f64).round() as usize;
    // every partition with a positive ratio gets at least one patient
    if ratios[0] > 0.0 {
        n_train = n_train.max(1);
    }
    if ratios[1] > 0.0 {
        n_val = n_val.max(1);
    }
    if ratios[2] > 0.0 {
        while n_train + n_val >= n {
            if n_train >= n_val && n_train > 1 {
                n_train -= 1;
            } else {
                n_val -= 1;
            }
        }
    } else {
        n_val = n - n_train.min(n);
    }
    let mut order: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut order);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment { train, val, test })
}

pub fn split_patients(ds: &Dataset, ratios: [f64; 3], stream: &mut RngStream) -> Result<(Dataset, Dataset, Dataset)> {
    let a = split_indices(ds.len(), ratios, stream)?;
    Ok((ds.subset(&a.train), ds.subset(&a.val), ds.subset(&a.test)))
}

// ---------------------------------------------------------------------------
// Positivity
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSupport {
    pub arm: String,
    pub count: usize,
    pub fraction: f64,
    pub zero_support: bool,
    pub below_minimum: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub total_steps: usize,
    pub min_fraction: f64,
    pub arms: Vec<ArmSupport>,
}

impl PositivityReport {
    pub fn flagged(&self) -> impl Iterator<Item = &ArmSupport> {
        self.arms.iter().filter(|a| a.zero_support || a.below_minimum)
    }
}

pub fn arm_label(schema: &Schema, arm: usize) -> String {
    schema
        .a
        .iter()
        .enumerate()
        .map(|(k, f)| format!("{}={}", f.name, (arm >> k) & 1))
        .collect::<Vec<_>>()
        .join(",")
}

/// Count assigned steps per joint treatment arm and flag thin support.
pub fn positivity_check(ds: &Dataset, min_fraction: f64) -> PositivityReport {
    let da = ds.schema.d_a();
    let total: usize = ds.records.iter().map(|r| r.len).sum();
    if total == 0 {
        return PositivityReport {
            total_steps: 0,
            min_fraction,
            arms: Vec::new(),
        };
    }
    let mut counts: BTreeMap<usize, usize> = (0..1usize << da).map(|a| (a, 0)).collect();
    for r in &ds.records {
        for t in 0..r.len {
            *counts.entry(arm_index(r.a_row(t, da))).or_default() += 1;
        }
    }
    let arms = counts
        .into_iter()
        .map(|(arm, count)| {
            let fraction = count as f64 / total as f64;
            ArmSupport {
                arm: arm_label(&ds.schema, arm),
                count,
                fraction,
                zero_support: count == 0,
                below_minimum: fraction < min_fraction,
            }
        })
        .collect();
    PositivityReport {
        total_steps: total,
        min_fraction,
        arms,
    }
}
