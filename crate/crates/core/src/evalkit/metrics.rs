use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::seqmodel::check_binary;

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("rmse", &[target.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Precondition("rmse of an empty set".into()));
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when precision, recall, or F1 hit a zero denominator and were reported as 0.
    pub degenerate: bool,
}

pub fn classification_metrics(pred: &[f64], truth: &[f64]) -> Result<ClassificationMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape("classification_metrics", &[truth.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Precondition("classification_metrics on empty input".into()));
    }
    check_binary(pred, "predicted label")?;
    check_binary(truth, "label")?;
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let accuracy = (c.tp + c.tn) as f64 / pred.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(ClassificationMetrics {
        confusion: c,
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

fn check_scores(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", &[labels.len()], &[scores.len()]));
    }
    check_binary(labels, "label")?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "auroc scores".into(),
            index: i,
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Precondition("auroc needs both classes".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve by trapezoidal integration over every distinct threshold.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        // one threshold per distinct score: ties move diagonally
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Mann-Whitney U of the positive class divided by N₊·N₋ (ties count one half).
pub fn mann_whitney_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut u = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1.0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 1.0 {
                continue;
            }
            u += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(u / (pos * neg) as f64)
}

pub const ECE_BINS_DEFAULT: usize = 10;

/// Expected calibration error over equal-width probability bins.
pub fn ece(probs: &[f64], labels: &[f64], n_bins: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("ece", &[labels.len()], &[probs.len()]));
    }
    if probs.is_empty() {
        return Err(Error::Precondition("ece of an empty set".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    check_binary(labels, "label")?;
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Precondition(format!("probability {p} outside [0, 1]")));
    }
    let mut count = vec![0usize; n_bins];
    let mut p_sum = vec![0.0; n_bins];
    let mut y_sum = vec![0.0; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        // bins are [k/B, (k+1)/B); the last one is closed
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        p_sum[b] += p;
        y_sum[b] += y;
    }
    let n = probs.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            c / n * (p_sum[b] / c - y_sum[b] / c).abs()
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired t-test of a − b over matched runs (e.g. seeds).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_t_test", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::Precondition("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&d);
    let n = d.len() as f64;
    let df = d.len() - 1;
    let t = if sd > 0.0 {
        mean / (sd / n.sqrt())
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    };
    let p_value = if t.is_infinite() {
        0.0
    } else {
        let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Precondition(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(PairedTTest {
        mean_diff: mean,
        t,
        df,
        p_value,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
