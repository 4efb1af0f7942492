//! Central-difference certification of analytic gradients.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max_i |analytic_i − numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare the analytic gradient returned by `loss_fn` against central
/// differences of its value.
///
/// `loss_fn` maps a flat parameter vector to `(loss, gradient)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (f0, analytic) = loss_fn(params);
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            context: "finite_diff_check base point".into(),
            index: 0,
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("finite_diff_check gradient", &[params.len()], &[analytic.len()]));
    }

    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    let mut worst = 0;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let fp = loss_fn(&probe).0;
        probe[i] = orig - epsilon;
        let fm = loss_fn(&probe).0;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_diff_check probe".into(),
                index: i,
            });
        }
        let num = (fp - fm) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - num).abs() / (a.abs() + num.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_index: worst,
        analytic,
        numeric,
    })
}
