use serde::{Deserialize, Serialize};

use super::{check_plan_inputs, RowLayout, TreatmentPlan};
use crate::error::{Error, Result};
use crate::numkit::{softmax, Tensor};
use crate::seqmodel::{EncoderCache, MlpCache, ModelCheckpoint};

pub const IG_STEPS_DEFAULT: usize = 64;
pub const IG_STEPS_VERIFY: usize = 256;
pub const IG_STEPS_MIN: usize = 8;
/// Relative completeness tolerance at the verification step count.
pub const COMPLETENESS_REL_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IgConfig {
    /// Riemann steps m.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Outcome channel whose prediction is attributed.
    #[serde(default)]
    pub target_channel: usize,
}

fn default_steps() -> usize {
    IG_STEPS_DEFAULT
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: IG_STEPS_DEFAULT,
            target_channel: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub name: String,
    pub raw: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub plan_label: String,
    pub target_channel: usize,
    pub input_names: Vec<String>,
    /// `phi[j][i]`: contribution of input column i (summed over history steps) to prediction step j.
    pub phi: Vec<Vec<f64>>,
    /// Column mean of `phi` over prediction steps.
    pub omega_raw: Vec<f64>,
    /// softmax(`omega_raw`).
    pub omega: Vec<f64>,
    pub baseline: String,
    pub steps: usize,
    /// f(input) − f(baseline) − Σ_i φ_i per prediction step.
    pub completeness_gap: Vec<f64>,
    /// f(input) − f(baseline) per prediction step.
    pub output_delta: Vec<f64>,
}

impl AttributionReport {
    /// Features sorted by decreasing normalized weight (ties by column order).
    pub fn top(&self, k: usize) -> Vec<FeatureWeight> {
        let mut idx: Vec<usize> = (0..self.omega.len()).collect();
        idx.sort_by(|&a, &b| self.omega[b].total_cmp(&self.omega[a]).then(a.cmp(&b)));
        idx.into_iter()
            .take(k)
            .map(|i| FeatureWeight {
                name: self.input_names[i].clone(),
                raw: self.omega_raw[i],
                weight: self.omega[i],
            })
            .collect()
    }

    /// Largest |gap| relative to |Δf| (+1e-6 absolute slack folded in).
    pub fn completeness_ok(&self, rel_tol: f64) -> bool {
        self.completeness_gap
            .iter()
            .zip(&self.output_delta)
            .all(|(g, d)| g.abs() <= rel_tol * d.abs() + 1e-6)
    }
}

/// Integrated gradients with the midpoint Riemann rule.
///
/// `grad_fn` returns, at a point, the gradient of every output with respect
/// to the input. The result holds one attribution vector per output.
pub fn integrated_gradients_fn<F>(input: &[f64], baseline: &[f64], steps: usize, grad_fn: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<Vec<f64>>>,
{
    if steps < IG_STEPS_MIN {
        return Err(Error::Config(format!("IG needs at least {IG_STEPS_MIN} steps, got {steps}")));
    }
    if input.len() != baseline.len() {
        return Err(Error::shape("IG baseline", &[input.len()], &[baseline.len()]));
    }
    let n = input.len();
    let diff: Vec<f64> = input.iter().zip(baseline).map(|(x, b)| x - b).collect();
    let mut acc: Option<Vec<Vec<f64>>> = None;
    let mut point = vec![0.0; n];
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        for i in 0..n {
            point[i] = baseline[i] + alpha * diff[i];
        }
        let grads = grad_fn(&point)?;
        let acc = acc.get_or_insert_with(|| vec![vec![0.0; n]; grads.len()]);
        if grads.len() != acc.len() {
            return Err(Error::shape("IG output count", &[acc.len()], &[grads.len()]));
        }
        for (a, g) in acc.iter_mut().zip(&grads) {
            if g.len() != n {
                return Err(Error::shape("IG gradient", &[n], &[g.len()]));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("IG gradient at path step {s}"),
                    index: i,
                });
            }
            for (ai, gi) in a.iter_mut().zip(g) {
                *ai += gi;
            }
        }
    }
    let inv = 1.0 / steps as f64;
    Ok(acc
        .unwrap_or_default()
        .into_iter()
        .map(|a| a.iter().zip(&diff).map(|(g, d)| g * inv * d).collect())
        .collect())
}

/// ω_raw = mean over prediction steps of φ; ω = softmax(ω_raw).
pub fn aggregate_attribution(phi: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = phi
        .first()
        .ok_or_else(|| Error::Precondition("aggregate_attribution on empty φ".into()))?;
    let w = first.len();
    if w == 0 || phi.iter().any(|r| r.len() != w) {
        return Err(Error::Precondition("φ rows must be non-empty and equally wide".into()));
    }
    let inv = 1.0 / phi.len() as f64;
    let raw: Vec<f64> = (0..w).map(|i| phi.iter().map(|r| r[i]).sum::<f64>() * inv).collect();
    let omega = softmax(&raw);
    Ok((raw, omega))
}

struct StepTape {
    start: usize,
    len: usize,
    cache: EncoderCache,
    head_cache: MlpCache,
    head_x: Vec<f64>,
}

/// Forward rollout that keeps what the backward pass needs.
struct Tape {
    rows: Vec<f64>,
    steps: Vec<StepTape>,
    outputs: Vec<Vec<f64>>,
}

struct Chain<'a> {
    ckpt: &'a ModelCheckpoint,
    layout: RowLayout,
    plan: &'a TreatmentPlan,
    rf: usize,
    /// History rows entering the chain.
    l0: usize,
}

impl Chain<'_> {
    fn forward(&self, history: &[f64]) -> Result<Tape> {
        let model = &self.ckpt.model;
        let w = self.layout.width;
        let tau = self.plan.horizon();
        let mut rows = Vec::with_capacity((self.l0 + tau) * w);
        rows.extend_from_slice(history);
        let mut steps = Vec::with_capacity(tau);
        let mut outputs = Vec::with_capacity(tau);
        for (k, a) in self.plan.steps.iter().enumerate() {
            let len = self.l0 + k;
            let start = len.saturating_sub(self.rf);
            let window = Tensor::new(&[len - start, w], rows[start * w..len * w].to_vec())?;
            let (repr, cache) = model.encoder.encode_with_cache(&window)?;
            let (y, head_cache, head_x) = model.predict_outcome_cached(repr.row(len - start - 1), a)?;
            if k + 1 < tau {
                let next = self.layout.next_row(&rows[(len - 1) * w..len * w], &y, a);
                rows.extend_from_slice(&next);
            }
            steps.push(StepTape {
                start,
                len,
                cache,
                head_cache,
                head_x,
            });
            outputs.push(y);
        }
        Ok(Tape { rows, steps, outputs })
    }

    /// ∂ŷ_j[channel] / ∂history for every prediction step j.
    fn gradients(&self, tape: &Tape, channel: usize) -> Result<Vec<Vec<f64>>> {
        let model = &self.ckpt.model;
        let l = &self.layout;
        let w = l.width;
        let dy_w = l.dy;
        let d = model.repr_dim();
        let mut enc_scratch = model.encoder.zeros_like();
        let mut head_scratch = model.head.zeros_like();
        let n_rows = tape.rows.len() / w;
        let mut out = Vec::with_capacity(tape.steps.len());
        for j in 0..tape.steps.len() {
            let mut drows = vec![0.0; n_rows * w];
            let mut dys = vec![vec![0.0; dy_w]; j + 1];
            dys[j][channel] = 1.0;
            for k in (0..=j).rev() {
                if k < j {
                    // row l0+k was built from ŷ_k and the previous row
                    let r = self.l0 + k;
                    let (head, tail) = drows.split_at_mut(r * w);
                    let dr = &tail[..w];
                    let prev = &mut head[(r - 1) * w..];
                    for (kk, v) in dys[k].iter_mut().enumerate() {
                        *v += dr[l.dx + kk];
                    }
                    for &(i, kk, scale, _) in &l.tracked {
                        dys[k][kk] += dr[i] * scale;
                    }
                    for i in 0..l.dx {
                        if !l.is_tracked(i) {
                            prev[i] += dr[i];
                        }
                    }
                    let v0 = l.dx + l.dy;
                    for c in v0..v0 + l.dv {
                        prev[c] += dr[c];
                    }
                }
                let st = &tape.steps[k];
                let mut dx = vec![0.0; st.head_x.len()];
                model
                    .head
                    .backward(&st.head_x, &st.head_cache, &dys[k], &mut head_scratch, Some(&mut dx));
                let rows = st.len - st.start;
                let mut d_repr = vec![0.0; rows * d];
                d_repr[(rows - 1) * d..].copy_from_slice(&dx[..d]);
                let dwin = model.encoder.backward(&st.cache, &d_repr, &mut enc_scratch)?;
                for (dst, src) in drows[st.start * w..st.len * w].iter_mut().zip(dwin.data()) {
                    *dst += src;
                }
            }
            drows.truncate(self.l0 * w);
            out.push(drows);
        }
        Ok(out)
    }
}

/// Integrated gradients of each predicted step of `plan` with respect to the
/// normalized history rows, using the checkpoint's cohort-mean baseline.
///
/// History rows outside the encoder's receptive field cannot influence the
/// predictions and receive zero attribution.
pub fn integrated_gradients(
    ckpt: &ModelCheckpoint,
    inputs: &Tensor,
    plan: &TreatmentPlan,
    cfg: &IgConfig,
) -> Result<AttributionReport> {
    let model = &ckpt.model;
    check_plan_inputs(model, inputs, plan)?;
    if cfg.target_channel >= model.config.d_y {
        return Err(Error::Config(format!(
            "attribution target channel {} out of range (d_y = {})",
            cfg.target_channel, model.config.d_y
        )));
    }
    let layout = RowLayout::new(&ckpt.schema, &ckpt.normalization);
    let w = layout.width;
    if ckpt.ig_baseline.len() != w {
        return Err(Error::shape("IG baseline", &[w], &[ckpt.ig_baseline.len()]));
    }
    let rf = model.config.encoder.receptive_field();
    let t = inputs.shape()[0];
    let l0 = t.min(rf);
    let history = &inputs.data()[(t - l0) * w..];
    let baseline: Vec<f64> = (0..l0).flat_map(|_| ckpt.ig_baseline.iter().copied()).collect();
    let chain = Chain {
        ckpt,
        layout,
        plan,
        rf,
        l0,
    };
    let channel = cfg.target_channel;
    let full = integrated_gradients_fn(history, &baseline, cfg.steps, |p| {
        let tape = chain.forward(p)?;
        chain.gradients(&tape, channel)
    })?;
    let phi: Vec<Vec<f64>> = full
        .iter()
        .map(|f| (0..w).map(|i| (0..l0).map(|r| f[r * w + i]).sum()).collect())
        .collect();
    let f_in = chain.forward(history)?.outputs;
    let f_base = chain.forward(&baseline)?.outputs;
    let output_delta: Vec<f64> = f_in.iter().zip(&f_base).map(|(a, b)| a[channel] - b[channel]).collect();
    let completeness_gap: Vec<f64> = phi
        .iter()
        .zip(&output_delta)
        .map(|(row, delta)| delta - row.iter().sum::<f64>())
        .collect();
    let (omega_raw, omega) = aggregate_attribution(&phi)?;
    let report = AttributionReport {
        plan_label: plan.label.clone(),
        target_channel: channel,
        input_names: ckpt.schema.input_names(),
        phi,
        omega_raw,
        omega,
        baseline: "training-cohort mean of each input column (normalized units)".into(),
        steps: cfg.steps,
        completeness_gap,
        output_delta,
    };
    if cfg.steps >= IG_STEPS_VERIFY && !report.completeness_ok(COMPLETENESS_REL_TOL) {
        tracing::warn!(gaps = ?report.completeness_gap, "integrated gradients completeness outside tolerance");
    }
    Ok(report)
}
