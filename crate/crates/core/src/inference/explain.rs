use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AttributionReport, CounterfactualResult, TreatmentPlan};
use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::seqmodel::ModelCheckpoint;

/// Weights of the plan-preference heuristic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreferenceWeights {
    /// Fraction of forecast steps inside the target range.
    pub in_range: f64,
    /// One minus the trajectory variance relative to the most variable plan.
    pub stability: f64,
    /// One minus the endpoint distance from the range center relative to the farthest plan.
    pub endpoint: f64,
    /// Penalty on active treatment-steps / (τ·d_a).
    pub intensity: f64,
}

impl Default for PreferenceWeights {
    fn default() -> Self {
        Self {
            in_range: 0.4,
            stability: 0.2,
            endpoint: 0.2,
            intensity: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanPreference {
    pub label: String,
    /// Integer percent; all plans sum to 100.
    pub score: u32,
    pub raw: f64,
}

/// Last value and change over the encoder window of one input column, in data units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub name: String,
    pub unit: String,
    pub last: f64,
    pub change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSection {
    pub title: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub provider: String,
    /// Target context, influential variables, trajectory comparison, preference distribution.
    pub sections: Vec<ExplanationSection>,
    pub preferences: Vec<PlanPreference>,
}

/// Everything an explanation provider may draw on.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationContext {
    pub outcome_name: String,
    pub outcome_unit: String,
    /// Observed target-channel outcomes in data units.
    pub history: Vec<f64>,
    pub features: Vec<FeatureSummary>,
    pub result: CounterfactualResult,
    pub plans: Vec<TreatmentPlan>,
    pub attribution: AttributionReport,
    pub target_range: [f64; 2],
    pub top_k: usize,
    pub weights: PreferenceWeights,
}

impl ExplanationContext {
    /// Build the context from a checkpoint and normalized history rows.
    pub fn from_checkpoint(
        ckpt: &ModelCheckpoint,
        inputs: &Tensor,
        result: CounterfactualResult,
        plans: Vec<TreatmentPlan>,
        attribution: AttributionReport,
        target_range: [f64; 2],
    ) -> Result<Self> {
        let s = &ckpt.schema;
        let st = &ckpt.normalization;
        let (dx, dy, dv) = (s.d_x(), s.d_y(), s.d_v());
        let w = s.input_width();
        if inputs.shape() != [inputs.shape()[0], w] || inputs.shape()[0] == 0 {
            return Err(Error::shape("explanation history", &[0, w], inputs.shape()));
        }
        let t = inputs.shape()[0];
        let span = t.min(ckpt.model.config.encoder.receptive_field());
        let denorm = |c: usize, v: f64| -> f64 {
            if c < dx {
                st.denorm_x(c, v)
            } else if c < dx + dy {
                st.denorm_y(c - dx, v)
            } else if c < dx + dy + dv {
                v * st.v_std[c - dx - dy] + st.v_mean[c - dx - dy]
            } else {
                v
            }
        };
        let units: Vec<String> = s
            .x
            .iter()
            .chain(&s.y)
            .chain(&s.v)
            .chain(&s.a)
            .map(|f| f.unit.clone())
            .collect();
        let features = s
            .input_names()
            .into_iter()
            .enumerate()
            .map(|(c, name)| {
                let last = denorm(c, inputs.at2(t - 1, c));
                let first = denorm(c, inputs.at2(t - span, c));
                FeatureSummary {
                    name,
                    unit: units[c].clone(),
                    last,
                    change: last - first,
                }
            })
            .collect();
        let ch = attribution.target_channel;
        let history = (0..t).map(|r| st.denorm_y(ch, inputs.at2(r, dx + ch))).collect();
        Ok(Self {
            outcome_name: s.y[ch].name.clone(),
            outcome_unit: s.y[ch].unit.clone(),
            history,
            features,
            result,
            plans,
            attribution,
            target_range,
            top_k: 5,
            weights: PreferenceWeights::default(),
        })
    }
}

/// Source of natural-language explanations.
pub trait ExplanationProvider: Send + Sync {
    fn name(&self) -> &str;
    fn explain(&self, ctx: &ExplanationContext) -> Result<Explanation>;
}

/// Deterministic fixed-template generator.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateProvider;

impl ExplanationProvider for TemplateProvider {
    fn name(&self) -> &str {
        "template"
    }

    fn explain(&self, ctx: &ExplanationContext) -> Result<Explanation> {
        template_explanation(ctx)
    }
}

fn check_range(r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
        return Err(Error::Precondition(format!(
            "target range must satisfy lo < hi, got [{}, {}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

/// Integer percentages by largest-remainder rounding; ties go to the earlier index.
fn largest_remainder(shares: &[f64]) -> Vec<u32> {
    let total: f64 = shares.iter().sum();
    let n = shares.len();
    if n == 0 {
        return Vec::new();
    }
    let quotas: Vec<f64> = if total > 0.0 {
        shares.iter().map(|s| 100.0 * s / total).collect()
    } else {
        vec![100.0 / n as f64; n]
    };
    let mut out: Vec<u32> = quotas.iter().map(|q| q.floor() as u32).collect();
    let assigned: u32 = out.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(100usize.saturating_sub(assigned as usize)) {
        out[i] += 1;
    }
    out
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Heuristic preference over plans, as integer percentages summing to 100.
///
/// Raw score: w_in·(fraction in range) + w_stab·(1 − var/max var) +
/// w_end·(1 − dist/max dist) − w_int·intensity. Raw scores are shifted so
/// the lowest is zero; if all tie, the split is uniform.
pub fn preference_scores(
    result: &CounterfactualResult,
    plans: &[TreatmentPlan],
    channel: usize,
    target_range: [f64; 2],
    weights: &PreferenceWeights,
) -> Result<Vec<PlanPreference>> {
    check_range(target_range)?;
    if plans.len() != result.trajectories.len() || plans.is_empty() {
        return Err(Error::Precondition("plans and trajectories must align and be non-empty".into()));
    }
    let series: Vec<Vec<f64>> = result
        .trajectories
        .iter()
        .map(|tr| tr.iter().map(|y| y[channel]).collect())
        .collect();
    if series.iter().any(|s| s.is_empty()) {
        return Err(Error::Precondition("empty trajectory".into()));
    }
    let [lo, hi] = target_range;
    let center = 0.5 * (lo + hi);
    let vars: Vec<f64> = series.iter().map(|s| variance(s)).collect();
    let dists: Vec<f64> = series.iter().map(|s| (s[s.len() - 1] - center).abs()).collect();
    let max_var = vars.iter().cloned().fold(0.0, f64::max);
    let max_dist = dists.iter().cloned().fold(0.0, f64::max);
    let rel = |v: f64, m: f64| if m > 0.0 { v / m } else { 0.0 };
    let raw: Vec<f64> = series
        .iter()
        .zip(plans)
        .enumerate()
        .map(|(p, (s, plan))| {
            let inside = s.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / s.len() as f64;
            weights.in_range * inside + weights.stability * (1.0 - rel(vars[p], max_var))
                + weights.endpoint * (1.0 - rel(dists[p], max_dist))
                - weights.intensity * plan.intensity()
        })
        .collect();
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = raw.iter().map(|r| r - min).collect();
    let scores = largest_remainder(&shifted);
    Ok(plans
        .iter()
        .zip(scores)
        .zip(raw)
        .map(|((p, score), raw)| PlanPreference {
            label: p.label.clone(),
            score,
            raw,
        })
        .collect())
}

fn trend_word(change: f64, last: f64) -> &'static str {
    let tol = 1e-2 * last.abs().max(1e-9);
    if change > tol {
        "rising"
    } else if change < -tol {
        "falling"
    } else {
        "stable"
    }
}

fn fmt_unit(unit: &str) -> String {
    if unit.is_empty() {
        String::new()
    } else {
        format!(" {unit}")
    }
}

/// Four-section deterministic explanation.
pub fn template_explanation(ctx: &ExplanationContext) -> Result<Explanation> {
    let ch = ctx.attribution.target_channel;
    let prefs = preference_scores(&ctx.result, &ctx.plans, ch, ctx.target_range, &ctx.weights)?;
    let unit = fmt_unit(&ctx.outcome_unit);
    let [lo, hi] = ctx.target_range;

    let mut context = format!(
        "Target: keep {} within [{lo:.3}, {hi:.3}]{unit} over the next {} steps.",
        ctx.outcome_name, ctx.result.horizon
    );
    if let (Some(first), Some(last)) = (ctx.history.first(), ctx.history.last()) {
        let where_ = if *last < lo {
            "below"
        } else if *last > hi {
            "above"
        } else {
            "inside"
        };
        write!(
            context,
            " The history covers {} steps; the last observed value is {last:.3}{unit} ({where_} the range, {} since the first step at {first:.3}).",
            ctx.history.len(),
            trend_word(last - first, *last)
        )
        .expect("write to String");
    }

    let mut vars = format!(
        "Most influential inputs for the {} forecast under plan {} (integrated gradients, softmax-normalized):",
        ctx.outcome_name, ctx.attribution.plan_label
    );
    for (rank, fw) in ctx.attribution.top(ctx.top_k).iter().enumerate() {
        let detail = ctx
            .features
            .iter()
            .find(|f| f.name == fw.name)
            .map(|f| {
                format!(
                    ", last {:.3}{} ({})",
                    f.last,
                    fmt_unit(&f.unit),
                    trend_word(f.change, f.last)
                )
            })
            .unwrap_or_default();
        write!(vars, " {}. {} (weight {:.3}{detail});", rank + 1, fw.name, fw.weight).expect("write to String");
    }

    let mut traj = String::from("Predicted trajectories:");
    for (label, tr) in ctx.result.labels.iter().zip(&ctx.result.trajectories) {
        let s: Vec<f64> = tr.iter().map(|y| y[ch]).collect();
        let inside = s.iter().filter(|&&v| v >= lo && v <= hi).count();
        write!(
            traj,
            " {label}: {:.3} to {:.3}{unit}, {inside}/{} steps in range;",
            s[0],
            s[s.len() - 1],
            s.len()
        )
        .expect("write to String");
    }

    let mut pref = String::from("Preference distribution:");
    for p in &prefs {
        write!(pref, " {} {}%;", p.label, p.score).expect("write to String");
    }
    write!(
        pref,
        " Scores weigh time in range ({:.2}), trajectory stability ({:.2}), endpoint distance to the range center ({:.2}) and treatment burden ({:.2}); among equal outcomes the least intensive plan ranks first.",
        ctx.weights.in_range, ctx.weights.stability, ctx.weights.endpoint, ctx.weights.intensity
    )
    .expect("write to String");

    let section = |title: &str, text: String| ExplanationSection {
        title: title.into(),
        text,
    };
    Ok(Explanation {
        provider: "template".into(),
        sections: vec![
            section("Target context", context),
            section("Influential variables", vars),
            section("Trajectory comparison", traj),
            section("Preference distribution", pref),
        ],
        preferences: prefs,
    })
}
