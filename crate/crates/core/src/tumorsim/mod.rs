//! Confounded PKPD tumor-growth cohort generator.
//!
//! Daily dynamics per patient:
//!
//! ```text
//! Y_{t+1} = (1 + ρ·ln(K/Y_t) − β_c·C_t − (α_r·d_t + β_r·d_t²) + ε_t) · Y_t
//! C_t     = C_{t−1}·2^(−1/half_life) + dose·[chemo_t]
//! A_t     ~ Bernoulli(σ((γ/D_max)·(D̄_W − D_max/2)))   (chemo and radio drawn independently)
//! ```
//!
//! where `D̄_W` is the mean sphere-equivalent diameter over the last `W`
//! days before `t`. The per-transition noise is stored with each patient so
//! that counterfactual plans can be re-rolled under the same noise.

mod config;
mod oracle;

use serde::{Deserialize, Serialize};

pub use config::{MixturePriors, ParamPrior, SimCohortConfig, TruncNormal};
pub use oracle::{counterfactual_oracle, NoisePolicy};

use crate::dataio::{Dataset, Feature, OneHotGroup, Schema, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::numkit::{sigmoid, streams, RngStream};

pub const N_COMPONENTS: usize = 3;

/// Per-patient PKPD parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// growth rate, 1/day
    pub rho: f64,
    /// carrying capacity, cm³
    pub k: f64,
    /// chemo sensitivity, 1/concentration
    pub beta_c: f64,
    /// radio linear coefficient, 1/Gy
    pub alpha_r: f64,
    /// radio quadratic coefficient, 1/Gy²
    pub beta_r: f64,
    pub mixture_component: usize,
    /// initial volume, cm³
    pub initial_volume: f64,
}

impl PatientParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.k > 0.0 && self.beta_c > 0.0 && self.alpha_r > 0.0 && self.beta_r > 0.0) {
            return Err(Error::Precondition(format!("non-positive patient parameter in {self:?}")));
        }
        if self.mixture_component >= N_COMPONENTS {
            return Err(Error::Precondition(format!(
                "mixture component {} out of range",
                self.mixture_component
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChemoState {
    pub concentration: f64,
}

/// Ground truth kept alongside each simulated record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub patient_id: String,
    pub params: PatientParams,
    /// `noise[t]` perturbs the transition from step t to t+1.
    pub noise: Vec<f64>,
}

/// A simulated cohort: the factual dataset plus per-patient ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SimCohort {
    pub dataset: Dataset,
    pub truth: Vec<SimTruth>,
}

pub fn volume_to_diameter(volume: f64) -> f64 {
    (6.0 * volume.max(0.0) / std::f64::consts::PI).cbrt()
}

pub fn diameter_to_volume(diameter: f64) -> f64 {
    std::f64::consts::PI / 6.0 * diameter.powi(3)
}

/// One day of tumor dynamics, clamped at `y_min`.
pub fn step_tumor(
    volume: f64,
    concentration: f64,
    radio_dose: f64,
    p: &PatientParams,
    noise: f64,
    y_min: f64,
) -> Result<f64> {
    if !(volume > 0.0) {
        return Err(Error::Precondition(format!("tumor volume must be > 0, got {volume}")));
    }
    let factor = 1.0 + p.rho * (p.k / volume).ln()
        - p.beta_c * concentration
        - (p.alpha_r * radio_dose + p.beta_r * radio_dose * radio_dose)
        + noise;
    let next = factor * volume;
    Ok(if next.is_finite() { next.max(y_min) } else { y_min })
}

pub fn decay_and_dose_chemo(state: ChemoState, took_chemo: bool, half_life: f64, dose: f64) -> ChemoState {
    let decayed = state.concentration * 2f64.powf(-1.0 / half_life);
    ChemoState {
        concentration: decayed + if took_chemo { dose } else { 0.0 },
    }
}

/// Assignment probability from the recent diameter history (last `window` entries).
pub fn assignment_probability(diam_history: &[f64], window: usize, gamma: f64, d_max: f64) -> f64 {
    assert!(!diam_history.is_empty(), "diameter history must be non-empty");
    let w = window.max(1).min(diam_history.len());
    let recent = &diam_history[diam_history.len() - w..];
    let mean = recent.iter().sum::<f64>() / w as f64;
    sigmoid(gamma / d_max * (mean - d_max / 2.0))
}

/// Two independent Bernoulli draws (chemo, radio) sharing one probability.
pub fn assign_treatment(
    diam_history: &[f64],
    window: usize,
    gamma: f64,
    d_max: f64,
    stream: &mut RngStream,
) -> (bool, bool) {
    let p = assignment_probability(diam_history, window, gamma, d_max);
    let chemo = stream.bernoulli(p);
    let radio = stream.bernoulli(p);
    (chemo, radio)
}

pub fn sample_patient_params(cfg: &SimCohortConfig, stream: &mut RngStream) -> Result<PatientParams> {
    cfg.priors.validate()?;
    let c = match &cfg.priors.weights {
        Some(w) => {
            let total: f64 = w.iter().sum();
            let u = stream.uniform() * total;
            let mut acc = 0.0;
            let mut pick = N_COMPONENTS - 1;
            for (i, wi) in w.iter().enumerate() {
                acc += wi;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
        None => stream.below(N_COMPONENTS),
    };
    let pr = &cfg.priors;
    let params = PatientParams {
        rho: pr.rho.components[c].sample(stream),
        k: cfg.carrying_capacity(),
        beta_c: pr.beta_c.components[c].sample(stream),
        alpha_r: pr.alpha_r.components[c].sample(stream),
        beta_r: pr.beta_r.components[c].sample(stream),
        mixture_component: c,
        initial_volume: diameter_to_volume(pr.initial_diameter.sample(stream)),
    };
    params.validate()?;
    Ok(params)
}

/// Column layout of simulated cohorts.
pub fn sim_schema() -> Schema {
    Schema {
        x: vec![
            Feature::new("tumor_volume", "cm^3"),
            Feature::new("chemo_concentration", "concentration units"),
        ],
        a: vec![Feature::new("chemo", "flag"), Feature::new("radio", "flag")],
        y: vec![Feature::new("volume", "cm^3")],
        v: (0..N_COMPONENTS)
            .map(|c| Feature::new(format!("component_{c}"), "one-hot"))
            .collect(),
        one_hot_groups: vec![OneHotGroup {
            name: "component".into(),
            columns: (0..N_COMPONENTS).collect(),
        }],
        x_tracks_outcome: vec![Some(0), None],
    }
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:06}")
}

/// Simulate one patient's factual trajectory.
pub fn simulate_patient(cfg: &SimCohortConfig, index: usize) -> Result<(TrajectoryRecord, SimTruth)> {
    let mut stream = RngStream::new(cfg.seed, streams::SIM_PATIENT | index as u64);
    let params = sample_patient_params(cfg, &mut stream)?;
    let t_len = cfg.horizon;
    let noise: Vec<f64> = (0..t_len - 1).map(|_| cfg.noise_std * stream.standard_normal()).collect();

    let mut x = Vec::with_capacity(2 * t_len);
    let mut a = Vec::with_capacity(2 * t_len);
    let mut y = Vec::with_capacity(t_len);
    let mut diameters = Vec::with_capacity(t_len);
    let mut chemo = ChemoState::default();
    let mut vol = params.initial_volume.max(cfg.y_min);
    for t in 0..t_len {
        // X_t carries the concentration left over from the previous day.
        x.push(vol);
        x.push(chemo.concentration);
        y.push(vol);
        diameters.push(volume_to_diameter(vol));
        // decision uses diameters strictly before t (only Y_0 at t = 0)
        let hist = if t == 0 { &diameters[..1] } else { &diameters[..t] };
        let (c, r) = assign_treatment(hist, cfg.window, cfg.gamma, cfg.d_max, &mut stream);
        a.push(if c { 1.0 } else { 0.0 });
        a.push(if r { 1.0 } else { 0.0 });
        chemo = decay_and_dose_chemo(chemo, c, cfg.chemo_half_life, cfg.chemo_dose);
        if t + 1 < t_len {
            let d = if r { cfg.radio_dose } else { 0.0 };
            vol = step_tumor(vol, chemo.concentration, d, &params, noise[t], cfg.y_min)?;
        }
    }
    let mut v = vec![0.0; N_COMPONENTS];
    v[params.mixture_component] = 1.0;
    let pid = patient_id(index);
    let record = TrajectoryRecord {
        patient_id: pid.clone(),
        v,
        mask: vec![true; x.len()],
        x,
        a,
        y,
        len: t_len,
    };
    Ok((
        record,
        SimTruth {
            patient_id: pid,
            params,
            noise,
        },
    ))
}

/// Simulate the factual arm of a cohort; output order follows patient index.
pub fn simulate_cohort(cfg: &SimCohortConfig) -> Result<SimCohort> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut truth = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let (r, t) = simulate_patient(cfg, i)?;
        records.push(r);
        truth.push(t);
    }
    let mut dataset = Dataset::new(sim_schema(), records);
    dataset.provenance = serde_json::json!({
        "generator": "tumorsim",
        "config": cfg,
    });
    Ok(SimCohort { dataset, truth })
}

pub const TRUTH_FILE: &str = "truth.json";

pub fn save_truth(truth: &[SimTruth], dir: &std::path::Path) -> Result<()> {
    let bytes = serde_json::to_vec(truth)?;
    crate::dataio::write_atomic(&dir.join(TRUTH_FILE), &bytes)
}

pub fn load_truth(dir: &std::path::Path) -> Result<Vec<SimTruth>> {
    let p = dir.join(TRUTH_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pooled Pearson correlation between the windowed mean diameter and each
/// treatment indicator, over every assignment in the dataset.
pub fn confounding_correlation(ds: &Dataset, window: usize) -> f64 {
    let dy = ds.schema.d_y();
    let da = ds.schema.d_a();
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for r in &ds.records {
        let diam: Vec<f64> = (0..r.len).map(|t| volume_to_diameter(r.y[t * dy])).collect();
        for t in 0..r.len {
            let hist = if t == 0 { &diam[..1] } else { &diam[..t] };
            let w = window.min(hist.len());
            let mean = hist[hist.len() - w..].iter().sum::<f64>() / w as f64;
            for k in 0..da {
                pairs.push((mean, r.a[t * da + k]));
            }
        }
    }
    pearson(&pairs)
}

pub(crate) fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
