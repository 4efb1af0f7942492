use serde::{Deserialize, Serialize};

use super::{diameter_to_volume, N_COMPONENTS};
use crate::error::{Error, Result};
use crate::numkit::RngStream;

/// Normal distribution truncated to `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncNormal {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncNormal {
    /// Truncated at ±3σ.
    pub fn three_sigma(mean: f64, std: f64) -> Self {
        Self {
            mean,
            std,
            lo: mean - 3.0 * std,
            hi: mean + 3.0 * std,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = self.std > 0.0
            && self.lo.is_finite()
            && self.hi.is_finite()
            && self.lo < self.hi
            && self.mean.is_finite();
        if !ok {
            return Err(Error::Config(format!("degenerate truncated normal for {what}: {self:?}")));
        }
        Ok(())
    }

    /// Rejection sampling; bounds are enforced exactly.
    pub fn sample(&self, stream: &mut RngStream) -> f64 {
        for _ in 0..10_000 {
            let v = self.mean + self.std * stream.standard_normal();
            if v >= self.lo && v <= self.hi {
                return v;
            }
        }
        // interval far in a tail: fall back to a uniform draw inside it
        self.lo + (self.hi - self.lo) * stream.uniform()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamPrior {
    pub components: [TruncNormal; N_COMPONENTS],
}

impl ParamPrior {
    pub fn shared(p: TruncNormal) -> Self {
        Self { components: [p; N_COMPONENTS] }
    }
}

/// Three-component truncated-normal mixture over the patient parameters.
///
/// The default values are shipped defaults for this simulator, not values
/// taken from a published study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixturePriors {
    /// Component weights; uniform when absent.
    #[serde(default)]
    pub weights: Option<[f64; N_COMPONENTS]>,
    pub rho: ParamPrior,
    pub beta_c: ParamPrior,
    pub alpha_r: ParamPrior,
    pub beta_r: ParamPrior,
    /// Initial tumor diameter, cm.
    pub initial_diameter: TruncNormal,
}

impl Default for MixturePriors {
    fn default() -> Self {
        let tn = TruncNormal::three_sigma;
        // component 0: baseline, 1: chemo-responsive, 2: radio-responsive
        Self {
            weights: None,
            rho: ParamPrior::shared(TruncNormal {
                mean: 0.04,
                std: 0.018,
                lo: 0.005,
                hi: 0.095,
            }),
            beta_c: ParamPrior {
                components: [tn(0.012, 0.002), tn(0.024, 0.003), tn(0.012, 0.002)],
            },
            alpha_r: ParamPrior {
                components: [tn(0.035, 0.005), tn(0.035, 0.005), tn(0.07, 0.008)],
            },
            beta_r: ParamPrior {
                components: [tn(0.0035, 0.0005), tn(0.0035, 0.0005), tn(0.007, 0.0008)],
            },
            initial_diameter: TruncNormal {
                mean: 6.5,
                std: 4.0,
                lo: 1.0,
                hi: 12.5,
            },
        }
    }
}

impl MixturePriors {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("rho", &self.rho),
            ("beta_c", &self.beta_c),
            ("alpha_r", &self.alpha_r),
            ("beta_r", &self.beta_r),
        ] {
            for (c, tn) in p.components.iter().enumerate() {
                tn.validate(&format!("{name}[{c}]"))?;
                if tn.lo <= 0.0 {
                    return Err(Error::Config(format!(
                        "{name}[{c}] truncation must stay positive (lo = {})",
                        tn.lo
                    )));
                }
            }
        }
        self.initial_diameter.validate("initial_diameter")?;
        if self.initial_diameter.lo <= 0.0 {
            return Err(Error::Config("initial_diameter must be positive".into()));
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!("invalid component weights {w:?}")));
            }
        }
        Ok(())
    }
}

fn default_noise_std() -> f64 {
    0.01
}
fn default_d_max() -> f64 {
    13.0
}
fn default_half_life() -> f64 {
    1.0
}
fn default_chemo_dose() -> f64 {
    5.0
}
fn default_radio_dose() -> f64 {
    2.0
}
fn default_window() -> usize {
    15
}
fn default_y_min() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCohortConfig {
    pub n_patients: usize,
    /// Trajectory length in days.
    pub horizon: usize,
    /// Confounding strength (dimensionless).
    pub gamma: f64,
    pub seed: u64,
    /// Maximum tumor diameter, cm.
    #[serde(default = "default_d_max")]
    pub d_max: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Chemo half-life, days.
    #[serde(default = "default_half_life")]
    pub chemo_half_life: f64,
    #[serde(default = "default_chemo_dose")]
    pub chemo_dose: f64,
    /// Radiotherapy dose per treated day, Gy.
    #[serde(default = "default_radio_dose")]
    pub radio_dose: f64,
    /// Lookback window for the mean diameter, days.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Volume floor, cm³.
    #[serde(default = "default_y_min")]
    pub y_min: f64,
    #[serde(default)]
    pub priors: MixturePriors,
}

impl SimCohortConfig {
    pub fn new(n_patients: usize, horizon: usize, gamma: f64, seed: u64) -> Self {
        Self {
            n_patients,
            horizon,
            gamma,
            seed,
            d_max: default_d_max(),
            noise_std: default_noise_std(),
            chemo_half_life: default_half_life(),
            chemo_dose: default_chemo_dose(),
            radio_dose: default_radio_dose(),
            window: default_window(),
            y_min: default_y_min(),
            priors: MixturePriors::default(),
        }
    }

    /// K from D_max through the sphere model.
    pub fn carrying_capacity(&self) -> f64 {
        diameter_to_volume(self.d_max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if !(self.d_max > 0.0) {
            return bad("d_max must be > 0");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        if self.window < 1 {
            return bad("window must be >= 1");
        }
        if self.horizon < 2 {
            return bad("horizon must be >= 2");
        }
        if !(self.chemo_half_life > 0.0) {
            return bad("chemo_half_life must be > 0");
        }
        if !(self.chemo_dose >= 0.0 && self.radio_dose >= 0.0) {
            return bad("doses must be >= 0");
        }
        if !(self.y_min > 0.0) {
            return bad("y_min must be > 0");
        }
        self.priors.validate()
    }
}
