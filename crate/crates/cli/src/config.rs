//! Run configuration: one TOML (or JSON) file with a section per command.
//!
//! Unknown keys are rejected everywhere. Every command writes the resolved
//! configuration, including the input paths it used, next to its outputs;
//! rerunning the command with that file as `--config` reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use counterfact_core::dataio::write_atomic;
use counterfact_core::evalkit::{EvalConfig, ProbeConfig};
use counterfact_core::inference::IG_STEPS_DEFAULT;
use counterfact_core::training::TrainConfig;
use counterfact_core::tumorsim::SimCohortConfig;

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Every key accepted in the configuration file, with units and defaults.
pub const CONFIG_KEYS: &str = "\
CONFIG KEYS (TOML; a .json file is read as JSON with the same layout)

[simulate]                     required by `simulate`
  n_patients          count, required
  horizon             trajectory length, days, required (>= 2)
  gamma               confounding strength, dimensionless, required (>= 0)
  seed                integer, required unless --seed is given
  d_max               maximum tumor diameter, cm (13)
  noise_std           multiplicative growth noise sd, dimensionless (0.01)
  chemo_half_life     days (1)
  chemo_dose          concentration units per treated day (5)
  radio_dose          Gy per treated day (2)
  window              lookback for the mean diameter, days (15)
  y_min               volume floor, cm^3 (0.001)
  priors.weights      three mixture weights, dimensionless (uniform)
  priors.<p>.components = [{mean, std, lo, hi}; 3]
                      p = rho (1/day), beta_c (1/(concentration unit * day)),
                      alpha_r (1/Gy), beta_r (1/Gy^2)
  priors.initial_diameter = {mean, std, lo, hi}, cm

[preprocess]                   used by `train`
  split               train/val/test patient fractions ([0.7, 0.15, 0.15])
  split_seed          integer (0)
  min_positivity      smallest acceptable treatment-arm share, fraction (0.01)

[train]                        required by `train`
  mode                none | smmd | grl | cdc, required
  epochs              maximum epochs (100)
  batch_size          patients per minibatch (64)
  learning_rate       Adam step size (0.001)
  weight_decay        L2 coefficient (0)
  lambda_scale        multiplier of the annealed balancing weight (1)
  patience            epochs without validation improvement (10)
  teacher_forcing     bool (true)
  seed                integer (0); --seed overrides
  joint_discriminator categorical discriminator over treatment combinations, bool (false)
  clip_norm           global L2 gradient norm cap (off)
  smmd.subset_size    rows drawn per group (200)
  smmd.grouping       joint | per_channel (joint)
  kernel.mode         median | median_squared_half | fixed (median)
  kernel.sigma        RBF bandwidth, representation units, fixed mode only
  model.channels      encoder width (16)
  model.kernel_size   convolution taps, steps (2)
  model.dilations     dilation per layer, steps ([1, 2, 4])
  model.repr_dim      representation width (12)
  model.head_hidden   outcome head width (24)
  model.disc_hidden   discriminator width (24)

[evaluate]                     used by `evaluate`
  tau_max             longest forecast horizon, steps (6)
  t_min               earliest forecasting origin, steps of history (1)
  ece_bins            calibration bins (10)
  oracle_noise        common | zero (common)

[probe]                        used by `probe`
  epochs              probe training epochs (300)
  learning_rate       Adam step size (0.001)
  batch_size          patients per minibatch (64)
  hidden              recurrent decoder width (25)
  seed                integer (0); --seed overrides

[predict]                      required by `predict` and `attribute`
  target_range        desired outcome range [lo, hi], outcome units, required
  horizon             forecast steps (6)
  target_channel      outcome channel index (0)
  ig_steps            integrated-gradients steps (64)
  top_k               features listed in summaries (5)
  include_phi         write the per-step attribution matrix, bool (false)

[serve]                        used by `serve`
  host                bind address (127.0.0.1)
  port                TCP port, 0 picks a free one (8080)
  cors_origins        browser origins allowed to call the API ([])
  models_dir          directory listed by GET /models (none)

[run]                          input paths and selections; flags override
  command, data, checkpoints, labels, unbalanced, balanced, patient,
  origin (steps of history), plan, gammas, seeds
";

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}
fn default_min_positivity() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_min_positivity")]
    pub min_positivity: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            split: default_split(),
            split_seed: 0,
            min_positivity: default_min_positivity(),
        }
    }
}

fn default_horizon() -> usize {
    6
}
fn default_top_k() -> usize {
    5
}
fn default_ig_steps() -> usize {
    IG_STEPS_DEFAULT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictOptions {
    pub target_range: [f64; 2],
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub target_channel: usize,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub include_phi: bool,
}

fn default_host() -> String {
    "127.0.0.1".into()
}
fn default_port() -> u16 {
    8080
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeOptions {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default)]
    pub cors_origins: Vec<String>,
    #[serde(default)]
    pub models_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            host: default_host(),
            port: default_port(),
            cors_origins: Vec::new(),
            models_dir: None,
        }
    }
}

/// Inputs of a run; command-line flags take precedence over these values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unbalanced: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gammas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimCohortConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<PredictOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serve: Option<ServeOptions>,
}

/// Sections whose `seed` key `--seed` replaces.
const SEEDED_SECTIONS: [&str; 3] = ["simulate", "train", "probe"];

impl RunConfig {
    /// Read a configuration file; `seed` replaces the seed of every seeded
    /// section present, before required keys are checked.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let tree = if is_json {
            serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            let t: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).map_err(|e| CliError::Config(e.to_string()))?
        };
        Self::from_tree(tree, seed)
    }

    pub fn from_toml_str(text: &str, seed: Option<u64>) -> Result<Self> {
        let t: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_tree(serde_json::to_value(t).map_err(|e| CliError::Config(e.to_string()))?, seed)
    }

    fn from_tree(mut tree: Value, seed: Option<u64>) -> Result<Self> {
        if let (Some(seed), Some(root)) = (seed, tree.as_object_mut()) {
            for name in SEEDED_SECTIONS {
                if let Some(Value::Object(section)) = root.get_mut(name) {
                    section.insert("seed".into(), Value::from(seed));
                }
            }
        }
        serde_path_to_error::deserialize(tree).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                CliError::Config(e.inner().to_string())
            } else {
                CliError::Config(format!("[{path}] {}", e.inner()))
            }
        })
    }

    pub fn simulate(&self) -> Result<&SimCohortConfig> {
        self.simulate.as_ref().ok_or_else(|| missing("simulate"))
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| missing("train"))
    }

    pub fn predict(&self) -> Result<&PredictOptions> {
        self.predict.as_ref().ok_or_else(|| missing("predict"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize resolved config: {e}")))
    }

    /// Write the resolved copy into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_atomic(&dir.join(RESOLVED_CONFIG_FILE), self.to_toml()?.as_bytes())?;
        Ok(())
    }
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing section [{section}]"))
}
