use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

impl Feature {
    pub fn new(name: impl Into<String>, unit: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
        }
    }
}

/// A set of static columns that together encode one categorical variable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHotGroup {
    pub name: String,
    /// Indices into the static feature list.
    pub columns: Vec<usize>,
}

/// Column layout shared by every record of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub x: Vec<Feature>,
    pub a: Vec<Feature>,
    pub y: Vec<Feature>,
    pub v: Vec<Feature>,
    #[serde(default)]
    pub one_hot_groups: Vec<OneHotGroup>,
    /// For each time-varying covariate, the outcome channel it mirrors (if
    /// any). Autoregressive rollout refreshes mirrored covariates from the
    /// predicted outcome; all others are carried forward.
    #[serde(default)]
    pub x_tracks_outcome: Vec<Option<usize>>,
}

impl Schema {
    pub fn d_x(&self) -> usize {
        self.x.len()
    }
    pub fn d_a(&self) -> usize {
        self.a.len()
    }
    pub fn d_y(&self) -> usize {
        self.y.len()
    }
    pub fn d_v(&self) -> usize {
        self.v.len()
    }

    /// Width of one encoder input row: X ⊕ Y ⊕ V ⊕ A_prev.
    pub fn input_width(&self) -> usize {
        self.d_x() + self.d_y() + self.d_v() + self.d_a()
    }

    /// Names of the encoder input columns, in input order.
    pub fn input_names(&self) -> Vec<String> {
        self.x
            .iter()
            .map(|f| f.name.clone())
            .chain(self.y.iter().map(|f| f.name.clone()))
            .chain(self.v.iter().map(|f| f.name.clone()))
            .chain(self.a.iter().map(|f| format!("prev_{}", f.name)))
            .collect()
    }

    pub fn is_one_hot_column(&self, v_index: usize) -> bool {
        self.one_hot_groups.iter().any(|g| g.columns.contains(&v_index))
    }

    pub fn tracked_outcome(&self, x_index: usize) -> Option<usize> {
        self.x_tracks_outcome.get(x_index).copied().flatten()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_y() == 0 {
            return Err(Error::Schema("at least one outcome column required".into()));
        }
        for g in &self.one_hot_groups {
            if g.columns.is_empty() || g.columns.iter().any(|&c| c >= self.d_v()) {
                return Err(Error::Schema(format!("one-hot group `{}` has invalid columns", g.name)));
            }
        }
        if !self.x_tracks_outcome.is_empty() && self.x_tracks_outcome.len() != self.d_x() {
            return Err(Error::Schema("x_tracks_outcome length must equal d_x".into()));
        }
        if self.x_tracks_outcome.iter().flatten().any(|&k| k >= self.d_y()) {
            return Err(Error::Schema("x_tracks_outcome refers to a missing outcome".into()));
        }
        let mut names: Vec<&str> = self
            .x
            .iter()
            .chain(&self.a)
            .chain(&self.y)
            .chain(&self.v)
            .map(|f| f.name.as_str())
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schema("duplicate feature names".into()));
        }
        Ok(())
    }
}

/// One patient's static covariates and aligned per-step sequences.
///
/// Sequences are stored row-major: step `t` of `x` is `x[t*d_x..(t+1)*d_x]`.
/// Missing covariates are NaN with a `false` mask entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub patient_id: String,
    pub v: Vec<f64>,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
    pub len: usize,
}

impl TrajectoryRecord {
    pub fn x_row(&self, t: usize, d_x: usize) -> &[f64] {
        &self.x[t * d_x..(t + 1) * d_x]
    }
    pub fn a_row(&self, t: usize, d_a: usize) -> &[f64] {
        &self.a[t * d_a..(t + 1) * d_a]
    }
    pub fn y_row(&self, t: usize, d_y: usize) -> &[f64] {
        &self.y[t * d_y..(t + 1) * d_y]
    }

    pub fn check(&self, schema: &Schema) -> Result<()> {
        let t = self.len;
        let loc = |what: &str| format!("record `{}` {what}", self.patient_id);
        if t == 0 {
            return Err(Error::Schema(loc("has zero length")));
        }
        if self.x.len() != t * schema.d_x()
            || self.mask.len() != t * schema.d_x()
            || self.a.len() != t * schema.d_a()
            || self.y.len() != t * schema.d_y()
        {
            return Err(Error::Schema(loc("has ragged sequences")));
        }
        if self.v.len() != schema.d_v() {
            return Err(Error::Schema(loc("has wrong static width")));
        }
        if let Some(i) = self.a.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Schema(loc(&format!(
                "step {} treatment `{}` is {} (must be 0 or 1)",
                i / schema.d_a().max(1),
                schema.a[i % schema.d_a()].name,
                self.a[i]
            ))));
        }
        for g in &schema.one_hot_groups {
            let s: f64 = g.columns.iter().map(|&c| self.v[c]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Schema(loc(&format!("one-hot group `{}` sums to {s}", g.name))));
            }
        }
        Ok(())
    }

    /// Joint treatment arm index at step `t` (bit k set when channel k is active).
    pub fn arm(&self, t: usize, d_a: usize) -> usize {
        arm_index(self.a_row(t, d_a))
    }
}

pub fn arm_index(a: &[f64]) -> usize {
    a.iter()
        .enumerate()
        .fold(0, |acc, (k, &v)| if v != 0.0 { acc | (1 << k) } else { acc })
}
