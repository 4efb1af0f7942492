//! Causal sequence encoder, outcome head, treatment discriminator, and the
//! recurrent probe decoder, each with hand-written backward passes.
//!
//! The encoder reads one row per step, `z_t = x_t ⊕ y_t ⊕ v ⊕ a_{t−1}`, with
//! a zero treatment vector at step 0, and emits a D-wide representation row
//! that depends only on rows at or before `t`.

mod checkpoint;
mod encoder;
mod gru;
mod linear;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    config_digest, read_checkpoint, read_checkpoint_header, write_checkpoint, BlockInfo, CheckpointHeader, ModelCheckpoint,
    CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC,
};
pub use encoder::{ConvLayer, Encoder, EncoderCache, EncoderConfig};
pub use gru::{GruCache, GruDecoder, PROBE_HIDDEN};
pub use linear::{Linear, Mlp, MlpCache};

use crate::dataio::{Schema, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::numkit::{streams, RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    /// One categorical logit per treatment combination instead of one binary
    /// logit per channel.
    #[serde(default)]
    pub joint: bool,
}

impl DiscriminatorConfig {
    pub fn n_logits(&self, d_a: usize) -> usize {
        if self.joint {
            1 << d_a
        } else {
            d_a
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub d_a: usize,
    pub d_y: usize,
    #[serde(default)]
    pub discriminator: Option<DiscriminatorConfig>,
}

/// Architecture sizes that are not implied by the data schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSizes {
    pub channels: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub repr_dim: usize,
    pub head_hidden: usize,
    pub disc_hidden: usize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        Self {
            channels: 16,
            kernel_size: 2,
            dilations: vec![1, 2, 4],
            repr_dim: 12,
            head_hidden: 24,
            disc_hidden: 24,
        }
    }
}

impl ModelConfig {
    pub fn for_schema(schema: &Schema, sizes: &ModelSizes, discriminator: Option<DiscriminatorConfig>) -> Self {
        Self {
            encoder: EncoderConfig {
                input_width: schema.input_width(),
                channels: sizes.channels,
                kernel_size: sizes.kernel_size,
                dilations: sizes.dilations.clone(),
                repr_dim: sizes.repr_dim,
            },
            head_hidden: sizes.head_hidden,
            d_a: schema.d_a(),
            d_y: schema.d_y(),
            discriminator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head_hidden < 1 || self.d_y < 1 || self.d_a < 1 {
            return Err(Error::Config("head_hidden, d_y and d_a must be >= 1".into()));
        }
        if let Some(d) = &self.discriminator {
            if d.hidden < 1 {
                return Err(Error::Config("discriminator hidden width must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Encoder plus heads; the discriminator exists only for adversarial modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: Mlp,
    pub discriminator: Option<Mlp>,
}

pub(crate) fn check_binary(a: &[f64], what: &str) -> Result<()> {
    if let Some(v) = a.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Precondition(format!("{what} entries must be 0 or 1, got {v}")));
    }
    Ok(())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stream = RngStream::new(seed, streams::INIT);
        let encoder = Encoder::new(config.encoder.clone(), &mut stream)?;
        let d = config.encoder.repr_dim;
        let head = Mlp::new(d + config.d_a, config.head_hidden, config.d_y, &mut stream);
        let discriminator = config
            .discriminator
            .as_ref()
            .map(|dc| Mlp::new(d, dc.hidden, dc.n_logits(config.d_a), &mut stream));
        Ok(Self {
            config,
            encoder,
            head,
            discriminator,
        })
    }

    /// Same architecture, every parameter zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
            discriminator: self.discriminator.as_ref().map(Mlp::zeros_like),
        }
    }

    pub fn repr_dim(&self) -> usize {
        self.config.encoder.repr_dim
    }

    /// Next-step outcome from one representation row and the treatment applied at that step.
    pub fn predict_outcome(&self, repr: &[f64], treatment: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_outcome_cached(repr, treatment)?.0)
    }

    pub(crate) fn head_input(&self, repr: &[f64], treatment: &[f64]) -> Result<Vec<f64>> {
        if repr.len() != self.repr_dim() {
            return Err(Error::shape("outcome head repr", &[self.repr_dim()], &[repr.len()]));
        }
        if treatment.len() != self.config.d_a {
            return Err(Error::shape("outcome head treatment", &[self.config.d_a], &[treatment.len()]));
        }
        check_binary(treatment, "treatment")?;
        let mut x = Vec::with_capacity(repr.len() + treatment.len());
        x.extend_from_slice(repr);
        x.extend_from_slice(treatment);
        Ok(x)
    }

    pub fn predict_outcome_cached(&self, repr: &[f64], treatment: &[f64]) -> Result<(Vec<f64>, MlpCache, Vec<f64>)> {
        let x = self.head_input(repr, treatment)?;
        let (y, cache) = self.head.forward(&x);
        Ok((y, cache, x))
    }

    /// Per-row treatment logits for `[N, D]` representations.
    pub fn discriminate(&self, repr: &Tensor) -> Result<Tensor> {
        let disc = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Precondition("model has no discriminator".into()))?;
        let s = repr.shape();
        if s.len() != 2 || s[1] != self.repr_dim() {
            return Err(Error::shape("discriminator input", &[0, self.repr_dim()], s));
        }
        let mut out = Vec::with_capacity(s[0] * disc.n_out());
        for i in 0..s[0] {
            out.extend(disc.forward(repr.row(i)).0);
        }
        Tensor::new(&[s[0], disc.n_out()], out)
    }

    /// Named parameter blocks in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.named();
        v.extend(self.head.named("head"));
        if let Some(d) = &self.discriminator {
            v.extend(d.named("discriminator"));
        }
        v
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable parameters in the same order as [`Model::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Model {
            encoder,
            head,
            discriminator,
            ..
        } = self;
        let mut v = encoder.tensors_mut();
        v.extend(head.tensors_mut());
        if let Some(d) = discriminator {
            v.extend(d.tensors_mut());
        }
        v
    }

    /// Encoder and outcome head only.
    pub fn predictor_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn param_count_without_discriminator(&self) -> usize {
        let disc: usize = self
            .discriminator
            .as_ref()
            .map(|d| d.tensors().iter().map(|t| t.len()).sum())
            .unwrap_or(0);
        self.param_count() - disc
    }

    /// Round every parameter to the nearest f32 (the storage precision).
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            *t = t.round_to_f32();
        }
    }
}

/// Encoder input rows for a (normalized) record: `[T, d_x + d_y + d_v + d_a]`.
pub fn build_inputs(record: &TrajectoryRecord, schema: &Schema) -> Result<Tensor> {
    let (dx, dy, dv, da) = (schema.d_x(), schema.d_y(), schema.d_v(), schema.d_a());
    if record.v.len() != dv || record.x.len() != record.len * dx || record.a.len() != record.len * da {
        return Err(Error::Schema(format!(
            "record {} does not match the model schema",
            record.patient_id
        )));
    }
    let w = schema.input_width();
    let mut data = Vec::with_capacity(record.len * w);
    for t in 0..record.len {
        data.extend_from_slice(record.x_row(t, dx));
        data.extend_from_slice(record.y_row(t, dy));
        data.extend_from_slice(&record.v);
        if t == 0 {
            data.extend(std::iter::repeat(0.0).take(da));
        } else {
            data.extend_from_slice(record.a_row(t - 1, da));
        }
    }
    Tensor::new(&[record.len, w], data)
}
