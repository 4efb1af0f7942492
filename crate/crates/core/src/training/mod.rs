//! Joint optimization of the outcome loss and a balancing term, with an
//! annealed weight λ, minibatch Adam, and early stopping on validation RMSE.

mod losses;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use losses::{
    class_weights, focal_loss, focal_loss_with_grad, joint_loss, lambda_schedule, prediction_loss, weighted_bce,
    weighted_bce_with_grad,
};

use crate::balancing::{cdc_loss, discriminator_loss, grl_losses, smmd_loss, KernelConfig, SmmdConfig};
use crate::dataio::{positivity_check, Dataset, NormStats, Schema};
use crate::error::{Error, Result};
use crate::inference::RowLayout;
use crate::numkit::{adam_step, clip_global_norm, streams, AdamConfig, AdamState, RngStream, Tensor};
use crate::seqmodel::{
    build_inputs, config_digest, DiscriminatorConfig, Model, ModelCheckpoint, ModelConfig, ModelSizes,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancingMode {
    None,
    Smmd,
    Grl,
    Cdc,
}

impl BalancingMode {
    pub fn needs_discriminator(self) -> bool {
        matches!(self, BalancingMode::Grl | BalancingMode::Cdc)
    }

    pub fn label(self) -> &'static str {
        match self {
            BalancingMode::None => "none",
            BalancingMode::Smmd => "smmd",
            BalancingMode::Grl => "grl",
            BalancingMode::Cdc => "cdc",
        }
    }
}

fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_lambda_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Maximum number of epochs E.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Patients per minibatch.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub mode: BalancingMode,
    #[serde(default)]
    pub smmd: SmmdConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    /// Multiplies the annealed λ_e.
    #[serde(default = "default_lambda_scale")]
    pub lambda_scale: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_true")]
    pub teacher_forcing: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSizes,
    /// Categorical discriminator over treatment combinations.
    #[serde(default)]
    pub joint_discriminator: bool,
    /// Global L2 gradient clipping for the predictor; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(mode: BalancingMode, seed: u64) -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: 0.0,
            mode,
            smmd: SmmdConfig::default(),
            kernel: KernelConfig::default(),
            lambda_scale: default_lambda_scale(),
            patience: default_patience(),
            teacher_forcing: true,
            seed,
            model: ModelSizes::default(),
            joint_discriminator: false,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.lambda_scale >= 0.0) {
            return Err(Error::Config("lambda_scale must be >= 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        self.smmd.validate()?;
        self.kernel.validate()
    }

    pub fn model_config(&self, schema: &Schema) -> ModelConfig {
        let disc = self.mode.needs_discriminator().then(|| DiscriminatorConfig {
            hidden: self.model.disc_hidden,
            joint: self.joint_discriminator,
        });
        ModelConfig::for_schema(schema, &self.model, disc)
    }
}

/// One patient's tensors for training, in normalized units.
#[derive(Clone, Debug)]
pub struct PreparedPatient {
    pub inputs: Tensor,
    /// y_{t+1} for t = 0 .. T−2, row-major `[T−1, d_y]`.
    pub targets: Vec<f64>,
    /// a_t for t = 0 .. T−2, row-major `[T−1, d_a]`.
    pub treatments: Vec<f64>,
}

impl PreparedPatient {
    pub fn transitions(&self) -> usize {
        self.inputs.shape()[0] - 1
    }
}

/// Prepare every record with at least one transition.
pub fn prepare(ds: &Dataset) -> Result<Vec<PreparedPatient>> {
    let s = &ds.schema;
    let (dy, da) = (s.d_y(), s.d_a());
    ds.records
        .iter()
        .filter(|r| r.len >= 2)
        .map(|r| {
            Ok(PreparedPatient {
                inputs: build_inputs(r, s)?,
                targets: r.y[dy..r.len * dy].to_vec(),
                treatments: r.a[..(r.len - 1) * da].to_vec(),
            })
        })
        .collect()
}

/// Loss values and gradients of one minibatch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub pred_loss: f64,
    /// Balancing term as seen by the encoder (for gradient reversal, −discriminator loss).
    pub bal_loss: f64,
    pub total: f64,
    /// Discriminator's own loss (adversarial modes only).
    pub disc_loss: Option<f64>,
    /// Gradient of `total` for encoder and head; discriminator slot holds
    /// the gradient of its own objective.
    pub grads: Model,
}

/// Balancing settings needed inside a minibatch.
#[derive(Clone, Debug)]
pub struct BalanceSettings {
    pub mode: BalancingMode,
    pub smmd: SmmdConfig,
    pub kernel: KernelConfig,
    pub joint_discriminator: bool,
}

impl From<&TrainConfig> for BalanceSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            mode: c.mode,
            smmd: c.smmd.clone(),
            kernel: c.kernel.clone(),
            joint_discriminator: c.joint_discriminator,
        }
    }
}

/// Forward and backward over one minibatch with teacher forcing.
pub fn batch_objective(
    model: &Model,
    batch: &[&PreparedPatient],
    lambda: f64,
    bal: &BalanceSettings,
    stream: &mut RngStream,
) -> Result<BatchResult> {
    let d = model.repr_dim();
    let dy = model.config.d_y;
    let da = model.config.d_a;
    let mut grads = model.zeros_like();
    let total_elems: usize = batch.iter().map(|p| p.transitions() * dy).sum();
    if total_elems == 0 {
        return Err(Error::Precondition("minibatch without transitions".into()));
    }
    let scale = 1.0 / total_elems as f64;

    let mut caches = Vec::with_capacity(batch.len());
    let mut d_reprs = Vec::with_capacity(batch.len());
    let mut bal_rows = Vec::new();
    let mut bal_treat = Vec::new();
    let mut sse = 0.0;
    for p in batch {
        let (repr, cache) = model.encoder.encode_with_cache(&p.inputs)?;
        let n = p.transitions();
        let mut d_repr = vec![0.0; repr.len()];
        for t in 0..n {
            let a = &p.treatments[t * da..(t + 1) * da];
            let (y, hc, x) = model.predict_outcome_cached(repr.row(t), a)?;
            let mut dout = vec![0.0; dy];
            for k in 0..dy {
                let r = y[k] - p.targets[t * dy + k];
                sse += r * r;
                dout[k] = 2.0 * r * scale;
            }
            let mut dx = vec![0.0; x.len()];
            model.head.backward(&x, &hc, &dout, &mut grads.head, Some(&mut dx));
            for k in 0..d {
                d_repr[t * d + k] += dx[k];
            }
        }
        if bal.mode != BalancingMode::None {
            bal_rows.extend_from_slice(&repr.data()[..n * d]);
            bal_treat.extend_from_slice(&p.treatments[..n * da]);
        }
        caches.push(cache);
        d_reprs.push(d_repr);
    }
    let pred_loss = sse * scale;

    let mut bal_loss = 0.0;
    let mut disc_loss = None;
    if bal.mode != BalancingMode::None {
        let rows = bal_treat.len() / da;
        let repr = Tensor::new(&[rows, d], bal_rows)?;
        let treat = Tensor::new(&[rows, da], bal_treat)?;
        let bal_grad = match bal.mode {
            BalancingMode::Smmd => {
                let out = smmd_loss(&repr, &treat, &bal.smmd, &bal.kernel, stream)?;
                bal_loss = out.loss;
                out.grad
            }
            BalancingMode::Grl => {
                let disc = model.discriminator.as_ref().ok_or_else(no_disc)?;
                let g = grl_losses(&repr, &treat, disc, bal.joint_discriminator)?;
                bal_loss = -g.disc_loss;
                disc_loss = Some(g.disc_loss);
                grads.discriminator = Some(g.disc_grad);
                g.encoder_grad
            }
            BalancingMode::Cdc => {
                let disc = model.discriminator.as_ref().ok_or_else(no_disc)?;
                let dl = discriminator_loss(&repr, &treat, disc, bal.joint_discriminator)?;
                disc_loss = Some(dl.loss);
                grads.discriminator = Some(dl.param_grad);
                let (c, g) = cdc_loss(&repr, disc, bal.joint_discriminator)?;
                bal_loss = c;
                g
            }
            BalancingMode::None => unreachable!(),
        };
        let mut row = 0;
        for (p, d_repr) in batch.iter().zip(d_reprs.iter_mut()) {
            for t in 0..p.transitions() {
                for k in 0..d {
                    d_repr[t * d + k] += lambda * bal_grad.data()[row * d + k];
                }
                row += 1;
            }
        }
    }
    for (cache, d_repr) in caches.iter().zip(&d_reprs) {
        model.encoder.backward(cache, d_repr, &mut grads.encoder)?;
    }
    Ok(BatchResult {
        pred_loss,
        bal_loss,
        total: joint_loss(pred_loss, bal_loss, lambda),
        disc_loss,
        grads,
    })
}

fn no_disc() -> Error {
    Error::Precondition("adversarial balancing needs a discriminator head".into())
}

/// Replace outcome inputs from step 1 on with the model's own one-step
/// predictions (detached), for training without teacher forcing.
fn self_fed_inputs(model: &Model, p: &PreparedPatient, layout: &RowLayout) -> Result<Tensor> {
    let repr = model.encoder.encode(&p.inputs)?;
    let (dx, dy, da) = (layout.dx, layout.dy, model.config.d_a);
    let mut inputs = p.inputs.clone();
    let w = layout.width;
    for t in 0..p.transitions() {
        let y = model.predict_outcome(repr.row(t), &p.treatments[t * da..(t + 1) * da])?;
        let row = &mut inputs.data_mut()[(t + 1) * w..(t + 2) * w];
        row[dx..dx + dy].copy_from_slice(&y);
        for &(i, k, scale, offset) in &layout.tracked {
            row[i] = y[k] * scale + offset;
        }
    }
    Ok(inputs)
}

/// Denormalized one-step-ahead RMSE over every transition (teacher forcing).
pub fn one_step_rmse(model: &Model, ds: &Dataset) -> Result<f64> {
    let stats = ds
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Precondition("one_step_rmse needs a normalized dataset".into()))?;
    let (sse, n) = one_step_sse(model, &prepare(ds)?, stats)?;
    if n == 0 {
        return Err(Error::Precondition("no transitions to evaluate".into()));
    }
    Ok((sse / n as f64).sqrt())
}

fn one_step_sse(model: &Model, patients: &[PreparedPatient], stats: &NormStats) -> Result<(f64, usize)> {
    let (dy, da) = (model.config.d_y, model.config.d_a);
    let mut sse = 0.0;
    let mut n = 0;
    for p in patients {
        let repr = model.encoder.encode(&p.inputs)?;
        for t in 0..p.transitions() {
            let y = model.predict_outcome(repr.row(t), &p.treatments[t * da..(t + 1) * da])?;
            for k in 0..dy {
                let r = stats.denorm_y(k, y[k]) - stats.denorm_y(k, p.targets[t * dy + k]);
                sse += r * r;
                n += 1;
            }
        }
    }
    Ok((sse, n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean over batches of pred + λ·bal.
    pub train_loss: f64,
    pub pred_loss: f64,
    pub bal_loss: f64,
    pub val_rmse: f64,
    /// Wall-clock seconds spent in the epoch. Kept out of the serialized
    /// report so that reports of identical runs are byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: BalancingMode,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub stopped_early: bool,
    pub param_count: usize,
    pub param_count_without_discriminator: usize,
    pub config_digest: String,
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,val_rmse,lambda";

pub fn write_metrics_csv<W: Write>(report: &TrainReport, mut out: W) -> Result<()> {
    let io = |e| Error::io(Path::new("<metrics csv>"), e);
    writeln!(out, "{METRICS_CSV_HEADER}").map_err(io)?;
    for e in &report.epochs {
        writeln!(out, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_rmse, e.lambda).map_err(io)?;
    }
    Ok(())
}

/// Mean encoder input row over the training cohort (normalized space).
pub fn cohort_input_mean(patients: &[PreparedPatient]) -> Vec<f64> {
    let Some(first) = patients.first() else {
        return Vec::new();
    };
    let w = first.inputs.shape()[1];
    let mut sum = vec![0.0; w];
    let mut n = 0usize;
    for p in patients {
        for t in 0..p.inputs.shape()[0] {
            for (s, v) in sum.iter_mut().zip(p.inputs.row(t)) {
                *s += v;
            }
            n += 1;
        }
    }
    sum.into_iter().map(|s| s / n as f64).collect()
}

/// Train on normalized datasets; returns the checkpoint with the lowest validation RMSE.
pub fn train(train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelCheckpoint, TrainReport)> {
    cfg.validate()?;
    let stats = train_ds
        .normalization
        .clone()
        .ok_or_else(|| Error::Precondition("training data must be normalized".into()))?;
    if val_ds.normalization.as_ref() != Some(&stats) {
        return Err(Error::Precondition("validation data must use the training normalization".into()));
    }
    if train_ds.schema != val_ds.schema {
        return Err(Error::Schema("training and validation schemas differ".into()));
    }
    let schema = &train_ds.schema;
    let patients = prepare(train_ds)?;
    if patients.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let val_patients = prepare(val_ds)?;
    if val_patients.is_empty() {
        return Err(Error::Precondition("empty validation set".into()));
    }
    let positivity = positivity_check(train_ds, 0.01);
    for arm in positivity.flagged() {
        tracing::warn!(arm = %arm.arm, fraction = arm.fraction, "weak treatment support in training data");
    }

    let digest = config_digest(cfg)?;
    let mut model = Model::new(cfg.model_config(schema), cfg.seed)?;
    let adam_cfg = AdamConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(adam_cfg.clone(), &predictor_tensors(&model));
    let mut disc_opt = model
        .discriminator
        .as_ref()
        .map(|d| AdamState::new(adam_cfg.clone(), &d.tensors()));
    let mut shuffle = RngStream::new(cfg.seed, streams::SHUFFLE);
    let mut balance = RngStream::new(cfg.seed, streams::BALANCE);
    let settings = BalanceSettings::from(cfg);
    let layout = RowLayout::new(schema, &stats);

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..patients.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lambda = cfg.lambda_scale * lambda_schedule(epoch, cfg.epochs);
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut pred_sum, mut bal_sum, mut n_batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fed: Vec<PreparedPatient>;
            let batch: Vec<&PreparedPatient> = if cfg.teacher_forcing {
                chunk.iter().map(|&i| &patients[i]).collect()
            } else {
                fed = chunk
                    .iter()
                    .map(|&i| {
                        let p = &patients[i];
                        Ok(PreparedPatient {
                            inputs: self_fed_inputs(&model, p, &layout)?,
                            targets: p.targets.clone(),
                            treatments: p.treatments.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                fed.iter().collect()
            };
            let res = batch_objective(&model, &batch, lambda, &settings, &mut balance)?;
            if !res.total.is_finite() || res.disc_loss.is_some_and(|v| !v.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    message: format!("non-finite loss (pred {}, bal {})", res.pred_loss, res.bal_loss),
                });
            }
            let mut grads = res.grads;
            let disc_grad = grads.discriminator.take();
            {
                let mut g = grads.predictor_tensors_mut();
                if let Some(c) = cfg.clip_norm {
                    clip_global_norm(&mut g, c);
                }
                if let Some(i) = g.iter().position(|t| !t.is_finite()) {
                    return Err(Error::Training {
                        epoch,
                        batch: b,
                        message: format!("non-finite gradient in parameter block {i}"),
                    });
                }
                let g: Vec<&Tensor> = g.into_iter().map(|t| &*t).collect();
                adam_step(&mut model.predictor_tensors_mut(), &g, &mut opt)?;
            }
            if let (Some(dg), Some(dopt), Some(disc)) = (disc_grad, disc_opt.as_mut(), model.discriminator.as_mut()) {
                adam_step(&mut disc.tensors_mut(), &dg.tensors(), dopt)?;
            }
            loss_sum += res.total;
            pred_sum += res.pred_loss;
            bal_sum += res.bal_loss;
            n_batches += 1;
        }

        // evaluate at storage precision so a reloaded checkpoint reproduces the number
        let mut snapshot = model.clone();
        snapshot.round_to_f32();
        let (sse, n) = one_step_sse(&snapshot, &val_patients, &stats)?;
        let val_rmse = (sse / n as f64).sqrt();
        if !val_rmse.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: n_batches,
                message: "non-finite validation RMSE".into(),
            });
        }
        let nb = n_batches as f64;
        records.push(EpochRecord {
            epoch,
            lambda,
            train_loss: loss_sum / nb,
            pred_loss: pred_sum / nb,
            bal_loss: bal_sum / nb,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
        });
        tracing::debug!(epoch, lambda, train_loss = loss_sum / nb, val_rmse, "epoch done");
        if best.as_ref().map_or(true, |(v, _, _)| val_rmse < *v) {
            best = Some((val_rmse, epoch, snapshot));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_rmse, best_epoch, best_model) = best.expect("at least one epoch ran");
    let baseline = cohort_input_mean(&patients);
    let report = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        epochs: records,
        best_epoch,
        best_val_rmse,
        stopped_early,
        param_count: best_model.param_count(),
        param_count_without_discriminator: best_model.param_count_without_discriminator(),
        config_digest: digest.clone(),
    };
    let ckpt = ModelCheckpoint::new(best_model, schema.clone(), stats, baseline, digest)?;
    Ok((ckpt, report))
}

fn predictor_tensors(model: &Model) -> Vec<&Tensor> {
    let mut v = model.encoder.tensors();
    v.extend(model.head.tensors());
    v
}
