use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{Dataset, Schema, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::numkit::{adam_step, streams, AdamConfig, AdamState, RngStream, Tensor};
use crate::seqmodel::{build_inputs, GruDecoder, Model, ModelCheckpoint, PROBE_HIDDEN};

fn default_probe_epochs() -> usize {
    300
}
fn default_probe_lr() -> f64 {
    1e-3
}
fn default_probe_batch() -> usize {
    64
}
fn default_probe_hidden() -> usize {
    PROBE_HIDDEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
    #[serde(default = "default_probe_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: default_probe_epochs(),
            learning_rate: default_probe_lr(),
            batch_size: default_probe_batch(),
            hidden: default_probe_hidden(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.hidden < 1 {
            return Err(Error::Config("probe epochs, batch_size and hidden must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("probe learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Outcome of one frozen-encoder reconstruction probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub variables: Vec<String>,
    /// Masked MSE on the training split after each epoch's updates.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation R² per variable; `None` for variables constant on validation.
    pub r2: Vec<Option<f64>>,
    /// SHA-256 of the encoder parameters, identical before and after probing.
    pub encoder_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub variables: Vec<String>,
    pub unbalanced: ProbeRun,
    pub balanced: ProbeRun,
    /// R²_unbalanced − R²_balanced; positive means balancing lost information.
    pub delta_r2: Vec<Option<f64>>,
    /// Variables left out of ΔR² because they are constant on validation.
    pub excluded: Vec<String>,
}

impl ProbeReport {
    pub fn new(unbalanced: ProbeRun, balanced: ProbeRun) -> Result<Self> {
        let delta_r2 = delta_r2(&unbalanced, &balanced)?;
        let excluded = unbalanced
            .variables
            .iter()
            .zip(&delta_r2)
            .filter(|(_, d)| d.is_none())
            .map(|(v, _)| v.clone())
            .collect();
        Ok(Self {
            variables: unbalanced.variables.clone(),
            unbalanced,
            balanced,
            delta_r2,
            excluded,
        })
    }
}

/// Elementwise R²_a − R²_b.
pub fn delta_r2(unbalanced: &ProbeRun, balanced: &ProbeRun) -> Result<Vec<Option<f64>>> {
    if unbalanced.variables != balanced.variables {
        return Err(Error::Schema("probe reports cover different variables".into()));
    }
    Ok(unbalanced
        .r2
        .iter()
        .zip(&balanced.r2)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        })
        .collect())
}

/// SHA-256 over the encoder's parameter bits.
pub fn encoder_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for t in model.encoder.tensors() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Mean squared error over entries whose mask is set, with its gradient.
pub fn masked_mse_with_grad(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape("masked_mse", &[target.len()], &[pred.len()]));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Precondition("masked_mse with no active entries".into()));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), &m)| {
            if m {
                let r = p - t;
                loss += r * r;
                2.0 * r * inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss * inv, grad))
}

/// Names of the reconstructed variables: time-varying covariates, then statics.
pub fn probe_variables(schema: &Schema) -> Vec<String> {
    schema.x.iter().chain(&schema.v).map(|f| f.name.clone()).collect()
}

struct ProbeSeq {
    repr: Tensor,
    target: Vec<f64>,
    mask: Vec<bool>,
}

fn probe_sequences(model: &Model, ds: &Dataset) -> Result<Vec<ProbeSeq>> {
    let s = &ds.schema;
    let (dx, dv) = (s.d_x(), s.d_v());
    let w = dx + dv;
    ds.records
        .iter()
        .map(|r: &TrajectoryRecord| {
            let repr = model.encoder.encode(&build_inputs(r, s)?)?;
            let mut target = Vec::with_capacity(r.len * w);
            let mut mask = Vec::with_capacity(r.len * w);
            for t in 0..r.len {
                for i in 0..dx {
                    let v = r.x[t * dx + i];
                    let m = r.mask[t * dx + i] && v.is_finite();
                    target.push(if m { v } else { 0.0 });
                    mask.push(m);
                }
                target.extend_from_slice(&r.v);
                mask.extend(std::iter::repeat(true).take(dv));
            }
            Ok(ProbeSeq { repr, target, mask })
        })
        .collect()
}

fn dataset_loss(dec: &GruDecoder, seqs: &[ProbeSeq]) -> Result<f64> {
    let (mut sse, mut n) = (0.0, 0usize);
    for s in seqs {
        let out = dec.reconstruct(&s.repr)?;
        for ((p, t), &m) in out.data().iter().zip(&s.target).zip(&s.mask) {
            if m {
                sse += (p - t) * (p - t);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Precondition("probe split has no observed entries".into()));
    }
    Ok(sse / n as f64)
}

fn per_variable_r2(dec: &GruDecoder, seqs: &[ProbeSeq], width: usize) -> Result<Vec<Option<f64>>> {
    let mut preds = vec![Vec::new(); width];
    let mut truth = vec![Vec::new(); width];
    for s in seqs {
        let out = dec.reconstruct(&s.repr)?;
        for (k, ((p, t), &m)) in out.data().iter().zip(&s.target).zip(&s.mask).enumerate() {
            if m {
                preds[k % width].push(*p);
                truth[k % width].push(*t);
            }
        }
    }
    Ok((0..width)
        .map(|c| {
            let y = &truth[c];
            if y.is_empty() {
                return None;
            }
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
            if sst <= 0.0 {
                return None;
            }
            let sse: f64 = preds[c].iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
            Some(1.0 - sse / sst)
        })
        .collect())
}

/// Train a fresh recurrent decoder to reconstruct covariates and statics from
/// the frozen encoder's representation sequence (normalized datasets).
pub fn reconstruction_probe(
    ckpt: &ModelCheckpoint,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeRun> {
    cfg.validate()?;
    for ds in [train_ds, val_ds] {
        if ds.schema != ckpt.schema {
            return Err(Error::Schema("probe dataset schema differs from the checkpoint".into()));
        }
        if ds.normalization.as_ref() != Some(&ckpt.normalization) {
            return Err(Error::Precondition("probe datasets must use the checkpoint normalization".into()));
        }
    }
    let model = &ckpt.model;
    let hash_before = encoder_hash(model);
    let train = probe_sequences(model, train_ds)?;
    let val = probe_sequences(model, val_ds)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Precondition("probe needs non-empty train and validation splits".into()));
    }
    let width = ckpt.schema.d_x() + ckpt.schema.d_v();
    let mut init = RngStream::new(cfg.seed, streams::PROBE);
    let mut dec = GruDecoder::new(model.repr_dim(), cfg.hidden, width, &mut init);
    let mut opt = AdamState::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &dec.tensors(),
    );
    let mut shuffle = RngStream::new(cfg.seed, streams::PROBE ^ 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let active: usize = chunk.iter().map(|&i| train[i].mask.iter().filter(|&&m| m).count()).sum();
            if active == 0 {
                continue;
            }
            let inv = 1.0 / active as f64;
            let mut grad = dec.zeros_like();
            for &i in chunk {
                let s = &train[i];
                let (out, cache) = dec.forward(&s.repr)?;
                let d: Vec<f64> = out
                    .data()
                    .iter()
                    .zip(&s.target)
                    .zip(&s.mask)
                    .map(|((p, t), &m)| if m { 2.0 * (p - t) * inv } else { 0.0 })
                    .collect();
                dec.backward(&s.repr, &cache, &d, &mut grad)?;
            }
            let g = grad.tensors();
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: 0,
                    message: "non-finite probe gradient".into(),
                });
            }
            adam_step(&mut dec.tensors_mut(), &g, &mut opt)?;
        }
        train_loss.push(dataset_loss(&dec, &train)?);
        val_loss.push(dataset_loss(&dec, &val)?);
    }
    let r2 = per_variable_r2(&dec, &val, width)?;
    let hash_after = encoder_hash(model);
    if hash_before != hash_after {
        return Err(Error::Precondition("encoder parameters changed during probing".into()));
    }
    Ok(ProbeRun {
        variables: probe_variables(&ckpt.schema),
        train_loss,
        val_loss,
        r2,
        encoder_hash: hash_after,
    })
}
