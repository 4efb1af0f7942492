//! Distribution alignment over latent rows grouped by treatment: RBF kernel,
//! median-heuristic bandwidth, the unbiased MMD² U-statistic on random
//! fixed-size subsets, and the discriminator-based alternatives.

mod adversarial;

use serde::{Deserialize, Serialize};

pub use adversarial::{cdc_loss, discriminator_loss, grl_losses, DiscriminatorLoss, GrlLosses};

use crate::dataio::arm_index;
use crate::error::{Error, Result};
use crate::numkit::{RngStream, Tensor};

/// Smallest bandwidth ever used.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// σ = sqrt(median pairwise Euclidean distance).
    Median,
    /// σ² = median(squared distance) / 2.
    MedianSquaredHalf,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub mode: BandwidthMode,
    /// Used only in `fixed` mode.
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            mode: BandwidthMode::Median,
            sigma: None,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            mode: BandwidthMode::Fixed,
            sigma: Some(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == BandwidthMode::Fixed && !matches!(self.sigma, Some(s) if s > 0.0) {
            return Err(Error::Config("fixed kernel bandwidth requires sigma > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One group per treatment combination (2^d_a groups).
    Joint,
    /// Treated vs untreated, separately for every channel.
    PerChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmmdConfig {
    /// Rows drawn from each group per pair (N_s).
    pub subset_size: usize,
    pub grouping: Grouping,
}

impl Default for SmmdConfig {
    fn default() -> Self {
        Self {
            subset_size: 200,
            grouping: Grouping::Joint,
        }
    }
}

impl SmmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subset_size < 2 {
            return Err(Error::Config("smmd subset_size must be >= 2".into()));
        }
        Ok(())
    }
}

pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp()
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        s += d * d;
    }
    s
}

/// Median of pairwise distances with the pair(s) that define it.
struct MedianPick {
    value: f64,
    pairs: Vec<(usize, usize)>,
}

fn median_pairwise(points: &[&[f64]], squared: bool) -> Result<MedianPick> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Precondition(format!("median bandwidth needs >= 2 points, got {n}")));
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for p in 0..n {
        for q in p + 1..n {
            let d2 = sq_dist(points[p], points[q]);
            all.push((if squared { d2 } else { d2.sqrt() }, p, q));
        }
    }
    let m = all.len();
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.partial_cmp(b).expect("finite distances");
    let hi = m / 2;
    let (_, &mut upper, _) = all.select_nth_unstable_by(hi, cmp);
    if m % 2 == 1 {
        return Ok(MedianPick {
            value: upper.0,
            pairs: vec![(upper.1, upper.2)],
        });
    }
    // the lower middle is the maximum of the left partition
    let lower = *all[..hi]
        .iter()
        .max_by(|a, b| cmp(a, b))
        .expect("non-empty left partition");
    Ok(MedianPick {
        value: 0.5 * (lower.0 + upper.0),
        pairs: vec![(lower.1, lower.2), (upper.1, upper.2)],
    })
}

/// σ = sqrt(median pairwise Euclidean distance), floored at [`SIGMA_FLOOR`].
pub fn median_bandwidth(points: &[&[f64]]) -> Result<f64> {
    let m = median_pairwise(points, false)?;
    Ok(m.value.sqrt().max(SIGMA_FLOOR))
}

/// σ = sqrt(median squared distance / 2), floored at [`SIGMA_FLOOR`].
pub fn median_sq_half_bandwidth(points: &[&[f64]]) -> Result<f64> {
    let m = median_pairwise(points, true)?;
    Ok((m.value / 2.0).sqrt().max(SIGMA_FLOOR))
}

/// Unbiased MMD² between two equal-size row sets with a given bandwidth.
pub fn mmd2_u(si: &Tensor, sj: &Tensor, sigma: f64) -> Result<f64> {
    let (a, b) = (rows_of(si)?, rows_of(sj)?);
    check_pair(&a, &b)?;
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!("kernel bandwidth must be > 0, got {sigma}")));
    }
    Ok(mmd2_core(&a, &b, sigma, None))
}

fn rows_of(t: &Tensor) -> Result<Vec<&[f64]>> {
    if t.shape().len() != 2 {
        return Err(Error::Precondition("expected a [N, D] tensor".into()));
    }
    Ok((0..t.shape()[0]).map(|i| t.row(i)).collect())
}

fn check_pair(a: &[&[f64]], b: &[&[f64]]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("mmd2_u subset sizes", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::Precondition("mmd2_u needs subsets of size >= 2".into()));
    }
    if a.iter().chain(b).any(|r| r.len() != a[0].len()) {
        return Err(Error::Precondition("mmd2_u rows differ in width".into()));
    }
    Ok(())
}

/// Gradient sinks for [`mmd2_core`]: `(d pooled rows, d sigma)`.
struct MmdGrad {
    rows: Vec<Vec<f64>>,
    sigma: f64,
}

/// Three-term estimator over pooled rows `a ⊕ b`. When `grad` is given,
/// accumulates ∂/∂row for every pooled row and ∂/∂σ.
fn mmd2_core(a: &[&[f64]], b: &[&[f64]], sigma: f64, mut grad: Option<&mut MmdGrad>) -> f64 {
    let n = a.len();
    let nf = n as f64;
    let within = 2.0 / (nf * (nf - 1.0));
    let cross = -2.0 / (nf * nf);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let pooled: Vec<&[f64]> = a.iter().chain(b).copied().collect();
    // kernel sums kept per block so identical sets cancel exactly
    let (mut s_ii, mut s_jj, mut s_ij) = (0.0, 0.0, 0.0);
    for p in 0..2 * n {
        for q in p + 1..2 * n {
            let d2 = sq_dist(pooled[p], pooled[q]);
            let k = (-d2 * inv2s2).exp();
            let coef = match (p < n, q < n) {
                (true, true) => {
                    s_ii += k;
                    within
                }
                (false, false) => {
                    s_jj += k;
                    within
                }
                _ => {
                    s_ij += k;
                    cross
                }
            };
            if let Some(g) = grad.as_deref_mut() {
                let gk = coef * k;
                let s = gk / (sigma * sigma);
                for i in 0..pooled[p].len() {
                    let diff = pooled[p][i] - pooled[q][i];
                    g.rows[p][i] -= s * diff;
                    g.rows[q][i] += s * diff;
                }
                g.sigma += gk * d2 / (sigma * sigma * sigma);
            }
        }
    }
    let pairs_within = nf * (nf - 1.0);
    2.0 * s_ii / pairs_within + 2.0 * s_jj / pairs_within - 2.0 * s_ij / (nf * nf)
}

/// Value and row gradients of MMD² with the bandwidth chosen per `kernel`.
///
/// For median modes the bandwidth's own dependence on the rows is included.
fn mmd2_with_grad(a: &[&[f64]], b: &[&[f64]], kernel: &KernelConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    check_pair(a, b)?;
    let pooled: Vec<&[f64]> = a.iter().chain(b).copied().collect();
    let width = a[0].len();
    let (sigma, pick, squared) = match kernel.mode {
        BandwidthMode::Fixed => (kernel.sigma.unwrap_or(0.0), None, false),
        BandwidthMode::Median => {
            let m = median_pairwise(&pooled, false)?;
            (m.value.sqrt(), Some(m), false)
        }
        BandwidthMode::MedianSquaredHalf => {
            let m = median_pairwise(&pooled, true)?;
            ((m.value / 2.0).sqrt(), Some(m), true)
        }
    };
    if kernel.mode == BandwidthMode::Fixed && !(sigma > 0.0) {
        return Err(Error::Config("fixed kernel bandwidth requires sigma > 0".into()));
    }
    let floored = sigma < SIGMA_FLOOR;
    let sigma = sigma.max(SIGMA_FLOOR);
    let mut g = MmdGrad {
        rows: vec![vec![0.0; width]; pooled.len()],
        sigma: 0.0,
    };
    let value = mmd2_core(a, b, sigma, Some(&mut g));
    if let (Some(pick), false) = (pick, floored) {
        // dσ/d(median) then d(median)/d(rows), split evenly over the middle pairs
        let share = 1.0 / pick.pairs.len() as f64;
        let dsig_dmed = if squared { 1.0 / (4.0 * sigma) } else { 1.0 / (2.0 * sigma) };
        let gm = g.sigma * dsig_dmed * share;
        for (p, q) in pick.pairs {
            let d2 = sq_dist(pooled[p], pooled[q]);
            let scale = if squared {
                2.0
            } else if d2 > 0.0 {
                1.0 / d2.sqrt()
            } else {
                0.0
            };
            for i in 0..width {
                let diff = pooled[p][i] - pooled[q][i];
                g.rows[p][i] += gm * scale * diff;
                g.rows[q][i] -= gm * scale * diff;
            }
        }
    }
    Ok((value, g.rows))
}

/// Result of [`smmd_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct SmmdOutput {
    pub loss: f64,
    /// ∂loss/∂repr, same shape as the input rows.
    pub grad: Tensor,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Row-index sets for every unordered group pair, in a fixed order.
fn group_pairs(treatments: &Tensor, grouping: Grouping) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = treatments.shape()[0];
    let d_a = treatments.shape()[1];
    match grouping {
        Grouping::Joint => {
            let g = 1usize << d_a;
            let mut groups = vec![Vec::new(); g];
            for r in 0..n {
                groups[arm_index(treatments.row(r))].push(r);
            }
            let mut pairs = Vec::new();
            for i in 0..g {
                for j in i + 1..g {
                    pairs.push((groups[i].clone(), groups[j].clone()));
                }
            }
            pairs
        }
        Grouping::PerChannel => (0..d_a)
            .map(|c| {
                let (mut off, mut on) = (Vec::new(), Vec::new());
                for r in 0..n {
                    if treatments.at2(r, c) > 0.5 {
                        on.push(r)
                    } else {
                        off.push(r)
                    }
                }
                (off, on)
            })
            .collect(),
    }
}

/// Sampling-based MMD loss over treatment groups of one batch.
///
/// Every unordered group pair whose groups both hold at least `subset_size`
/// rows contributes the U-statistic of two fresh random subsets; smaller
/// pairs are skipped. The sum is divided by the number of group pairs
/// (C(2^d_a, 2) for joint grouping, d_a for per-channel grouping).
pub fn smmd_loss(
    repr: &Tensor,
    treatments: &Tensor,
    cfg: &SmmdConfig,
    kernel: &KernelConfig,
    stream: &mut RngStream,
) -> Result<SmmdOutput> {
    cfg.validate()?;
    kernel.validate()?;
    let (rs, ts) = (repr.shape(), treatments.shape());
    if rs.len() != 2 || ts.len() != 2 || rs[0] != ts[0] {
        return Err(Error::shape("smmd rows vs treatments", rs, ts));
    }
    crate::seqmodel::check_binary(treatments.data(), "treatment")?;
    let mut grad = Tensor::zeros(rs);
    let d = rs[1];
    let pairs = group_pairs(treatments, cfg.grouping);
    let n_pairs = pairs.len();
    let (mut total, mut used, mut skipped) = (0.0, 0, 0);
    let ns = cfg.subset_size;
    for (gi, gj) in &pairs {
        if gi.len() < ns || gj.len() < ns {
            skipped += 1;
            continue;
        }
        let pick_i: Vec<usize> = stream
            .sample_without_replacement(gi.len(), ns)
            .into_iter()
            .map(|k| gi[k])
            .collect();
        let pick_j: Vec<usize> = stream
            .sample_without_replacement(gj.len(), ns)
            .into_iter()
            .map(|k| gj[k])
            .collect();
        let a: Vec<&[f64]> = pick_i.iter().map(|&r| repr.row(r)).collect();
        let b: Vec<&[f64]> = pick_j.iter().map(|&r| repr.row(r)).collect();
        let (v, g) = mmd2_with_grad(&a, &b, kernel)?;
        total += v;
        used += 1;
        let gd = grad.data_mut();
        for (row, gr) in pick_i.iter().chain(&pick_j).zip(&g) {
            for k in 0..d {
                gd[row * d + k] += gr[k];
            }
        }
    }
    if n_pairs == 0 {
        return Ok(SmmdOutput {
            loss: 0.0,
            grad,
            pairs_used: 0,
            pairs_skipped: 0,
        });
    }
    let norm = 1.0 / n_pairs as f64;
    grad.scale(norm);
    Ok(SmmdOutput {
        loss: total * norm,
        grad,
        pairs_used: used,
        pairs_skipped: skipped,
    })
}
