use crate::dataio::arm_index;
use crate::error::{Error, Result};
use crate::numkit::{log_sigmoid, log_softmax, sigmoid, softmax, Tensor};
use crate::seqmodel::{check_binary, Mlp};

/// Treatment-prediction loss of the discriminator with both gradients.
#[derive(Clone, Debug)]
pub struct DiscriminatorLoss {
    /// Mean over rows of the per-row loss (summed over channels).
    pub loss: f64,
    pub param_grad: Mlp,
    pub repr_grad: Tensor,
}

#[derive(Clone, Debug)]
pub struct GrlLosses {
    pub disc_loss: f64,
    /// Gradient for the discriminator's own update (it minimizes `disc_loss`).
    pub disc_grad: Mlp,
    /// Reversed gradient handed to the encoder: −∂disc_loss/∂repr.
    pub encoder_grad: Tensor,
}

fn check_rows(repr: &Tensor, disc: &Mlp) -> Result<usize> {
    let s = repr.shape();
    if s.len() != 2 || s[1] != disc.n_in() {
        return Err(Error::shape("discriminator rows", &[0, disc.n_in()], s));
    }
    if s[0] == 0 {
        return Err(Error::Precondition("discriminator loss on an empty batch".into()));
    }
    Ok(s[0])
}

/// Binary cross-entropy per channel (or categorical cross-entropy over the
/// joint treatment combination when `joint`), averaged over rows.
pub fn discriminator_loss(repr: &Tensor, treatments: &Tensor, disc: &Mlp, joint: bool) -> Result<DiscriminatorLoss> {
    let n = check_rows(repr, disc)?;
    let ts = treatments.shape();
    if ts.len() != 2 || ts[0] != n {
        return Err(Error::shape("discriminator labels", &[n, 0], ts));
    }
    let d_a = ts[1];
    let expected = if joint { 1 << d_a } else { d_a };
    if disc.n_out() != expected {
        return Err(Error::shape("discriminator logits", &[expected], &[disc.n_out()]));
    }
    check_binary(treatments.data(), "treatment")?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut param_grad = disc.zeros_like();
    let mut repr_grad = Tensor::zeros(repr.shape());
    let d = disc.n_in();
    for r in 0..n {
        let (z, cache) = disc.forward(repr.row(r));
        let a = treatments.row(r);
        let mut dz = vec![0.0; z.len()];
        if joint {
            let label = arm_index(a);
            loss -= log_softmax(&z)[label];
            for (k, p) in softmax(&z).into_iter().enumerate() {
                dz[k] = (p - if k == label { 1.0 } else { 0.0 }) * inv_n;
            }
        } else {
            for c in 0..d_a {
                loss -= a[c] * log_sigmoid(z[c]) + (1.0 - a[c]) * log_sigmoid(-z[c]);
                dz[c] = (sigmoid(z[c]) - a[c]) * inv_n;
            }
        }
        disc.backward(
            repr.row(r),
            &cache,
            &dz,
            &mut param_grad,
            Some(&mut repr_grad.data_mut()[r * d..(r + 1) * d]),
        );
    }
    Ok(DiscriminatorLoss {
        loss: loss * inv_n,
        param_grad,
        repr_grad,
    })
}

/// Gradient-reversal objective: the discriminator learns to predict the
/// treatment, the encoder receives the negated gradient of that loss.
pub fn grl_losses(repr: &Tensor, treatments: &Tensor, disc: &Mlp, joint: bool) -> Result<GrlLosses> {
    let dl = discriminator_loss(repr, treatments, disc, joint)?;
    let mut encoder_grad = dl.repr_grad;
    encoder_grad.scale(-1.0);
    Ok(GrlLosses {
        disc_loss: dl.loss,
        disc_grad: dl.param_grad,
        encoder_grad,
    })
}

/// Domain-confusion objective for the encoder: cross-entropy between the
/// discriminator output and the uniform distribution, averaged over rows.
///
/// Per-channel heads use a uniform Bernoulli target per channel, so the
/// minimum is d_a·ln 2 = ln(2^d_a); a joint head reaches ln K at uniform output.
/// Returns the loss and its gradient with respect to the rows.
pub fn cdc_loss(repr: &Tensor, disc: &Mlp, joint: bool) -> Result<(f64, Tensor)> {
    let n = check_rows(repr, disc)?;
    let inv_n = 1.0 / n as f64;
    let d = disc.n_in();
    let mut scratch = disc.zeros_like();
    let mut grad = Tensor::zeros(repr.shape());
    let mut loss = 0.0;
    for r in 0..n {
        let (z, cache) = disc.forward(repr.row(r));
        let k = z.len() as f64;
        let dz: Vec<f64> = if joint {
            loss -= log_softmax(&z).iter().sum::<f64>() / k;
            softmax(&z).into_iter().map(|p| (p - 1.0 / k) * inv_n).collect()
        } else {
            z.iter()
                .map(|&zc| {
                    loss -= 0.5 * (log_sigmoid(zc) + log_sigmoid(-zc));
                    (sigmoid(zc) - 0.5) * inv_n
                })
                .collect()
        };
        disc.backward(
            repr.row(r),
            &cache,
            &dz,
            &mut scratch,
            Some(&mut grad.data_mut()[r * d..(r + 1) * d]),
        );
    }
    Ok((loss * inv_n, grad))
}
