use serde::{Deserialize, Serialize};

use super::linear::{dot, uniform_tensor, Linear};
use crate::error::{Error, Result};
use crate::numkit::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// d_x + d_y + d_v + d_a
    pub input_width: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    /// Representation width D.
    pub repr_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 2 {
            return Err(Error::Config(format!("kernel_size must be >= 2, got {}", self.kernel_size)));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d < 1) {
            return Err(Error::Config(format!("dilations must be non-empty and >= 1, got {:?}", self.dilations)));
        }
        if self.repr_dim < 1 || self.channels < 1 || self.input_width < 1 {
            return Err(Error::Config("encoder widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of input steps that can influence one output row.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }
}

/// One causal dilated convolution with a rectifier and a residual path.
///
/// `weight[j]` applies to the input `j·dilation` steps back.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[kernel, out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
    /// 1×1 residual projection `[out, in]`, present when widths differ.
    pub proj: Option<Tensor>,
    pub dilation: usize,
}

impl ConvLayer {
    fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }
    fn n_out(&self) -> usize {
        self.weight.shape()[1]
    }
    fn n_in(&self) -> usize {
        self.weight.shape()[2]
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
            proj: self.proj.as_ref().map(Tensor::zeros_like),
            dilation: self.dilation,
        }
    }

    /// Returns (pre-activation, output), both `T × out`.
    fn forward(&self, input: &[f64], t_len: usize) -> (Vec<f64>, Vec<f64>) {
        let (k, c_out, c_in) = (self.kernel(), self.n_out(), self.n_in());
        let w = self.weight.data();
        let b = self.bias.data();
        let mut pre = vec![0.0; t_len * c_out];
        let mut out = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            let p = &mut pre[t * c_out..(t + 1) * c_out];
            p.copy_from_slice(b);
            for j in 0..k {
                let lag = j * self.dilation;
                if lag > t {
                    break;
                }
                let x = &input[(t - lag) * c_in..(t - lag + 1) * c_in];
                let wj = &w[j * c_out * c_in..(j + 1) * c_out * c_in];
                for (o, po) in p.iter_mut().enumerate() {
                    *po += dot(&wj[o * c_in..(o + 1) * c_in], x);
                }
            }
            let x = &input[t * c_in..(t + 1) * c_in];
            let o_row = &mut out[t * c_out..(t + 1) * c_out];
            match &self.proj {
                Some(pm) => {
                    let pm = pm.data();
                    for (o, slot) in o_row.iter_mut().enumerate() {
                        *slot = p[o].max(0.0) + dot(&pm[o * c_in..(o + 1) * c_in], x);
                    }
                }
                None => {
                    for (o, slot) in o_row.iter_mut().enumerate() {
                        *slot = p[o].max(0.0) + x[o];
                    }
                }
            }
        }
        (pre, out)
    }

    /// Backward of [`ConvLayer::forward`]; returns the input gradient.
    fn backward(&self, input: &[f64], pre: &[f64], dout: &[f64], t_len: usize, grad: &mut ConvLayer) -> Vec<f64> {
        let (k, c_out, c_in) = (self.kernel(), self.n_out(), self.n_in());
        let w = self.weight.data();
        let mut din = vec![0.0; t_len * c_in];
        let mut dpre = vec![0.0; c_out];
        for t in 0..t_len {
            let dh = &dout[t * c_out..(t + 1) * c_out];
            let x = &input[t * c_in..(t + 1) * c_in];
            // residual path
            match (&self.proj, grad.proj.as_mut()) {
                (Some(pm), Some(gp)) => {
                    let pm = pm.data();
                    let gp = gp.data_mut();
                    let dx = &mut din[t * c_in..(t + 1) * c_in];
                    for (o, &g) in dh.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        for i in 0..c_in {
                            gp[o * c_in + i] += g * x[i];
                            dx[i] += g * pm[o * c_in + i];
                        }
                    }
                }
                _ => {
                    for (d, g) in din[t * c_in..(t + 1) * c_in].iter_mut().zip(dh) {
                        *d += g;
                    }
                }
            }
            let p = &pre[t * c_out..(t + 1) * c_out];
            for o in 0..c_out {
                dpre[o] = if p[o] > 0.0 { dh[o] } else { 0.0 };
            }
            for (gb, d) in grad.bias.data_mut().iter_mut().zip(&dpre) {
                *gb += d;
            }
            for j in 0..k {
                let lag = j * self.dilation;
                if lag > t {
                    break;
                }
                let s = t - lag;
                let wj = &w[j * c_out * c_in..(j + 1) * c_out * c_in];
                let gw = &mut grad.weight.data_mut()[j * c_out * c_in..(j + 1) * c_out * c_in];
                let xs = &input[s * c_in..(s + 1) * c_in];
                let dxs = &mut din[s * c_in..(s + 1) * c_in];
                for (o, &g) in dpre.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &wj[o * c_in..(o + 1) * c_in];
                    let grow = &mut gw[o * c_in..(o + 1) * c_in];
                    for i in 0..c_in {
                        grow[i] += g * xs[i];
                        dxs[i] += g * wrow[i];
                    }
                }
            }
        }
        din
    }
}

/// Causal temporal convolutional encoder producing one D-wide row per input step.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer>,
    pub output: Linear,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    t_len: usize,
    /// Input to each conv layer (layer 0 sees the raw rows).
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    last: Vec<f64>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, stream: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.dilations.len());
        let mut width = config.input_width;
        for &d in &config.dilations {
            let fan_in = (width * config.kernel_size) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let weight = uniform_tensor(&[config.kernel_size, config.channels, width], bound, stream);
            let bias = uniform_tensor(&[config.channels], bound, stream);
            let proj = (width != config.channels)
                .then(|| uniform_tensor(&[config.channels, width], 1.0 / (width as f64).sqrt(), stream));
            layers.push(ConvLayer {
                weight,
                bias,
                proj,
                dilation: d,
            });
            width = config.channels;
        }
        let output = Linear::new(config.channels, config.repr_dim, stream);
        Ok(Self { config, layers, output })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.iter().map(ConvLayer::zeros_like).collect(),
            output: Linear::zeros(self.output.n_in(), self.output.n_out()),
        }
    }

    fn check_input(&self, inputs: &Tensor) -> Result<usize> {
        let s = inputs.shape();
        if s.len() != 2 || s[1] != self.config.input_width {
            return Err(Error::shape("encode input", &[0, self.config.input_width], s));
        }
        if s[0] == 0 {
            return Err(Error::Precondition("encode needs at least one step".into()));
        }
        Ok(s[0])
    }

    /// `[T, input_width]` → `[T, D]`.
    pub fn encode(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.encode_with_cache(inputs)?.0)
    }

    pub fn encode_with_cache(&self, inputs: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let t_len = self.check_input(inputs)?;
        let mut cur = inputs.data().to_vec();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (pre, out) = layer.forward(&cur, t_len);
            layer_inputs.push(cur);
            pres.push(pre);
            cur = out;
        }
        let d = self.config.repr_dim;
        let c = self.config.channels;
        let mut b = vec![0.0; t_len * d];
        for t in 0..t_len {
            self.output.forward(&cur[t * c..(t + 1) * c], &mut b[t * d..(t + 1) * d]);
        }
        let cache = EncoderCache {
            t_len,
            inputs: layer_inputs,
            pre: pres,
            last: cur,
        };
        Ok((Tensor::new(&[t_len, d], b)?, cache))
    }

    /// Representation of the last step only, computed over the receptive field.
    ///
    /// Bit-identical to the last row of [`Encoder::encode`].
    pub fn encode_last(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        let t_len = self.check_input(inputs)?;
        let rf = self.config.receptive_field();
        if t_len <= rf {
            let b = self.encode(inputs)?;
            return Ok(b.row(t_len - 1).to_vec());
        }
        let w = self.config.input_width;
        let tail = Tensor::new(&[rf, w], inputs.data()[(t_len - rf) * w..].to_vec())?;
        let b = self.encode(&tail)?;
        Ok(b.row(rf - 1).to_vec())
    }

    /// Accumulate parameter gradients for upstream `d_repr` (`[T, D]`); returns the input gradient.
    pub fn backward(&self, cache: &EncoderCache, d_repr: &[f64], grad: &mut Encoder) -> Result<Tensor> {
        let t_len = cache.t_len;
        let d = self.config.repr_dim;
        let c = self.config.channels;
        if d_repr.len() != t_len * d {
            return Err(Error::shape("encoder backward", &[t_len * d], &[d_repr.len()]));
        }
        let mut dcur = vec![0.0; t_len * c];
        for t in 0..t_len {
            self.output.backward(
                &cache.last[t * c..(t + 1) * c],
                &d_repr[t * d..(t + 1) * d],
                &mut grad.output,
                Some(&mut dcur[t * c..(t + 1) * c]),
            );
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            dcur = layer.backward(&cache.inputs[l], &cache.pre[l], &dcur, t_len, &mut grad.layers[l]);
        }
        Tensor::new(&[t_len, self.config.input_width], dcur)
    }

    pub(crate) fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            v.push((format!("encoder.conv{l}.weight"), &layer.weight));
            v.push((format!("encoder.conv{l}.bias"), &layer.bias));
            if let Some(p) = &layer.proj {
                v.push((format!("encoder.conv{l}.proj"), p));
            }
        }
        v.push(("encoder.output.weight".into(), &self.output.weight));
        v.push(("encoder.output.bias".into(), &self.output.bias));
        v
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for layer in &mut self.layers {
            v.push(&mut layer.weight);
            v.push(&mut layer.bias);
            if let Some(p) = layer.proj.as_mut() {
                v.push(p);
            }
        }
        v.push(&mut self.output.weight);
        v.push(&mut self.output.bias);
        v
    }
}
