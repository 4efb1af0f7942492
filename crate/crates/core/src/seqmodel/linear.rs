use crate::numkit::{RngStream, Tensor};

/// Affine map `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, stream: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = (2.0 * stream.uniform() - 1.0) * bound;
    }
    t
}

impl Linear {
    /// Uniform init in ±1/√fan_in for weights and bias.
    pub fn new(n_in: usize, n_out: usize, stream: &mut RngStream) -> Self {
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        Self {
            weight: uniform_tensor(&[n_out, n_in], bound, stream),
            bias: uniform_tensor(&[n_out], bound, stream),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        let n_in = self.n_in();
        let w = self.weight.data();
        for (o, (slot, b)) in out.iter_mut().zip(self.bias.data()).enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            *slot = b + dot(row, x);
        }
    }

    /// Accumulate parameter gradients into `grad`; add the input gradient to `dx` when given.
    pub fn backward(&self, x: &[f64], dout: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        let n_in = self.n_in();
        {
            let gw = grad.weight.data_mut();
            for (o, &g) in dout.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (r, xi) in row.iter_mut().zip(x) {
                    *r += g * xi;
                }
            }
        }
        for (gb, g) in grad.bias.data_mut().iter_mut().zip(dout) {
            *gb += g;
        }
        if let Some(dx) = dx {
            let w = self.weight.data();
            for (o, &g) in dout.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for (d, wi) in dx.iter_mut().zip(row) {
                    *d += g * wi;
                }
            }
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Two-layer perceptron: affine, rectifier, affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl Mlp {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize, stream: &mut RngStream) -> Self {
        Self {
            hidden: Linear::new(n_in, n_hidden, stream),
            output: Linear::new(n_hidden, n_out, stream),
        }
    }

    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self {
            hidden: Linear::zeros(n_in, n_hidden),
            output: Linear::zeros(n_hidden, n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.hidden.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.output.n_out()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut pre = vec![0.0; self.hidden.n_out()];
        self.hidden.forward(x, &mut pre);
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut out = vec![0.0; self.n_out()];
        self.output.forward(&act, &mut out);
        (out, MlpCache { pre, act })
    }

    pub fn backward(&self, x: &[f64], cache: &MlpCache, dout: &[f64], grad: &mut Mlp, dx: Option<&mut [f64]>) {
        let mut dact = vec![0.0; cache.act.len()];
        self.output.backward(&cache.act, dout, &mut grad.output, Some(&mut dact));
        for (d, p) in dact.iter_mut().zip(&cache.pre) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        self.hidden.backward(x, &dact, &mut grad.hidden, dx);
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.hidden.tensors().to_vec();
        v.extend(self.output.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Mlp { hidden, output } = self;
        let mut v: Vec<&mut Tensor> = hidden.tensors_mut().into_iter().collect();
        v.extend(output.tensors_mut());
        v
    }

    pub(crate) fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.hidden.weight"), &self.hidden.weight),
            (format!("{prefix}.hidden.bias"), &self.hidden.bias),
            (format!("{prefix}.output.weight"), &self.output.weight),
            (format!("{prefix}.output.bias"), &self.output.bias),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_in(), self.hidden.n_out(), self.n_out())
    }
}
