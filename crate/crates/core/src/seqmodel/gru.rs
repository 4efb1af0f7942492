use super::linear::Linear;
use crate::error::{Error, Result};
use crate::numkit::{sigmoid, RngStream, Tensor};

/// Hidden width of the reconstruction probe.
pub const PROBE_HIDDEN: usize = 25;

/// Single-layer gated recurrent decoder with an affine read-out.
///
/// Gate order inside the stacked `3H` weights is reset, update, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruDecoder {
    pub input: Linear,
    pub recurrent: Linear,
    pub readout: Linear,
}

#[derive(Clone, Debug)]
pub struct GruCache {
    t_len: usize,
    /// h_0 .. h_T (h_0 = 0), each H wide.
    hidden: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// recurrent candidate pre-activation `U_n h + b_hn`
    gh_n: Vec<f64>,
}

impl GruDecoder {
    pub fn new(n_in: usize, hidden: usize, n_out: usize, stream: &mut RngStream) -> Self {
        // recurrent-style init: every block uses ±1/√H
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut mk = |i: usize, o: usize| {
            let mut l = Linear::zeros(i, o);
            for v in l.weight.data_mut().iter_mut().chain(l.bias.data_mut()) {
                *v = (2.0 * stream.uniform() - 1.0) * bound;
            }
            l
        };
        let input = mk(n_in, 3 * hidden);
        let recurrent = mk(hidden, 3 * hidden);
        let readout = Linear::new(hidden, n_out, stream);
        Self {
            input,
            recurrent,
            readout,
        }
    }

    pub fn zeros(n_in: usize, hidden: usize, n_out: usize) -> Self {
        Self {
            input: Linear::zeros(n_in, 3 * hidden),
            recurrent: Linear::zeros(hidden, 3 * hidden),
            readout: Linear::zeros(hidden, n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_in(), self.hidden_width(), self.n_out())
    }

    pub fn n_in(&self) -> usize {
        self.input.n_in()
    }
    pub fn hidden_width(&self) -> usize {
        self.recurrent.n_in()
    }
    pub fn n_out(&self) -> usize {
        self.readout.n_out()
    }

    /// `[T, n_in]` → `[T, n_out]`.
    pub fn reconstruct(&self, seq: &Tensor) -> Result<Tensor> {
        Ok(self.forward(seq)?.0)
    }

    pub fn forward(&self, seq: &Tensor) -> Result<(Tensor, GruCache)> {
        let s = seq.shape();
        if s.len() != 2 || s[1] != self.n_in() {
            return Err(Error::shape("probe decoder input", &[0, self.n_in()], s));
        }
        let t_len = s[0];
        let h = self.hidden_width();
        let d_out = self.n_out();
        let mut hidden = vec![0.0; (t_len + 1) * h];
        let mut r = vec![0.0; t_len * h];
        let mut z = vec![0.0; t_len * h];
        let mut n = vec![0.0; t_len * h];
        let mut gh_n = vec![0.0; t_len * h];
        let mut out = vec![0.0; t_len * d_out];
        let mut gi = vec![0.0; 3 * h];
        let mut gh = vec![0.0; 3 * h];
        for t in 0..t_len {
            self.input.forward(seq.row(t), &mut gi);
            let (prev, next) = hidden.split_at_mut((t + 1) * h);
            let hp = &prev[t * h..];
            self.recurrent.forward(hp, &mut gh);
            let hn = &mut next[..h];
            for j in 0..h {
                let rj = sigmoid(gi[j] + gh[j]);
                let zj = sigmoid(gi[h + j] + gh[h + j]);
                let nj = (gi[2 * h + j] + rj * gh[2 * h + j]).tanh();
                r[t * h + j] = rj;
                z[t * h + j] = zj;
                n[t * h + j] = nj;
                gh_n[t * h + j] = gh[2 * h + j];
                hn[j] = (1.0 - zj) * nj + zj * hp[j];
            }
            self.readout.forward(hn, &mut out[t * d_out..(t + 1) * d_out]);
        }
        let cache = GruCache {
            t_len,
            hidden,
            r,
            z,
            n,
            gh_n,
        };
        Ok((Tensor::new(&[t_len, d_out], out)?, cache))
    }

    /// Backpropagation through time for upstream `d_out` (`[T, n_out]`).
    pub fn backward(&self, seq: &Tensor, cache: &GruCache, d_out: &[f64], grad: &mut GruDecoder) -> Result<Tensor> {
        let t_len = cache.t_len;
        let h = self.hidden_width();
        let k = self.n_out();
        if d_out.len() != t_len * k {
            return Err(Error::shape("probe decoder backward", &[t_len * k], &[d_out.len()]));
        }
        let mut dx = vec![0.0; t_len * self.n_in()];
        let mut dh_next = vec![0.0; h];
        let mut dgi = vec![0.0; 3 * h];
        let mut dgh = vec![0.0; 3 * h];
        for t in (0..t_len).rev() {
            let h_prev = &cache.hidden[t * h..(t + 1) * h];
            let h_cur = &cache.hidden[(t + 1) * h..(t + 2) * h];
            let mut dh = dh_next.clone();
            self.readout
                .backward(h_cur, &d_out[t * k..(t + 1) * k], &mut grad.readout, Some(&mut dh));
            let mut dh_prev = vec![0.0; h];
            for j in 0..h {
                let i = t * h + j;
                let (rj, zj, nj) = (cache.r[i], cache.z[i], cache.n[i]);
                let dn = dh[j] * (1.0 - zj);
                let dz = dh[j] * (h_prev[j] - nj);
                dh_prev[j] = dh[j] * zj;
                let dn_pre = dn * (1.0 - nj * nj);
                let dr = dn_pre * cache.gh_n[i];
                let dr_pre = dr * rj * (1.0 - rj);
                let dz_pre = dz * zj * (1.0 - zj);
                dgi[j] = dr_pre;
                dgi[h + j] = dz_pre;
                dgi[2 * h + j] = dn_pre;
                dgh[j] = dr_pre;
                dgh[h + j] = dz_pre;
                dgh[2 * h + j] = dn_pre * rj;
            }
            let n_in = self.n_in();
            self.input
                .backward(seq.row(t), &dgi, &mut grad.input, Some(&mut dx[t * n_in..(t + 1) * n_in]));
            self.recurrent.backward(h_prev, &dgh, &mut grad.recurrent, Some(&mut dh_prev));
            dh_next = dh_prev;
        }
        Tensor::new(&[t_len, self.n_in()], dx)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.input.tensors().to_vec();
        v.extend(self.recurrent.tensors());
        v.extend(self.readout.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let GruDecoder {
            input,
            recurrent,
            readout,
        } = self;
        let mut v: Vec<&mut Tensor> = input.tensors_mut().into_iter().collect();
        v.extend(recurrent.tensors_mut());
        v.extend(readout.tensors_mut());
        v
    }
}
