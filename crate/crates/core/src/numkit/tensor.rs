use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor with up to three axes (batch × time × feature).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub const MAX_RANK: usize = 3;

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > Self::MAX_RANK {
            return Err(Error::Precondition(format!(
                "tensor rank {} exceeds {}",
                shape.len(),
                Self::MAX_RANK
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &[n], &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.len() <= Self::MAX_RANK, "tensor rank exceeds 3");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Element at a 2-D index (row-major).
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = *self.shape.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("Tensor::add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Round every element through 32-bit precision.
    pub fn round_to_f32(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }
}

/// Concatenate a parameter list into one flat vector.
pub fn flatten(tensors: &[&Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tensors.iter().map(|t| t.len()).sum());
    for t in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

/// Scatter a flat vector back into a parameter list of matching total size.
pub fn unflatten_into(flat: &[f64], tensors: &mut [&mut Tensor]) -> Result<()> {
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    if total != flat.len() {
        return Err(Error::shape("unflatten_into", &[total], &[flat.len()]));
    }
    let mut off = 0;
    for t in tensors.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Global L2 norm across a gradient list.
pub fn global_norm(tensors: &[&Tensor]) -> f64 {
    tensors.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
}

/// Rescale gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(tensors: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = tensors.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in tensors.iter_mut() {
            t.scale(s);
        }
    }
    norm
}
