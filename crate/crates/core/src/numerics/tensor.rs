use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;
use crate::{Error, Result};

/// Dense row-major tensor.
///
/// `grad`, when present, always has the same shape as `data`. The default
/// scalar type is `f32`; the gradient oracle instantiates the same code at
/// `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real = f32> {
    pub dims: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![F::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(dims: &[usize], value: F) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero extent in dims {dims:?}")));
        }
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor constructed from non-finite data".into()));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Values drawn from Normal(0, std).
    pub fn randn<R: Rng>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f64, std).expect("std must be finite and positive");
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| F::of_f64(normal.sample(rng))).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Row count for rank-2 tensors (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            _ => self.dims[..self.dims.len() - 1].iter().product(),
        }
    }

    /// Extent of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the same data under new dims (element count must match).
    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements to {dims:?}",
                self.data.len()
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| G::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Zero any existing gradient buffer and drop it.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl Tensor<f32> {
    /// Canonical little-endian byte image of the value data (grad excluded).
    pub fn data_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}
