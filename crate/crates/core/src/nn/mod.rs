//! Minimal dense-tensor engine: exactly the operations the transformer needs,
//! each with a hand-written backward pass.
//!
//! Tensors are row-major flat arrays of 64-bit floats. There is no autodiff
//! graph: forward functions return outputs (and caches where needed), and each
//! op has a matching `*_backward` that maps the upstream gradient to input
//! gradients. Model code chains them in reverse by hand.

mod ops;

pub mod check;

pub use ops::{
    add, add_bias, add_bias_backward, concat_last_axis, concat_last_axis_backward, gelu,
    gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_backward, matmul_nt, matmul_tn,
    mse_masked, mse_masked_backward, scale, softmax_rows, softmax_rows_backward, split_last_axis,
    transpose, LayerNormCache, MaskedLoss,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Dense row-major tensor of f64 with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// n x n identity.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Row count; tensor must be 2-D.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2D tensor");
        self.shape[0]
    }

    /// Column count; tensor must be 2-D.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2D tensor");
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn alloc_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named model tensor with its gradient buffer always allocated.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let mut tensor = tensor;
        tensor.alloc_grad();
        Self {
            name: name.into(),
            tensor,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn grad(&self) -> &[f64] {
        self.tensor.grad().expect("parameter grad is always allocated")
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        self.tensor
            .grad_mut()
            .expect("parameter grad is always allocated")
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad_mut();
        assert_eq!(g.len(), delta.len(), "gradient length mismatch");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}
