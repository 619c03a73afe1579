//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable values; an op either runs eagerly (no input on a
//! tape) or additionally records itself on the single tape its inputs share.
//! Gradients come from [`Tensor::backward`] on a scalar loss.

mod element;
pub mod gradcheck;
pub mod init;
mod ops;
mod tape;

use std::sync::Arc;

pub use element::Element;
pub use ops::{concat_last, concat_rows};
pub use tape::{Gradients, Tape};

use crate::error::{PtnetError, Result};

pub struct Tensor<E: Element = f32> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<E>>,
    pub(crate) node: Option<(Tape<E>, tape::NodeId)>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), node: None }
    }

    /// Builds a tensor from row-major data. Rank 0 (empty shape) holds one
    /// element. Dims must be positive and multiply out to `data.len()`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(PtnetError::Shape(format!("zero dim in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(PtnetError::Shape(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor::raw(shape, data))
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::from_vec(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn scalar(v: E) -> Self {
        Tensor::raw(Vec::new(), vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape, vec![E::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape, vec![v; n])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Tensor::full(shape, E::one())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same data, no tape participation.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// The single element of a scalar (or any 1-element) tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(PtnetError::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// NaN/Inf anywhere in the data is a detectable error state.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(PtnetError::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Mutable access to the backing buffer. Only sensible for untracked
    /// tensors that are not aliased (parameter updates); clones otherwise.
    pub fn data_mut(&mut self) -> &mut [E] {
        debug_assert!(self.node.is_none(), "mutating a tracked tensor");
        Arc::make_mut(&mut self.data)
    }

    pub(crate) fn node_id_on(&self, tape: &Tape<E>) -> Option<tape::NodeId> {
        match &self.node {
            Some((t, id)) if Tape::ptr_eq(t, tape) => Some(*id),
            _ => None,
        }
    }

    pub(crate) fn rows_cols(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(PtnetError::Shape(format!(
                "expected a 2-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}
