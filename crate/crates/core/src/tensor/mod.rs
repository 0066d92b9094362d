//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain value (shape plus row-major data). Gradient tracking
//! lives on the nodes of a [`Graph`]: a leaf created with `requires_grad = true`
//! receives a gradient from [`Graph::backward`], and every node derived from it
//! is recorded on the tape. The tape is dropped with the graph once the
//! gradients have been read out.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
pub(crate) mod kernels;

pub use checkpoint::{read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to};
pub use gradcheck::gradient_check;
pub use graph::{Gradients, Graph, RowOperator, Var};
pub use params::{Bound, ParamStore};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("Tensor::new", shape, &[data.len()]);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", &self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Tensor> {
        let outer = self.shape[0];
        if start + len > outer || len == 0 {
            return Err(Error::IndexOutOfRange {
                what: "batch",
                index: start + len,
                len: outer,
            });
        }
        let stride = self.data.len() / outer;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..(start + len) * stride].to_vec(),
        })
    }

    /// Concatenates along the leading axis.
    pub fn cat_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("cannot concatenate zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err("cat_batch", &first.shape, &p.shape);
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Tensor { shape, data })
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, size, inner) = kernels::axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        kernels::softmax_inplace(&mut out, outer, size, inner);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Maximum and arg-maximum along `axis`; ties resolve to the lowest index.
    pub fn max_with_index(&self, axis: usize) -> Result<(Tensor, Vec<usize>)> {
        let (outer, size, inner) = kernels::axis_split(&self.shape, axis)?;
        let (vals, idx) = kernels::max_along(&self.data, outer, size, inner);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((Tensor { shape, data: vals }, idx))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
