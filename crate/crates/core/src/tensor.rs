//! Dense row-major f64 tensor with an optional gradient buffer.
//!
//! This is the universal numeric carrier for the kernel: activations,
//! parameters and feature matrices are all `Tensor`s. A gradient buffer is
//! attached exactly when the tensor is marked trainable.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: format!("{n} values for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    /// 2-D constructor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CoreError::ShapeMismatch {
                    context: "Tensor::from_rows",
                    expected: format!("row length {c}"),
                    got: format!("{}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor { shape: vec![r, c], data, grad: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows of a 2-D tensor (frames, for feature matrices).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row `t` of a 2-D tensor.
    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.cols();
        &self.data[t * c..(t + 1) * c]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }

    /// Attach (or keep) a zeroed gradient buffer.
    pub fn mark_trainable(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    /// Drop the gradient buffer; the tensor becomes frozen.
    pub fn freeze(&mut self) {
        self.grad = None;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Accumulate `delta` into the gradient buffer if one is attached.
    /// Frozen tensors ignore the contribution.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        if let Some(g) = self.grad.as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn describe_shape(&self) -> String {
        format!("{:?}", self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn trainability_controls_grad_buffer() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(!t.is_trainable());
        t.accumulate_grad(&[1.0; 4]);
        assert!(t.grad().is_none());
        t.mark_trainable();
        t.accumulate_grad(&[1.0; 4]);
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
        t.freeze();
        assert!(!t.is_trainable());
    }
}
