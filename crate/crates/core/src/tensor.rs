//! Dense row-major f32 tensors with an optional gradient buffer.
//!
//! This is deliberately minimal: the detector only needs rank-1, rank-3 and
//! rank-4 tensors, plain loops, and a place to accumulate gradients. Feature
//! maps use height x width x channel order so the innermost channel loop is
//! contiguous.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Allocate (or keep) a zeroed gradient buffer.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Flat index for a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, a: usize, b: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (a * self.shape[1] + b) * self.shape[2] + c
    }

    /// Flat index for a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    /// NaN/Inf detection; failing forward or backward passes surface here
    /// instead of propagating silently.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite value {v} at flat index {i} in {what}"
                )));
            }
        }
        if let Some(g) = &self.grad {
            for (i, v) in g.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite gradient {v} at flat index {i} in {what}"
                    )));
                }
            }
        }
        Ok(())
    }
}
