use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a tensor, used by the tape to route gradients
/// back to the parameter they belong to. Clones receive a fresh id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major f64 array with an optional gradient slot.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    id: TensorId,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
            id: TensorId::fresh(),
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("Tensor::new", numel(&shape), data.len()));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
            id: TensorId::fresh(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    /// Marks the tensor as a trainable leaf.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("Tensor::set_grad", self.data.len(), grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape.clone(), shape.to_vec()));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Element of a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = &self.shape;
        self.data[((n * s[1] + c) * s[2] + h) * s[3] + w]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(op, "rank 4 [N,C,H,W]", self.shape.clone())),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::shape(op, "rank 2", self.shape.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn clone_gets_fresh_id_but_equal_values() {
        let a = Tensor::full(&[3], 1.5).into_param();
        let b = a.clone();
        assert_ne!(a.id(), b.id());
        assert_eq!(a, b);
        assert!(b.requires_grad());
    }

    #[test]
    fn grad_shape_is_enforced() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.set_grad(vec![1.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }
}
