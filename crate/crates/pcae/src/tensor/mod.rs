//! Dense tensors and the differentiable operators of the network stack.
//!
//! All math runs in double precision on the CPU. Operators come in
//! forward/backward pairs with explicit caches; there is no taped autodiff
//! graph. Every backward is verified against central finite differences
//! (see [`gradcheck`]).

pub mod gradcheck;
pub mod layers;
pub mod norm;
pub mod ops;

use thiserror::Error;

/// Deterministic RNG used throughout the crate. ChaCha output is stable
/// across platforms and library versions, which the reproducibility
/// guarantees rely on.
pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

impl TensorError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid { op, msg: msg.into() }
    }
}

/// Dense row-major N-dimensional array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::LengthMismatch { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Reinterpret the buffer under a new shape of identical volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(TensorError::LengthMismatch { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// self += alpha * other (shapes must match).
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (d, s) in self.data.iter_mut().zip(other.data.iter()) {
            *d += alpha * s;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Random tensor with entries from U(-bound, bound).
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Random tensor with entries from N(0, std^2).
    pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// He-uniform initialization: U(+-sqrt(6 / fan_in)).
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
    }
}

/// A learnable tensor together with its gradient accumulator.
///
/// The gradient buffer is allocated lazily so that inference-only model
/// instances (the paper preset is ~50M parameters) do not pay for it.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { value, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut Tensor {
        if self.grad.is_none() {
            self.grad = Some(Tensor::zeros(self.value.shape()));
        }
        self.grad.as_mut().unwrap()
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) {
        self.grad_mut().axpy(1.0, g);
    }
}

/// Visitor over the named tensors of a model. `trainable` distinguishes
/// learnable parameters (seen by the optimizer) from persistent buffers
/// such as batchnorm running statistics (checkpointed but never stepped).
pub trait TensorVisitor {
    fn visit(&mut self, name: &str, value: &mut Tensor, trainable: bool);
}

impl<F: FnMut(&str, &mut Tensor, bool)> TensorVisitor for F {
    fn visit(&mut self, name: &str, value: &mut Tensor, trainable: bool) {
        self(name, value, trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_volume_invariant() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.len(), 24);
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_volume() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn param_grad_lazy_alloc() {
        let mut p = Param::new(Tensor::zeros(&[3]));
        assert!(p.grad().is_none());
        p.grad_mut().data_mut()[0] = 1.0;
        assert_eq!(p.grad().unwrap().data()[0], 1.0);
        p.zero_grad();
        assert_eq!(p.grad().unwrap().data()[0], 0.0);
    }

    #[test]
    fn he_uniform_bound() {
        let mut rng = Rng::seed_from_u64(7);
        let t = Tensor::he_uniform(&[64, 9], 9, &mut rng);
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
    }
}
