use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    /// ELU with alpha = 1.
    Elu,
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    match kind {
        ActivationKind::Relu => x.map(|v| v.max(T::zero())),
        ActivationKind::Elu => x.map(|v| if v >= T::zero() { v } else { v.exp_m1() }),
    }
}

/// Gradient through the activation, given its input `x`.
pub fn activation_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: ActivationKind,
) -> Result<Tensor<T>> {
    match kind {
        ActivationKind::Relu => x.zip_map(grad_out, "relu backward", |v, g| {
            if v > T::zero() {
                g
            } else {
                T::zero()
            }
        }),
        ActivationKind::Elu => x.zip_map(grad_out, "elu backward", |v, g| {
            if v >= T::zero() {
                g
            } else {
                g * v.exp()
            }
        }),
    }
}

#[derive(Clone, Debug)]
pub struct Activation<T: Scalar> {
    pub kind: ActivationKind,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, input: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        activation(x, self.kind)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        activation(x, self.kind)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Protocol("Activation::backward without forward_train".into()))?;
        activation_backward(&x, grad_out, self.kind)
    }
}
