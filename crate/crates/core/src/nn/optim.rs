//! Trainable parameters and the Adam optimizer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` using its accumulated gradient.
///
/// `step` is the 1-based update count. The gradient is left untouched; the
/// caller clears it before the next accumulation.
pub fn adam_step<T: Scalar>(
    param: &mut Parameter<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Argument("adam step count starts at 1".into()));
    }
    if !param.grad.all_finite() {
        return Err(Error::Training("non-finite gradient".into()));
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one, lr, eps) = (T::one(), T::lit(lr), T::lit(eps));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    let Parameter { value, grad, m, v } = param;
    for (((w, &g), mi), vi) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new(Tensor::scalar(x));
        p.grad = Tensor::scalar(g);
        p
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut p = Parameter::new(Tensor::<f64>::from_fn(&[3], |i| i as f64));
        let before = p.value.clone();
        adam_step(&mut p, 1e-3, 0.9, 0.999, 1e-8, 1).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0, 2.0);
        adam_step(&mut p, 0.001, 0.9, 0.999, 1e-8, 1).unwrap();
        // m_hat = 2, v_hat = 4 -> 0.001 * 2 / (2 + 1e-8)
        let expected = -0.001 * 2.0 / (2.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
        assert!((p.value.data()[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn repeated_steps_move_against_gradient() {
        let mut p = scalar_param(1.0, -0.5);
        let mut prev = 1.0;
        for step in 1..=2 {
            adam_step(&mut p, 0.01, 0.9, 0.999, 1e-8, step).unwrap();
            let now = p.value.data()[0];
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_training_error() {
        let mut p = scalar_param(0.0, f64::NAN);
        assert!(matches!(
            adam_step(&mut p, 0.001, 0.9, 0.999, 1e-8, 1),
            Err(Error::Training(_))
        ));
        let mut p = scalar_param(0.0, 1.0);
        assert!(adam_step(&mut p, 0.001, 0.9, 0.999, 1e-8, 0).is_err());
    }
}
