use super::optim::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization over an NCHW batch.
///
/// Training normalizes with batch statistics and folds them into running
/// estimates (momentum 0.1, unbiased variance); inference uses the running
/// estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

fn nchw<T: Scalar>(x: &Tensor<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape {
            op: "batch_norm",
            detail: format!("input must be rank 4, got {:?}", x.shape()),
        }),
    }
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::full(&[channels], T::one())),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<[usize; 4]> {
        let d = nchw(x)?;
        if d[1] != self.channels() {
            return Err(Error::Dimension {
                op: "batch_norm (channels, axis 1)",
                lhs: x.shape().to_vec(),
                rhs: vec![self.channels()],
            });
        }
        Ok(d)
    }

    fn affine(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Tensor<T> {
        let [_, c, h, w] = nchw(x).expect("checked");
        let plane = h * w;
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        let mut out = x.clone();
        for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = p % c;
            for v in chunk {
                *v = g[ch] * (*v - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        out
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let eps = T::lit(BN_EPS);
        let inv: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        Ok(self.affine(x, self.running_mean.data(), &inv))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = self.check(x)?;
        let plane = h * w;
        let count = n * plane;
        let countt = T::from_usize_lossy(count);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (p, chunk) in xd.chunks(plane).enumerate() {
            mean[p % c] += chunk.iter().copied().sum::<T>();
        }
        for m in &mut mean {
            *m /= countt;
        }
        for (p, chunk) in xd.chunks(plane).enumerate() {
            let m = mean[p % c];
            var[p % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        for v in &mut var {
            *v /= countt;
        }
        let eps = T::lit(BN_EPS);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = x.clone();
        for (p, chunk) in xhat.data_mut().chunks_mut(plane).enumerate() {
            let ch = p % c;
            for v in chunk {
                *v = (*v - mean[ch]) * inv[ch];
            }
        }
        let y = self.affine(x, &mean, &inv);

        let mom = T::lit(BN_MOMENTUM);
        let unbias = if count > 1 {
            countt / T::from_usize_lossy(count - 1)
        } else {
            T::one()
        };
        for ch in 0..c {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
        }
        self.cache = Some((xhat, inv));
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv) = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("BatchNorm2d::backward without forward_train".into()))?;
        xhat.ensure_same_shape(grad_out, "batch_norm backward")?;
        let [n, c, h, w] = nchw(&xhat)?;
        let plane = h * w;
        let countt = T::from_usize_lossy(n * plane);
        let gy = grad_out.data();
        let xh = xhat.data();
        let mut gbeta = vec![T::zero(); c];
        let mut ggamma = vec![T::zero(); c];
        for p in 0..n * c {
            let ch = p % c;
            let r = p * plane..(p + 1) * plane;
            for (g, xv) in gy[r.clone()].iter().zip(&xh[r]) {
                gbeta[ch] += *g;
                ggamma[ch] += *g * *xv;
            }
        }
        let gamma = self.gamma.value.data();
        let mut gx = vec![T::zero(); xhat.len()];
        for p in 0..n * c {
            let ch = p % c;
            let k = gamma[ch] * inv[ch] / countt;
            for i in p * plane..(p + 1) * plane {
                gx[i] = k * (countt * gy[i] - gbeta[ch] - xh[i] * ggamma[ch]);
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += ggamma[ch];
            self.beta.grad.data_mut()[ch] += gbeta[ch];
        }
        Tensor::new(xhat.shape().to_vec(), gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn training_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[4, 3, 5, 5], &mut rng).map(|v| 3.0 * v + 2.0);
        let mut bn = BatchNorm2d::<f64>::new(3);
        let y = bn.forward_train(&x).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| {
                    let start = (b * 3 + ch) * 25;
                    y.data()[start..start + 25].to_vec()
                })
                .collect();
            let t = Tensor::new(vec![vals.len()], vals).unwrap();
            let (m, s) = t.mean_std();
            assert!(m.abs() < 1e-12);
            assert!((s - 1.0).abs() < 1e-4);
        }
        // running stats moved toward the batch stats
        assert!(bn.running_mean.data().iter().all(|&m| m > 0.0));
    }

    #[test]
    fn inference_uses_running_stats() {
        let bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let y = bn.infer(&x).unwrap();
        let k = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!(y.max_abs_diff(&x.scale(k)).unwrap() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&[3, 2, 3, 3], &mut rng);
        let probe = random_tensor(&[3, 2, 3, 3], &mut rng);
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value = Tensor::from_f64(vec![2], &[1.5, -0.7]).unwrap();
        bn.beta.value = Tensor::from_f64(vec![2], &[0.2, 0.1]).unwrap();
        bn.forward_train(&x).unwrap();
        let gx = bn.backward(&probe).unwrap();
        let (gg, gb) = (bn.gamma.grad.clone(), bn.beta.grad.clone());
        let template = bn.clone();
        let run = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut m = template.clone();
            m.gamma.value = g.clone();
            m.beta.value = b.clone();
            m.forward_train(x).unwrap().dot(&probe).unwrap()
        };
        let (g0, b0) = (template.gamma.value.clone(), template.beta.value.clone());
        check_gradient(&x, &gx, |x| run(x, &g0, &b0), 1e-6);
        check_gradient(&g0, &gg, |g| run(&x, g, &b0), 1e-6);
        check_gradient(&b0, &gb, |b| run(&x, &g0, b), 1e-6);
    }
}
