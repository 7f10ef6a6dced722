//! A two-layer convolutional denoiser trained by denoising score matching at
//! one noise level. It stands in for the closed form when a nonlinear,
//! learned predictor is wanted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{v_from_epsilon, NoisePredictor, PromptContext, ToyWorld};
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, ActivationKind, AdamConfig, Conv2d};
use crate::scalar::Scalar;
use crate::scheduler::{rescale_factor, PredictionType};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TinyDenoiser<T: Scalar> {
    conv1: Conv2d<T>,
    act: Activation<T>,
    conv2: Conv2d<T>,
    sigma: T,
}

#[derive(Clone, Copy, Debug)]
pub struct TinyTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of training on the empty prompt.
    pub null_rate: f64,
    pub seed: u64,
}

impl Default for TinyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 1e-2,
            null_rate: 0.2,
            seed: 0,
        }
    }
}

impl<T: Scalar> TinyDenoiser<T> {
    pub fn new(channels: usize, hidden: usize, sigma: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv2 = Conv2d::new(hidden, channels, 3, 1, 1, true, &mut rng);
        conv2.weight.value = conv2.weight.value.scale(T::lit(0.1));
        Self {
            conv1: Conv2d::new(2 * channels, hidden, 3, 1, 1, true, &mut rng),
            act: Activation::new(ActivationKind::Relu),
            conv2,
            sigma,
        }
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    fn input(z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        Tensor::concat_axis1(z, c)
    }

    /// Estimates the clean latent for a batch `[N, C, H, W]` of noisy latents
    /// and prompts.
    pub fn denoise_batch(&self, z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.infer(&Self::input(z, c)?)?;
        let out = self.conv2.infer(&self.act.infer(&h))?;
        out.add(z)
    }

    pub fn denoise(&self, z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.denoise_batch(&z.unsqueeze0(), &c.unsqueeze0())?;
        let shape = y.shape()[1..].to_vec();
        y.reshape(&shape)
    }

    /// Denoising score matching on view 0 of the world at the model's noise
    /// level. Returns the per-step batch MSE.
    pub fn train(&mut self, world: &ToyWorld<T>, cfg: &TinyTrainConfig) -> Result<Vec<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let adam = AdamConfig::default();
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 1..=cfg.steps {
            let mut zs = Vec::with_capacity(cfg.batch);
            let mut cs = Vec::with_capacity(cfg.batch);
            let mut xs = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let k = rng.gen_range(0..world.num_objects());
                let x = world.sample_view(k, 0, &mut rng);
                let z = x.map(|v| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    v + self.sigma * T::lit(g)
                });
                let c = if rng.gen_bool(cfg.null_rate) {
                    Tensor::zeros(x.shape())
                } else {
                    world.reference(k).clone()
                };
                zs.push(z);
                cs.push(c);
                xs.push(x);
            }
            let z = Tensor::stack(&zs)?;
            let x = Tensor::stack(&xs)?;
            let inp = Self::input(&z, &Tensor::stack(&cs)?)?;
            let h = self.conv1.forward_train(&inp)?;
            let a = self.act.forward_train(&h);
            let pred = self.conv2.forward_train(&a)?.add(&z)?;
            let diff = pred.sub(&x)?;
            let n = T::from_usize_lossy(diff.len());
            let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            losses.push(loss);
            let g = diff.scale(T::lit(2.0) / n);
            let ga = self.conv2.backward(&g)?;
            let gh = self.act.backward(&ga)?;
            self.conv1.backward(&gh)?;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
            for p in self.conv1.params_mut().into_iter().chain(self.conv2.params_mut()) {
                adam_step(p, lr, adam.beta1, adam.beta2, adam.eps, step as u64)?;
                p.zero_grad();
            }
        }
        Ok(losses)
    }
}

impl<T: Scalar> NoisePredictor<T> for TinyDenoiser<T> {
    fn predict(
        &self,
        prompt: &PromptContext<T>,
        z_scaled: &Tensor<T>,
        sigma: T,
        kind: PredictionType,
    ) -> Result<Tensor<T>> {
        let tol = T::lit(1e-9) * (T::one() + self.sigma);
        if (sigma - self.sigma).abs() > tol {
            return Err(Error::Argument(format!(
                "tiny denoiser trained at sigma {} queried at {sigma}",
                self.sigma
            )));
        }
        let z = z_scaled.scale(rescale_factor(sigma));
        let d = self.denoise(&z, &prompt.c)?;
        let eps = z.zip_map(&d, "tiny predict", |a, b| (a - b) / sigma)?;
        match kind {
            PredictionType::Epsilon => Ok(eps),
            PredictionType::VPrediction => v_from_epsilon(&z, &eps, sigma),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::ToyWorldSpec;

    #[test]
    fn learns_conditional_denoiser_close_to_closed_form() {
        let spec = ToyWorldSpec {
            height: 8,
            width: 8,
            ..ToyWorldSpec::default()
        };
        let world = ToyWorld::<f64>::from_spec(&spec).unwrap();
        let sigma = 1.0;
        let mut net = TinyDenoiser::new(4, 32, sigma, 11);
        net.train(&world, &TinyTrainConfig::default()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let (mut mse_net, mut mse_exact) = (0.0, 0.0);
        let trials = 200;
        for i in 0..trials {
            let k = i % world.num_objects();
            let x = world.sample_view(k, 0, &mut rng);
            let z = x.map(|v| {
                let g: f64 = StandardNormal.sample(&mut rng);
                v + sigma * g
            });
            let c = world.reference(k).clone();
            let prompt = PromptContext::conditional(c.clone(), 0);
            mse_net += net.denoise(&z, &c).unwrap().mse(&x).unwrap();
            mse_exact += world.denoise(&prompt, &z, sigma).unwrap().mse(&x).unwrap();
        }
        assert!(mse_net <= 1.10 * mse_exact, "net {mse_net} vs exact {mse_exact}");
    }

    #[test]
    fn rejects_other_noise_levels() {
        let net = TinyDenoiser::<f64>::new(1, 2, 1.0, 0);
        let p = PromptContext::null(&[1, 3, 3], 0);
        let z = Tensor::zeros(&[1, 3, 3]);
        assert!(net.predict(&p, &z, 2.0, PredictionType::Epsilon).is_err());
        assert!(net.predict(&p, &z, 1.0, PredictionType::Epsilon).is_ok());
    }
}
