use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{smooth_l1, smooth_l1_grad, EdnModel};
use crate::collector::NoisePair;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            decay: 0.8,
            decay_every: 200,
            epochs: 600,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Step-decayed learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.decay > 0.0) || self.batch_size == 0 || self.decay_every == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "training lr, decay, batch size, decay interval and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One training example: a noise latent, its reference and the residual
/// target, each `4 x h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T: Scalar> {
    pub z: Tensor<T>,
    pub reference: Tensor<T>,
    pub target: Tensor<T>,
}

/// Splits noise pairs into per-view samples with target `z~_T - z_T`.
pub fn samples_from_pairs<T: Scalar>(pairs: &[NoisePair<T>]) -> Result<Vec<TrainSample<T>>> {
    let mut out = Vec::new();
    for p in pairs {
        let target = p.semantic_target()?;
        if p.z_t.rank() == 3 {
            out.push(TrainSample {
                z: p.z_t.clone(),
                reference: p.reference.clone(),
                target,
            });
            continue;
        }
        for (z, s) in p.z_t.outer_iter().zip(target.outer_iter()) {
            out.push(TrainSample {
                z,
                reference: p.reference.clone(),
                target: s,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Trains on noise pairs; see [`train_samples`].
pub fn train_edn<T: Scalar>(
    dataset: &[NoisePair<T>],
    model: &mut EdnModel<T>,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    train_samples(&samples_from_pairs(dataset)?, model, config)
}

fn batch_tensors<T: Scalar>(samples: &[TrainSample<T>], idx: &[usize]) -> Result<[Tensor<T>; 3]> {
    let pick = |f: fn(&TrainSample<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        Tensor::stack(&idx.iter().map(|&i| f(&samples[i]).clone()).collect::<Vec<_>>())
    };
    Ok([pick(|s| &s.z)?, pick(|s| &s.reference)?, pick(|s| &s.target)?])
}

/// Adam on the smooth L1 loss between `edn(z, I)` and the target, one log
/// entry per epoch.
///
/// A non-finite loss aborts training; the model is restored to its state at
/// the start of the failing epoch and a training error is returned.
pub fn train_samples<T: Scalar>(
    samples: &[TrainSample<T>],
    model: &mut EdnModel<T>,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    let adam = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let snapshot = model.clone();
        let lr = config.lr_at(epoch);
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let [z, i, target] = batch_tensors(samples, idx)?;
            let pred = model.forward_train(&z, &i)?;
            let loss = smooth_l1(&pred, &target)?;
            if !loss.is_finite() {
                *model = snapshot;
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}; model restored to the start of the epoch"
                )));
            }
            total += loss.as_f64() * idx.len() as f64;
            model.backward(&smooth_l1_grad(&pred, &target)?)?;
            step += 1;
            for p in model.params_mut() {
                if let Err(e) = adam_step(p, lr, adam.beta1, adam.beta2, adam.eps, step) {
                    *model = snapshot;
                    return Err(e);
                }
                p.zero_grad();
            }
        }
        history.push(EpochLog {
            epoch,
            lr,
            mean_loss: total / samples.len() as f64,
        });
    }
    Ok(history)
}

/// Mean evaluation-mode loss over samples.
pub fn evaluate<T: Scalar>(samples: &[TrainSample<T>], model: &EdnModel<T>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += smooth_l1(&model.forward(&s.z, &s.reference)?, &s.target)?.as_f64();
    }
    Ok(total / samples.len() as f64)
}
