use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{smooth_l1, smooth_l1_grad, EdnConfig, EdnModel, INPUT_CHANNELS, LATENT_CHANNELS};
use super::train::TrainSample;
use crate::error::Result;
use crate::nn::conv2d;
use crate::nn::gradcheck::{random_tensor, relative_error};
use crate::tensor::Tensor;

/// Compares backpropagated parameter gradients of the training-mode smooth
/// L1 loss with central differences on a random `fraction` of all
/// parameter elements (at least one per tensor). Returns the norm-wise
/// relative error and the number of elements checked.
pub fn parameter_gradient_check(config: EdnConfig, fraction: f64, seed: u64) -> Result<(f64, usize)> {
    let mut model = EdnModel::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = [2, LATENT_CHANNELS, config.height, config.width];
    let z = random_tensor(&shape, &mut rng).scale(config.noise_scale);
    let i = random_tensor(&shape, &mut rng);
    let target = random_tensor(&shape, &mut rng).scale(0.3 * config.residual_scale);

    model.zero_grad();
    let pred = model.forward_train(&z, &i)?;
    model.backward(&smooth_l1_grad(&pred, &target)?)?;

    let mut picks = Vec::new();
    for (k, p) in model.params_mut().into_iter().enumerate() {
        let forced = rng.gen_range(0..p.len());
        for j in 0..p.len() {
            if j == forced || rng.gen_bool(fraction) {
                picks.push((k, j, p.grad.data()[j]));
            }
        }
    }

    let h = 1e-5;
    let loss_at = |model: &mut EdnModel<f64>, k: usize, j: usize, delta: f64| -> Result<f64> {
        model.params_mut()[k].value.data_mut()[j] += delta;
        let loss = smooth_l1(&model.forward_train(&z, &i)?, &target);
        model.params_mut()[k].value.data_mut()[j] -= delta;
        loss
    };
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    for &(k, j, g) in &picks {
        let plus = loss_at(&mut model, k, j, h)?;
        let minus = loss_at(&mut model, k, j, -h)?;
        analytic.push(g);
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok((relative_error(&analytic, &numeric), picks.len()))
}

/// Realizable regression: targets are a fixed random 3x3 convolution of the
/// concatenated `(z, I)` input.
pub fn linear_task(config: &EdnConfig, pairs: usize, seed: u64) -> Result<Vec<TrainSample<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan_in = (INPUT_CHANNELS * 9) as f64;
    let kernel = random_tensor(&[LATENT_CHANNELS, INPUT_CHANNELS, 3, 3], &mut rng).scale(1.0 / fan_in.sqrt());
    let shape = config.latent_shape();
    (0..pairs)
        .map(|_| {
            let z = random_tensor(&shape, &mut rng);
            let reference = random_tensor(&shape, &mut rng);
            let x = Tensor::concat_axis1(&z.unsqueeze0(), &reference.unsqueeze0())?.reshape(&[
                INPUT_CHANNELS,
                config.height,
                config.width,
            ])?;
            let target = conv2d(&x, &kernel, 1, 1)?;
            Ok(TrainSample {
                z: z.scale(config.noise_scale),
                reference,
                target: target.scale(config.residual_scale),
            })
        })
        .collect()
}
