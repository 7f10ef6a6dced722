//! Encoder-decoder network predicting the semantic residual of a noise.

mod check;
mod checkpoint;
mod model;
mod train;

pub use check::{linear_task, parameter_gradient_check};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MODEL_MAGIC, MODEL_VERSION};
pub use model::{
    apply_edn, predict_residual, smooth_l1, smooth_l1_grad, EdnConfig, EdnModel, Upsample, INPUT_CHANNELS,
    LATENT_CHANNELS,
};
pub use train::{evaluate, samples_from_pairs, train_edn, train_samples, EpochLog, TrainConfig, TrainSample};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_tensor;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_shapes() {
        let cfg = EdnConfig::full(16, 16);
        assert_eq!(cfg.feature_shapes(), [[64, 8, 8], [64, 4, 4], [128, 2, 2]]);
        let model = EdnModel::<f64>::new(EdnConfig::micro(16, 16), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = random_tensor(&[4, 16, 16], &mut rng);
        let i = random_tensor(&[4, 16, 16], &mut rng);
        assert_eq!(model.forward(&z, &i).unwrap().shape(), &[4, 16, 16]);
        assert!(model.forward(&z, &random_tensor(&[4, 8, 8], &mut rng)).is_err());
        assert!(EdnConfig::micro(12, 16).validate().is_err());
    }

    #[test]
    fn transposed_variant_has_same_shape() {
        let cfg = EdnConfig::micro(8, 16).with_upsample(Upsample::TransposedConv);
        let model = EdnModel::<f64>::new(cfg, 1).unwrap();
        let z = Tensor::full(&[4, 8, 16], 0.3);
        assert_eq!(model.forward(&z, &z).unwrap().shape(), &[4, 8, 16]);
    }

    #[test]
    fn zero_model_is_identity_under_apply() {
        let model = EdnModel::<f64>::zeros(EdnConfig::micro(8, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_tensor(&[3, 4, 8, 8], &mut rng);
        let i = random_tensor(&[4, 8, 8], &mut rng);
        assert!(predict_residual(&model, &z, &i).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(apply_edn(&model, &z, &i).unwrap(), z);
    }

    #[test]
    fn apply_minus_noise_is_residual() {
        let model = EdnModel::<f64>::new(EdnConfig::micro(8, 8), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_tensor(&[4, 8, 8], &mut rng);
        let i = random_tensor(&[4, 8, 8], &mut rng);
        let s = model.forward(&z, &i).unwrap();
        let back = apply_edn(&model, &z, &i).unwrap().sub(&z).unwrap();
        assert!(back.max_abs_diff(&s).unwrap() < 1e-12);
    }

    #[test]
    fn smooth_l1_examples() {
        let t = |v: f64| Tensor::<f64>::from_f64(vec![1], &[v]).unwrap();
        assert_eq!(smooth_l1(&t(0.5), &t(0.5)).unwrap(), 0.0);
        assert_eq!(smooth_l1(&t(0.5), &t(0.0)).unwrap(), 0.125);
        assert_eq!(smooth_l1(&t(2.0), &t(0.0)).unwrap(), 1.5);
        assert!(smooth_l1(&t(2.0), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 3e-4);
        assert!((cfg.lr_at(201) - 0.00024).abs() < 1e-15);
        assert!((cfg.lr_at(400) - 0.000192).abs() < 1e-15);
        assert!((cfg.lr_at(599) - 0.000192).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut model = EdnModel::<f64>::new(EdnConfig::micro(8, 8), 9).unwrap();
        for bn in model.norms_mut() {
            bn.running_mean = bn.running_mean.map(|_| 0.25);
        }
        let bytes = write_checkpoint(&mut model, Vec::new()).unwrap();
        assert_eq!(&bytes[..4], b"EDNM");
        let mut back: EdnModel<f64> = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(write_checkpoint(&mut back, Vec::new()).unwrap(), bytes);
        assert!(read_checkpoint::<f64, _>(&bytes[..bytes.len() - 2]).is_err());
    }
}
