//! Inference-inversion noise pair collection.
//!
//! `n` guided Euler steps with scale `gamma1` take the random noise `z_T` to
//! `z_{T-n}`; `n` inversion steps with the smaller scale `gamma2` bring it
//! back to `z~_T`. Because the two passes disagree only in guidance strength,
//! `z~_T - z_T` carries the conditional-minus-unconditional signal. Every
//! inversion input is re-aligned to the mean/std recorded at the matching
//! inference step.

use crate::error::{Error, Result};
use crate::guidance::{combine_cfg, CfgSchedule};
use crate::scalar::Scalar;
use crate::scheduler::{descale, euler_step, initial_noise, invert_step, PredictionType, SigmaSchedule};
use crate::tensor::Tensor;
use crate::testbed::{NoisePredictor, PromptContext, ToyWorld};

/// `target_std * (z - mean(z)) / std(z) + target_mean`, with population
/// statistics over every element.
pub fn align<T: Scalar>(z: &Tensor<T>, target_mean: T, target_std: T) -> Result<Tensor<T>> {
    let (m, s) = z.mean_std();
    if !(s > T::zero()) {
        return Err(Error::Degenerate(format!(
            "cannot align a tensor with zero standard deviation (mean {m})"
        )));
    }
    let k = target_std / s;
    Ok(z.map(|x| k * (x - m) + target_mean))
}

pub fn align_to<T: Scalar>(z: &Tensor<T>, stats: Moments<T>) -> Result<Tensor<T>> {
    align(z, stats.mean, stats.std)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments<T> {
    pub mean: T,
    pub std: T,
}

impl<T: Scalar> Moments<T> {
    pub fn of(x: &Tensor<T>) -> Self {
        let (mean, std) = x.mean_std();
        Self { mean, std }
    }
}

/// Statistics recorded at one inference step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats<T> {
    pub t: usize,
    pub z_scaled: Moments<T>,
    pub mu_cond: Moments<T>,
    pub mu_uncond: Moments<T>,
    pub z: Moments<T>,
}

/// Per-step statistics from an inference pass, in execution order
/// (`t = T, T-1, ..., T-n+1`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatRecord<T> {
    pub steps: Vec<StepStats<T>>,
}

impl<T: Scalar> StatRecord<T> {
    pub fn at(&self, t: usize) -> Result<&StepStats<T>> {
        self.steps
            .iter()
            .find(|s| s.t == t)
            .ok_or_else(|| Error::Protocol(format!("no inference statistics recorded for timestep {t}")))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectionConfig {
    /// Inference (and inversion) steps.
    pub n: usize,
    /// Inference guidance.
    pub gamma1: CfgSchedule,
    /// Inversion guidance.
    pub gamma2: f64,
    pub kind: PredictionType,
    /// Distribution alignment during inversion (disable only to study the
    /// raw update).
    pub align: bool,
}

impl CollectionConfig {
    pub fn validate<T: Scalar>(&self, schedule: &SigmaSchedule<T>, num_views: usize) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("collection needs n >= 1".into()));
        }
        if self.n > schedule.steps() {
            return Err(Error::Config(format!(
                "n = {} exceeds the schedule's {} steps",
                self.n,
                schedule.steps()
            )));
        }
        let gammas = self.gamma1.gammas(num_views)?;
        if let Some(g) = gammas.iter().find(|&&g| g < self.gamma2) {
            return Err(Error::Config(format!(
                "inference guidance {g} must not be below inversion guidance {}",
                self.gamma2
            )));
        }
        Ok(())
    }
}

fn num_views<T: Scalar>(sample: &Tensor<T>) -> Result<usize> {
    if sample.rank() < 2 {
        return Err(Error::Shape {
            op: "collector",
            detail: format!("sample must be [views, ..], got {:?}", sample.shape()),
        });
    }
    Ok(sample.shape()[0])
}

/// Conditional and unconditional predictions for every view of a sample.
pub fn predict_views<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    reference: &Tensor<T>,
    z_scaled: &Tensor<T>,
    sigma: T,
    kind: PredictionType,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let views = num_views(z_scaled)?;
    let mut cond = Vec::with_capacity(views);
    let mut uncond = Vec::with_capacity(views);
    for (v, frame) in z_scaled.outer_iter().enumerate() {
        let prompt = PromptContext::conditional(reference.clone(), v);
        cond.push(predictor.predict(&prompt, &frame, sigma, kind)?);
        uncond.push(predictor.predict(&prompt.to_null(), &frame, sigma, kind)?);
    }
    Ok((Tensor::stack(&cond)?, Tensor::stack(&uncond)?))
}

/// Classifier-free guidance with a separate scale per view.
pub fn combine_views<T: Scalar>(mu_cond: &Tensor<T>, mu_uncond: &Tensor<T>, gammas: &[f64]) -> Result<Tensor<T>> {
    mu_cond.ensure_same_shape(mu_uncond, "combine_views")?;
    if gammas.len() != num_views(mu_cond)? {
        return Err(Error::Argument(format!(
            "{} guidance scales for {} views",
            gammas.len(),
            mu_cond.shape()[0]
        )));
    }
    let frames: Vec<Tensor<T>> = mu_cond
        .outer_iter()
        .zip(mu_uncond.outer_iter())
        .zip(gammas)
        .map(|((c, u), &g)| combine_cfg(&c, &u, T::lit(g)))
        .collect::<Result<_>>()?;
    Tensor::stack(&frames)
}

/// Guided Euler inference for `config.n` steps from `z_T`, recording the
/// statistics the inversion re-aligns against.
pub fn inference_phase<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    z_t: &Tensor<T>,
    reference: &Tensor<T>,
    config: &CollectionConfig,
    schedule: &SigmaSchedule<T>,
    predictor: &P,
) -> Result<(Tensor<T>, StatRecord<T>)> {
    let views = num_views(z_t)?;
    config.validate(schedule, views)?;
    let gammas = config.gamma1.gammas(views)?;
    let top = schedule.steps();
    let mut z = z_t.clone();
    let mut stats = StatRecord::default();
    for t in (top - config.n + 1..=top).rev() {
        let (sigma, sigma_prev) = (schedule.sigma(t), schedule.sigma(t - 1));
        let z_scaled = descale(&z, sigma);
        let (mu_c, mu_u) = predict_views(predictor, reference, &z_scaled, sigma, config.kind)?;
        let eps = combine_views(&mu_c, &mu_u, &gammas)?;
        stats.steps.push(StepStats {
            t,
            z_scaled: Moments::of(&z_scaled),
            mu_cond: Moments::of(&mu_c),
            mu_uncond: Moments::of(&mu_u),
            z: Moments::of(&z),
        });
        z = euler_step(&z, &eps, sigma, sigma_prev, config.kind)?;
    }
    Ok((z, stats))
}

/// Mean/std of `z~_t` after each inversion step, in execution order.
pub type InversionTrace<T> = Vec<(usize, Moments<T>)>;

/// Guided Euler inversion for `config.n` steps from `z_{T-n}` back to `z~_T`.
pub fn inversion_phase<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    z_low: &Tensor<T>,
    stats: &StatRecord<T>,
    reference: &Tensor<T>,
    config: &CollectionConfig,
    schedule: &SigmaSchedule<T>,
    predictor: &P,
) -> Result<Tensor<T>> {
    inversion_phase_traced(z_low, stats, reference, config, schedule, predictor).map(|(z, _)| z)
}

pub fn inversion_phase_traced<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    z_low: &Tensor<T>,
    stats: &StatRecord<T>,
    reference: &Tensor<T>,
    config: &CollectionConfig,
    schedule: &SigmaSchedule<T>,
    predictor: &P,
) -> Result<(Tensor<T>, InversionTrace<T>)> {
    let views = num_views(z_low)?;
    config.validate(schedule, views)?;
    let gammas = vec![config.gamma2; views];
    let top = schedule.steps();
    let mut z = z_low.clone();
    let mut trace = Vec::with_capacity(config.n);
    for t in top - config.n + 1..=top {
        let (sigma, sigma_prev) = (schedule.sigma(t), schedule.sigma(t - 1));
        let rec = if config.align { Some(stats.at(t)?) } else { None };
        // the latent lives at sigma_{t-1}; the predictor is queried at t
        let mut z_scaled = descale(&z, sigma_prev);
        if let Some(rec) = rec {
            z_scaled = align_to(&z_scaled, rec.z_scaled)?;
        }
        let (mut mu_c, mut mu_u) = predict_views(predictor, reference, &z_scaled, sigma, config.kind)?;
        if let Some(rec) = rec {
            mu_c = align_to(&mu_c, rec.mu_cond)?;
            mu_u = align_to(&mu_u, rec.mu_uncond)?;
        }
        let eps = combine_views(&mu_c, &mu_u, &gammas)?;
        z = invert_step(&z, &eps, sigma, sigma_prev, config.kind)?;
        if let Some(rec) = rec {
            z = align_to(&z, rec.z)?;
        }
        trace.push((t, Moments::of(&z)));
    }
    Ok((z, trace))
}

/// One training record: random noise, its inverted counterpart, and the
/// reference latent that conditioned the roundtrip.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair<T: Scalar> {
    pub z_t: Tensor<T>,
    pub z_tilde_t: Tensor<T>,
    pub reference: Tensor<T>,
    pub seed: u64,
    pub n: usize,
    pub gamma1: CfgSchedule,
    pub gamma2: f64,
    pub s_rd: Option<T>,
    pub s_hq: Option<T>,
}

impl<T: Scalar> NoisePair<T> {
    /// Learning target `z~_T - z_T`.
    pub fn semantic_target(&self) -> Result<Tensor<T>> {
        self.z_tilde_t.sub(&self.z_t)
    }
}

/// Runs the full roundtrip for one seed of the toy world.
pub fn collect_pair<T: Scalar>(
    seed: u64,
    world: &ToyWorld<T>,
    config: &CollectionConfig,
    schedule: &SigmaSchedule<T>,
) -> Result<NoisePair<T>> {
    let reference = world.reference(world.object_for_seed(seed)).clone();
    let z_t = initial_noise(&world.sample_shape(), seed, schedule.q());
    collect_pair_from(seed, z_t, reference, world, config, schedule)
}

/// Roundtrip for explicit noise and reference with any predictor.
pub fn collect_pair_from<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    seed: u64,
    z_t: Tensor<T>,
    reference: Tensor<T>,
    predictor: &P,
    config: &CollectionConfig,
    schedule: &SigmaSchedule<T>,
) -> Result<NoisePair<T>> {
    let (z_low, stats) = inference_phase(&z_t, &reference, config, schedule, predictor)?;
    let z_tilde_t = inversion_phase(&z_low, &stats, &reference, config, schedule, predictor)?;
    Ok(NoisePair {
        z_t,
        z_tilde_t,
        reference,
        seed,
        n: config.n,
        gamma1: config.gamma1,
        gamma2: config.gamma2,
        s_rd: None,
        s_hq: None,
    })
}

/// Per-seed failure from a batch collection.
#[derive(Debug)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: Error,
}

/// Collects pairs for every seed in order; failing seeds are reported and
/// skipped.
pub fn collect_batch<T: Scalar>(
    seeds: impl IntoIterator<Item = u64>,
    world: &ToyWorld<T>,
    config: &CollectionConfig,
    schedule: &SigmaSchedule<T>,
) -> (Vec<NoisePair<T>>, Vec<SeedFailure>) {
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for seed in seeds {
        match collect_pair(seed, world, config, schedule) {
            Ok(p) => pairs.push(p),
            Err(error) => failures.push(SeedFailure { seed, error }),
        }
    }
    (pairs, failures)
}

/// Full guided generation from `z_T` down to `sigma = 0`.
pub fn generate<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    z_t: &Tensor<T>,
    reference: &Tensor<T>,
    gamma: &CfgSchedule,
    kind: PredictionType,
    schedule: &SigmaSchedule<T>,
    predictor: &P,
) -> Result<Tensor<T>> {
    let views = num_views(z_t)?;
    let gammas = gamma.gammas(views)?;
    let mut z = z_t.clone();
    for t in (1..=schedule.steps()).rev() {
        let (sigma, sigma_prev) = (schedule.sigma(t), schedule.sigma(t - 1));
        let z_scaled = descale(&z, sigma);
        let (mu_c, mu_u) = predict_views(predictor, reference, &z_scaled, sigma, kind)?;
        let eps = combine_views(&mu_c, &mu_u, &gammas)?;
        z = euler_step(&z, &eps, sigma, sigma_prev, kind)?;
    }
    Ok(z)
}
