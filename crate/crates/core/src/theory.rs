//! Numerical checks of the inference-inversion roundtrip identities.
//!
//! One guided Euler step followed by one inverted step with a different
//! guidance scale moves the latent by a fixed coefficient times the
//! difference of the two model outputs. With classifier-free guidance that
//! difference is `(gamma1 - gamma2) (mu_cond - mu_uncond)`, the semantic
//! injection term. Constant predictors make the identity exact; for
//! input-dependent predictors it holds to first order in the step size.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::collector::{inference_phase, inversion_phase, predict_views, CollectionConfig};
use crate::error::{Error, Result};
use crate::guidance::CfgSchedule;
use crate::scalar::Scalar;
use crate::scheduler::{descale, euler_step, initial_noise, invert_step, rescale_factor, step_coefficients};
use crate::scheduler::{PredictionType, SigmaSchedule};
use crate::testbed::{NoisePredictor, PromptContext, ToyWorld, ToyWorldSpec};
use crate::tensor::Tensor;

/// Relative tolerance for the exact identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

/// Predictor whose outputs ignore the latent, the level and the pose.
#[derive(Clone, Debug, PartialEq)]
pub struct MockPredictor<T: Scalar> {
    mu_cond: Tensor<T>,
    mu_uncond: Tensor<T>,
}

impl<T: Scalar> MockPredictor<T> {
    pub fn new(mu_cond: Tensor<T>, mu_uncond: Tensor<T>) -> Result<Self> {
        mu_cond.ensure_same_shape(&mu_uncond, "MockPredictor")?;
        Ok(Self { mu_cond, mu_uncond })
    }

    pub fn constant(shape: &[usize], cond: T, uncond: T) -> Self {
        Self {
            mu_cond: Tensor::full(shape, cond),
            mu_uncond: Tensor::full(shape, uncond),
        }
    }

    pub fn mu_cond(&self) -> &Tensor<T> {
        &self.mu_cond
    }

    pub fn mu_uncond(&self) -> &Tensor<T> {
        &self.mu_uncond
    }
}

impl<T: Scalar> NoisePredictor<T> for MockPredictor<T> {
    fn predict(
        &self,
        prompt: &PromptContext<T>,
        z_scaled: &Tensor<T>,
        _sigma: T,
        _kind: PredictionType,
    ) -> Result<Tensor<T>> {
        let out = if prompt.is_null { &self.mu_uncond } else { &self.mu_cond };
        z_scaled.ensure_same_shape(out, "MockPredictor::predict")?;
        Ok(out.clone())
    }
}

/// Factor multiplying `eps1 - eps2` in a one-step roundtrip.
pub fn roundtrip_coefficient<T: Scalar>(sigma_t: T, sigma_prev: T, kind: PredictionType) -> T {
    let ds = sigma_prev - sigma_t;
    match kind {
        PredictionType::Epsilon => ds,
        PredictionType::VPrediction => rescale_factor(sigma_t) * ds / (T::one() + sigma_t * sigma_prev),
    }
}

/// `invert_step(euler_step(z, eps1), eps2) - z`.
pub fn roundtrip_delta<T: Scalar>(
    z_t: &Tensor<T>,
    eps1: &Tensor<T>,
    eps2: &Tensor<T>,
    sigma_t: T,
    sigma_prev: T,
    kind: PredictionType,
) -> Result<Tensor<T>> {
    eps1.ensure_same_shape(eps2, "roundtrip_delta")?;
    let z_prev = euler_step(z_t, eps1, sigma_t, sigma_prev, kind)?;
    invert_step(&z_prev, eps2, sigma_t, sigma_prev, kind)?.sub(z_t)
}

/// `(gamma1 - gamma2) (mu_cond - mu_uncond)`
pub fn semantic_injection_term<T: Scalar>(
    mu_cond: &Tensor<T>,
    mu_uncond: &Tensor<T>,
    gamma1: T,
    gamma2: T,
) -> Result<Tensor<T>> {
    Ok(mu_cond.sub(mu_uncond)?.scale(gamma1 - gamma2))
}

/// Per-step coefficient used by the closed forms; replaceable to exercise
/// the failure path.
pub type CoefficientFn = fn(f64, f64, PredictionType) -> f64;

fn exact_coefficient(sigma_t: f64, sigma_prev: f64, kind: PredictionType) -> f64 {
    roundtrip_coefficient(sigma_t, sigma_prev, kind)
}

/// Total coefficient of an `n`-step roundtrip with a constant output gap.
///
/// Each inverted step divides the accumulated offset by the forward step's
/// `a` before adding its own contribution.
pub fn telescoped_coefficient(
    schedule: &SigmaSchedule<f64>,
    n: usize,
    kind: PredictionType,
    coefficient: CoefficientFn,
) -> Result<f64> {
    let top = schedule.steps();
    if n < 1 || n > top {
        return Err(Error::Argument(format!("n = {n} outside 1..={top}")));
    }
    let mut total = 0.0;
    for t in top - n + 1..=top {
        let (sigma, sigma_prev) = (schedule.sigma(t), schedule.sigma(t - 1));
        let (a, _) = step_coefficients(sigma, sigma_prev, kind);
        total = total / a + coefficient(sigma, sigma_prev, kind);
    }
    Ok(total)
}

/// Measured and predicted roundtrip offsets for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport<T: Scalar> {
    pub kind: PredictionType,
    pub steps: usize,
    pub measured: Tensor<T>,
    pub predicted: Tensor<T>,
    pub max_abs_deviation: f64,
    /// Deviation over the largest predicted magnitude, or over the largest
    /// latent magnitude when the prediction is identically zero.
    pub relative_deviation: f64,
}

impl<T: Scalar> IdentityReport<T> {
    fn new(kind: PredictionType, steps: usize, z_t: &Tensor<T>, measured: Tensor<T>, predicted: Tensor<T>) -> Result<Self> {
        let max_abs_deviation = measured.max_abs_diff(&predicted)?.as_f64();
        let scale = predicted.max_abs().as_f64();
        let denom = if scale > 0.0 { scale } else { z_t.max_abs().as_f64().max(1.0) };
        Ok(Self {
            kind,
            steps,
            measured,
            predicted,
            max_abs_deviation,
            relative_deviation: max_abs_deviation / denom,
        })
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.relative_deviation < tolerance
    }

    fn diagnostics(&self) -> String {
        format!(
            "{} over {} step(s): max |measured - predicted| = {:.3e}, relative {:.3e}, |predicted|max = {:.3e}",
            self.kind.name(),
            self.steps,
            self.max_abs_deviation,
            self.relative_deviation,
            self.predicted.max_abs().as_f64()
        )
    }
}

/// Two-level schedule `[sigma_t, sigma_prev, 0]`, or `[sigma_t, 0]` when
/// `sigma_prev` is zero.
pub fn single_step_schedule(sigma_t: f64, sigma_prev: f64) -> Result<SigmaSchedule<f64>> {
    if sigma_prev == 0.0 {
        SigmaSchedule::from_sigmas(vec![sigma_t, 0.0])
    } else {
        SigmaSchedule::from_sigmas(vec![sigma_t, sigma_prev, 0.0])
    }
}

/// Runs the collector's inference and inversion phases without alignment
/// and returns `z~_T - z_T`.
pub fn collector_delta<P: NoisePredictor<f64> + ?Sized>(
    z_t: &Tensor<f64>,
    reference: &Tensor<f64>,
    predictor: &P,
    gamma1: f64,
    gamma2: f64,
    schedule: &SigmaSchedule<f64>,
    n: usize,
    kind: PredictionType,
) -> Result<Tensor<f64>> {
    let config = CollectionConfig {
        n,
        gamma1: CfgSchedule::constant(gamma1),
        gamma2,
        kind,
        align: false,
    };
    let (z_low, stats) = inference_phase(z_t, reference, &config, schedule, predictor)?;
    inversion_phase(&z_low, &stats, reference, &config, schedule, predictor)?.sub(z_t)
}

fn mock_term(mock: &MockPredictor<f64>, views: usize, gamma1: f64, gamma2: f64) -> Result<Tensor<f64>> {
    let term = semantic_injection_term(mock.mu_cond(), mock.mu_uncond(), gamma1, gamma2)?;
    Tensor::stack(&vec![term; views])
}

/// Compares the collector's `n`-step offset under a constant predictor with
/// the telescoped closed form, without judging the result.
pub fn check_identity(
    z_t: &Tensor<f64>,
    mock: &MockPredictor<f64>,
    gamma1: f64,
    gamma2: f64,
    schedule: &SigmaSchedule<f64>,
    n: usize,
    kind: PredictionType,
    coefficient: CoefficientFn,
) -> Result<IdentityReport<f64>> {
    let views = z_t.shape().first().copied().unwrap_or(0);
    let measured = collector_delta(z_t, mock.mu_cond(), mock, gamma1, gamma2, schedule, n, kind)?;
    let coef = telescoped_coefficient(schedule, n, kind, coefficient)?;
    let predicted = mock_term(mock, views, gamma1, gamma2)?.scale(coef);
    IdentityReport::new(kind, n, z_t, measured, predicted)
}

/// One-step check of the roundtrip identity through the collector path.
///
/// `z_t` is a `[views, ..]` sample; the mock's tensors have the shape of
/// one view.
pub fn verify_identity(
    z_t: &Tensor<f64>,
    mock: &MockPredictor<f64>,
    gamma1: f64,
    gamma2: f64,
    sigma_t: f64,
    sigma_prev: f64,
    kind: PredictionType,
) -> Result<IdentityReport<f64>> {
    let schedule = single_step_schedule(sigma_t, sigma_prev)?;
    let report = check_identity(z_t, mock, gamma1, gamma2, &schedule, 1, kind, exact_coefficient)?;
    if !report.passed(IDENTITY_TOLERANCE) {
        return Err(Error::Verification(report.diagnostics()));
    }
    Ok(report)
}

/// Deviation from the first-order prediction at one step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LadderPoint {
    pub gap: f64,
    pub max_abs_deviation: f64,
    pub predicted_max: f64,
}

/// One-step roundtrips with the toy predictor at shrinking step sizes.
///
/// The prediction evaluates `mu_cond - mu_uncond` at the starting latent.
pub fn step_ladder(
    world: &ToyWorld<f64>,
    object: usize,
    kind: PredictionType,
    sigma_t: f64,
    gaps: &[f64],
    gamma1: f64,
    gamma2: f64,
    seed: u64,
) -> Result<Vec<LadderPoint>> {
    let z_t = initial_noise(&world.sample_shape(), seed, rescale_factor(sigma_t));
    let reference = world.reference(object).clone();
    let (mu_c, mu_u) = predict_views(world, &reference, &descale(&z_t, sigma_t), sigma_t, kind)?;
    let term = semantic_injection_term(&mu_c, &mu_u, gamma1, gamma2)?;
    gaps.iter()
        .map(|&gap| {
            let sigma_prev = sigma_t - gap;
            if !(gap > 0.0) || !(sigma_prev > 0.0) {
                return Err(Error::Argument(format!("step gap {gap} must lie in (0, {sigma_t})")));
            }
            let schedule = single_step_schedule(sigma_t, sigma_prev)?;
            let measured = collector_delta(&z_t, &reference, world, gamma1, gamma2, &schedule, 1, kind)?;
            let predicted = term.scale(roundtrip_coefficient(sigma_t, sigma_prev, kind));
            Ok(LadderPoint {
                gap,
                max_abs_deviation: measured.max_abs_diff(&predicted)?,
                predicted_max: predicted.max_abs(),
            })
        })
        .collect()
}

/// Log-log slopes of deviation against gap between consecutive points.
pub fn empirical_orders(points: &[LadderPoint]) -> Vec<f64> {
    points
        .windows(2)
        .map(|w| (w[0].max_abs_deviation / w[1].max_abs_deviation).ln() / (w[0].gap / w[1].gap).ln())
        .collect()
}

/// True when `deviation / gap` never grows as the gap shrinks.
pub fn shrinks_at_least_linearly(points: &[LadderPoint]) -> bool {
    points.windows(2).all(|w| {
        let (a, b) = (w[0].max_abs_deviation / w[0].gap, w[1].max_abs_deviation / w[1].gap);
        w[1].gap < w[0].gap && b <= a * (1.0 + 1e-9)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random parameter draws per prediction type.
    pub draws: usize,
    pub tolerance: f64,
    /// `[views, channels, height, width]` of the random latents.
    pub sample_shape: Vec<usize>,
    /// Multi-step schedule for the telescoping check.
    pub schedule: SigmaSchedule<f64>,
    pub n: usize,
    pub ladder_sigma: f64,
    pub ladder_gaps: Vec<f64>,
    /// Multiplies every predicted coefficient; anything but 1 must fail.
    pub coefficient_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            draws: 500,
            tolerance: IDENTITY_TOLERANCE,
            sample_shape: vec![2, 4, 4, 4],
            schedule: SigmaSchedule::karras(25, 0.002, 700.0, 7.0).expect("valid default schedule"),
            n: 16,
            ladder_sigma: 4.0,
            ladder_gaps: (2..8).map(|k| 0.5f64.powi(k)).collect(),
            coefficient_scale: 1.0,
        }
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub kind: PredictionType,
    pub trials: usize,
    /// `max_relative_deviation` for the identities, `min_order` for the
    /// ladder.
    pub statistic: &'static str,
    pub value: f64,
    /// Upper bound for deviations, lower bound for orders.
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationSummary {
    pub checks: Vec<CheckResult>,
}

impl VerificationSummary {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    /// `check,kind,trials,statistic,value,threshold,status` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,kind,trials,statistic,value,threshold,status\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:e},{}",
                c.name,
                c.kind.name(),
                c.trials,
                c.statistic,
                c.value,
                c.threshold,
                if c.passed { "pass" } else { "fail" }
            );
        }
        out
    }
}

impl fmt::Display for VerificationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "roundtrip identity verification")?;
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {} ({}, {} trials): {} {:.3e} (threshold {:.1e})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.kind.name(),
                c.trials,
                c.statistic,
                c.value,
                c.threshold
            )?;
            if !c.detail.is_empty() {
                writeln!(f, "       {}", c.detail)?;
            }
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn normal_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random `(z, mock, gamma1, gamma2, sigma_t, sigma_prev)` draw.
fn draw_case(shape: &[usize], rng: &mut ChaCha8Rng) -> (Tensor<f64>, MockPredictor<f64>, f64, f64, f64, f64) {
    let sigma_t = (rng.gen_range(0.05f64.ln()..50f64.ln())).exp();
    let sigma_prev = if rng.gen_bool(0.1) { 0.0 } else { sigma_t * rng.gen_range(0.0..0.95) };
    let gamma2 = rng.gen_range(0.0..5.0);
    let gamma1 = gamma2 + rng.gen_range(0.1..10.0);
    let z = normal_tensor(shape, rescale_factor(sigma_t), rng);
    let frame = &shape[1..];
    let mock = MockPredictor {
        mu_cond: normal_tensor(frame, 1.0, rng),
        mu_uncond: normal_tensor(frame, 1.0, rng),
    };
    (z, mock, gamma1, gamma2, sigma_t, sigma_prev)
}

struct Tally {
    worst: f64,
    detail: String,
}

impl Tally {
    fn new() -> Self {
        Self {
            worst: 0.0,
            detail: String::new(),
        }
    }

    fn record(&mut self, report: &IdentityReport<f64>, context: impl FnOnce() -> String) {
        if !(report.relative_deviation <= self.worst) {
            self.worst = report.relative_deviation;
            self.detail = format!("worst case {}; {}", context(), report.diagnostics());
        }
    }
}

fn ladder_world(shape: &[usize]) -> Result<ToyWorld<f64>> {
    let [views, channels, height, width] = shape else {
        return Err(Error::Config(format!("verification shape must be [views, c, h, w], got {shape:?}")));
    };
    ToyWorld::from_spec(&ToyWorldSpec {
        channels: *channels,
        height: *height,
        width: *width,
        num_views: *views,
        view_shift: 1,
        ..ToyWorldSpec::default()
    })
}

/// Random one-step draws, the multi-step telescoping check and the toy
/// step-size ladder, for both prediction types.
pub fn run_verification(config: &VerifyConfig) -> Result<VerificationSummary> {
    if config.sample_shape.len() < 2 || config.draws == 0 {
        return Err(Error::Config("verification needs a [views, ..] shape and at least one draw".into()));
    }
    let coefficient_scale = config.coefficient_scale;
    let mut summary = VerificationSummary::default();
    for kind in [PredictionType::Epsilon, PredictionType::VPrediction] {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut tally = Tally::new();
        for _ in 0..config.draws {
            let (z, mock, g1, g2, st, sp) = draw_case(&config.sample_shape, &mut rng);
            let schedule = single_step_schedule(st, sp)?;
            let mut report = check_identity(&z, &mock, g1, g2, &schedule, 1, kind, exact_coefficient)?;
            if coefficient_scale != 1.0 {
                report = IdentityReport::new(kind, 1, &z, report.measured, report.predicted.scale(coefficient_scale))?;
            }
            tally.record(&report, || format!("gamma1={g1:.4}, gamma2={g2:.4}, sigma_t={st:.5}, sigma_prev={sp:.5}"));
        }
        summary.checks.push(CheckResult {
            name: "one_step_identity".into(),
            kind,
            trials: config.draws,
            statistic: "max_relative_deviation",
            passed: tally.worst < config.tolerance,
            value: tally.worst,
            threshold: config.tolerance,
            detail: tally.detail,
        });

        let mut tally = Tally::new();
        let trials = config.draws.clamp(1, 20);
        for _ in 0..trials {
            let (z0, mock, g1, g2, _, _) = draw_case(&config.sample_shape, &mut rng);
            let z = z0.scale(config.schedule.q() / z0.std().max(f64::MIN_POSITIVE));
            let mut report = check_identity(&z, &mock, g1, g2, &config.schedule, config.n, kind, exact_coefficient)?;
            if coefficient_scale != 1.0 {
                report = IdentityReport::new(kind, config.n, &z, report.measured, report.predicted.scale(coefficient_scale))?;
            }
            tally.record(&report, || format!("gamma1={g1:.4}, gamma2={g2:.4}"));
        }
        summary.checks.push(CheckResult {
            name: "telescoped_identity".into(),
            kind,
            trials,
            statistic: "max_relative_deviation",
            passed: tally.worst < config.tolerance,
            value: tally.worst,
            threshold: config.tolerance,
            detail: tally.detail,
        });

        let world = ladder_world(&config.sample_shape)?;
        let points = step_ladder(&world, 0, kind, config.ladder_sigma, &config.ladder_gaps, 6.0, 0.0, config.seed)?;
        let orders = empirical_orders(&points);
        let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
        summary.checks.push(CheckResult {
            name: "first_order_ladder".into(),
            kind,
            trials: points.len(),
            statistic: "min_order",
            value: min_order,
            threshold: 1.0,
            passed: shrinks_at_least_linearly(&points),
            detail: format!(
                "gaps {:?}; deviations [{}]; empirical orders [{}]",
                config.ladder_gaps,
                points.iter().map(|p| format!("{:.3e}", p.max_abs_deviation)).collect::<Vec<_>>().join(", "),
                orders.iter().map(|o| format!("{o:.2}")).collect::<Vec<_>>().join(", ")
            ),
        });
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_delta_examples() {
        let z = Tensor::<f64>::from_f64(vec![3], &[0.3, -1.2, 4.0]).unwrap();
        let eps = Tensor::full(&[3], 0.7);
        for kind in [PredictionType::Epsilon, PredictionType::VPrediction] {
            assert!(roundtrip_delta(&z, &eps, &eps, 2.0, 1.0, kind).unwrap().max_abs() < 1e-12);
        }
        let d = roundtrip_delta(&z, &Tensor::full(&[3], 1.5), &Tensor::full(&[3], 0.5), 2.0, 1.0, PredictionType::Epsilon)
            .unwrap();
        assert!(d.data().iter().all(|x| (x + 1.0).abs() < 1e-12));
        let d = roundtrip_delta(&z, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1.0, 0.0, PredictionType::VPrediction)
            .unwrap();
        assert!(d.data().iter().all(|x| (x + 2f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn semantic_injection_examples() {
        let c = Tensor::full(&[2, 2], 0.5);
        let u = Tensor::zeros(&[2, 2]);
        assert!(semantic_injection_term(&c, &u, 6.0, 0.0).unwrap().data().iter().all(|&x| x == 3.0));
        assert_eq!(semantic_injection_term(&c, &u, 2.0, 2.0).unwrap().max_abs(), 0.0);
        assert_eq!(semantic_injection_term(&c, &c, 6.0, 0.0).unwrap().max_abs(), 0.0);
        assert!(semantic_injection_term(&c, &Tensor::zeros(&[3]), 1.0, 0.0).is_err());
    }

    #[test]
    fn verify_identity_examples() {
        let z = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64 * 0.37 - 1.0);
        let mock = MockPredictor::constant(&[1, 2, 2], 0.5, 0.0);
        let r = verify_identity(&z, &mock, 6.0, 0.0, 2.0, 1.0, PredictionType::Epsilon).unwrap();
        assert!(r.measured.data().iter().all(|x| (x + 3.0).abs() < 1e-12));
        let same = MockPredictor::constant(&[1, 2, 2], 0.2, 0.2);
        let r = verify_identity(&z, &same, 6.0, 0.0, 2.0, 1.0, PredictionType::VPrediction).unwrap();
        assert!(r.measured.max_abs() < 1e-12);
        assert!(MockPredictor::new(Tensor::<f64>::zeros(&[2]), Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn telescoped_sum_of_epsilon_steps() {
        let schedule = SigmaSchedule::from_sigmas(vec![4.0, 3.0, 1.5, 0.0]).unwrap();
        let c = telescoped_coefficient(&schedule, 2, PredictionType::Epsilon, exact_coefficient).unwrap();
        assert!((c + 2.5).abs() < 1e-15);
        let z = Tensor::from_fn(&[1, 2, 3], |i| (i as f64).sin() * 5.0);
        let mock = MockPredictor::constant(&[2, 3], 0.4, -0.1);
        for kind in [PredictionType::Epsilon, PredictionType::VPrediction] {
            let r = check_identity(&z, &mock, 5.0, 1.0, &schedule, 3, kind, exact_coefficient).unwrap();
            assert!(r.passed(IDENTITY_TOLERANCE), "{}", r.diagnostics());
        }
        assert!(telescoped_coefficient(&schedule, 4, PredictionType::Epsilon, exact_coefficient).is_err());
    }

    #[test]
    fn bad_coefficient_fails() {
        let z = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let mock = MockPredictor::constant(&[1, 2, 2], 1.0, 0.0);
        let schedule = single_step_schedule(3.0, 1.0).unwrap();
        let wrong: CoefficientFn = |s, p, _| p - s + 1e-3;
        let r = check_identity(&z, &mock, 4.0, 0.0, &schedule, 1, PredictionType::Epsilon, wrong).unwrap();
        assert!(!r.passed(IDENTITY_TOLERANCE));
    }

    #[test]
    fn default_verification_passes() {
        let summary = run_verification(&VerifyConfig::default()).unwrap();
        assert_eq!(summary.checks.len(), 6);
        assert!(summary.passed(), "{summary}");
        assert!(summary.to_csv().lines().skip(1).all(|l| l.ends_with(",pass")));
    }

    #[test]
    fn injected_coefficient_error_fails() {
        let cfg = VerifyConfig {
            draws: 20,
            coefficient_scale: 1.001,
            ..VerifyConfig::default()
        };
        let summary = run_verification(&cfg).unwrap();
        assert!(!summary.passed());
        let text = summary.to_string();
        assert!(text.contains("FAIL") && text.contains("max |measured - predicted|"), "{text}");
    }
}
