//! Discretized Euler noise schedule with latent rescaling, forward (denoising)
//! steps, and their exact inverses for epsilon- and v-prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictionType {
    VPrediction,
    Epsilon,
}

impl PredictionType {
    pub fn name(self) -> &'static str {
        match self {
            Self::VPrediction => "v_prediction",
            Self::Epsilon => "epsilon",
        }
    }
}

impl std::str::FromStr for PredictionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v" | "v_prediction" | "v-prediction" => Ok(Self::VPrediction),
            "epsilon" | "eps" => Ok(Self::Epsilon),
            other => Err(Error::Config(format!("unknown prediction type {other:?}"))),
        }
    }
}

/// Strictly decreasing noise levels `sigma_T, ..., sigma_0 = 0`.
///
/// Timesteps are positional: timestep `t` (with `T = steps()`) has level
/// `sigmas[T - t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule<T> {
    sigmas: Vec<T>,
    q: T,
}

impl<T: Scalar> SigmaSchedule<T> {
    /// Karras rho-ramp from `sigma_max` down to `sigma_min` in `steps` levels,
    /// followed by a terminal zero.
    pub fn karras(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(sigma_min > 0.0) {
            return Err(Error::Config(format!("sigma_min must be positive, got {sigma_min}")));
        }
        if !(sigma_max > sigma_min) || !sigma_max.is_finite() {
            return Err(Error::Config(format!(
                "sigma_max ({sigma_max}) must exceed sigma_min ({sigma_min})"
            )));
        }
        if !(rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {rho}")));
        }
        let mut sigmas = Vec::with_capacity(steps + 1);
        if steps == 1 {
            sigmas.push(T::lit(sigma_max));
        } else {
            let hi = sigma_max.powf(1.0 / rho);
            let lo = sigma_min.powf(1.0 / rho);
            for i in 0..steps {
                let frac = i as f64 / (steps - 1) as f64;
                sigmas.push(T::lit((hi + frac * (lo - hi)).powf(rho)));
            }
        }
        sigmas.push(T::zero());
        Self::from_sigmas(sigmas)
    }

    /// Wraps an explicit list of levels, highest first. The list must be
    /// strictly decreasing and end at zero.
    pub fn from_sigmas(sigmas: Vec<T>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::Config("schedule needs at least two levels".into()));
        }
        if sigmas.iter().any(|s| !s.is_finite() || *s < T::zero()) {
            return Err(Error::Config("sigmas must be finite and non-negative".into()));
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::Config("sigmas must be strictly decreasing".into()));
        }
        if *sigmas.last().expect("non-empty") != T::zero() {
            return Err(Error::Config("schedule must end at sigma = 0".into()));
        }
        let q = (sigmas[0] * sigmas[0] + T::one()).sqrt();
        Ok(Self { sigmas, q })
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// Levels in sampling order, `sigma_T` first.
    pub fn sigmas(&self) -> &[T] {
        &self.sigmas
    }

    /// Level at timestep `t` (`0 <= t <= T`).
    pub fn sigma(&self, t: usize) -> T {
        self.sigmas[self.steps() - t]
    }

    pub fn sigma_max(&self) -> T {
        self.sigmas[0]
    }

    /// Initial scaling factor `sqrt(sigma_T^2 + 1)`, the largest rescaling
    /// factor on the schedule.
    pub fn q(&self) -> T {
        self.q
    }
}

/// `sqrt(sigma^2 + 1)`
#[inline]
pub fn rescale_factor<T: Scalar>(sigma: T) -> T {
    (sigma * sigma + T::one()).sqrt()
}

/// Divides the latent by `sqrt(sigma^2 + 1)` before the denoiser sees it.
pub fn descale<T: Scalar>(z: &Tensor<T>, sigma: T) -> Tensor<T> {
    let k = rescale_factor(sigma);
    z.map(|x| x / k)
}

/// `q` times standard-normal draws from a ChaCha20 stream keyed by `seed`.
pub fn initial_noise<T: Scalar>(shape: &[usize], seed: u64, q: T) -> Tensor<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let g: f64 = StandardNormal.sample(&mut rng);
        q * T::lit(g)
    })
}

fn check_step<T: Scalar>(z: &Tensor<T>, out: &Tensor<T>, sigma_t: T, sigma_prev: T, op: &'static str) -> Result<()> {
    z.ensure_same_shape(out, op)?;
    if sigma_prev > sigma_t || sigma_prev < T::zero() {
        return Err(Error::ScheduleMisuse(format!(
            "{op}: need 0 <= sigma_prev <= sigma_t, got sigma_t={sigma_t}, sigma_prev={sigma_prev}"
        )));
    }
    Ok(())
}

/// Coefficients `(a, b)` of one Euler step `z_{t-1} = a * z_t + b * out`.
pub fn step_coefficients<T: Scalar>(sigma_t: T, sigma_prev: T, kind: PredictionType) -> (T, T) {
    let ds = sigma_prev - sigma_t;
    match kind {
        PredictionType::Epsilon => (T::one(), ds),
        PredictionType::VPrediction => {
            let s2 = sigma_t * sigma_t + T::one();
            ((T::one() + sigma_t * sigma_prev) / s2, ds / s2.sqrt())
        }
    }
}

/// One deterministic Euler denoising step from `sigma_t` to `sigma_prev`.
pub fn euler_step<T: Scalar>(
    z_t: &Tensor<T>,
    model_out: &Tensor<T>,
    sigma_t: T,
    sigma_prev: T,
    kind: PredictionType,
) -> Result<Tensor<T>> {
    check_step(z_t, model_out, sigma_t, sigma_prev, "euler_step")?;
    let (a, b) = step_coefficients(sigma_t, sigma_prev, kind);
    z_t.lin_comb(a, model_out, b)
}

/// Inverse of [`euler_step`]: recovers the `sigma_t` latent from the
/// `sigma_prev` one given the same model output.
pub fn invert_step<T: Scalar>(
    z_prev: &Tensor<T>,
    model_out: &Tensor<T>,
    sigma_t: T,
    sigma_prev: T,
    kind: PredictionType,
) -> Result<Tensor<T>> {
    check_step(z_prev, model_out, sigma_t, sigma_prev, "invert_step")?;
    let ds = sigma_prev - sigma_t;
    match kind {
        PredictionType::Epsilon => z_prev.lin_comb(T::one(), model_out, -ds),
        PredictionType::VPrediction => {
            let s2 = sigma_t * sigma_t + T::one();
            let denom = T::one() + sigma_t * sigma_prev;
            z_prev.lin_comb(s2 / denom, model_out, -(s2.sqrt() / denom) * ds)
        }
    }
}
