//! Closed-form stand-in for a multi-view diffusion model.
//!
//! The data distribution is a Gaussian mixture: each object is one
//! component with a per-view mean (a horizontally rolled pattern) and an
//! isotropic standard deviation. The conditional denoiser knows which object
//! the image prompt refers to; the unconditional denoiser marginalizes over
//! all objects. Both are exact posterior means, so every sampler identity can
//! be checked against analytic values.

pub mod tiny;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scheduler::{rescale_factor, PredictionType};
use crate::tensor::Tensor;

/// Image prompt `c` plus pose prompt `p`. The empty prompt keeps the shape of
/// `c` with every value zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptContext<T: Scalar> {
    pub c: Tensor<T>,
    pub view: usize,
    pub is_null: bool,
}

impl<T: Scalar> PromptContext<T> {
    pub fn conditional(c: Tensor<T>, view: usize) -> Self {
        Self {
            c,
            view,
            is_null: false,
        }
    }

    pub fn null(shape: &[usize], view: usize) -> Self {
        Self {
            c: Tensor::zeros(shape),
            view,
            is_null: true,
        }
    }

    /// The empty-prompt counterpart of this context (same pose).
    pub fn to_null(&self) -> Self {
        Self::null(self.c.shape(), self.view)
    }

    pub fn with_view(&self, view: usize) -> Self {
        Self {
            view,
            ..self.clone()
        }
    }
}

/// A noise predictor `mu(z', sigma, c, p)` queried on descaled latents.
///
/// Implementations must be pure: equal inputs give bitwise equal outputs.
pub trait NoisePredictor<T: Scalar>: Sync {
    fn predict(
        &self,
        prompt: &PromptContext<T>,
        z_scaled: &Tensor<T>,
        sigma: T,
        kind: PredictionType,
    ) -> Result<Tensor<T>>;
}

impl<T: Scalar, P: NoisePredictor<T> + ?Sized> NoisePredictor<T> for &P {
    fn predict(
        &self,
        prompt: &PromptContext<T>,
        z_scaled: &Tensor<T>,
        sigma: T,
        kind: PredictionType,
    ) -> Result<Tensor<T>> {
        (**self).predict(prompt, z_scaled, sigma, kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent<T: Scalar> {
    pub mean: Tensor<T>,
    pub std: T,
    pub weight: T,
}

/// Posterior mean `E[x | z]` for `z = x + sigma * e`, `x ~ N(mean, std^2 I)`.
pub fn gaussian_posterior_mean<T: Scalar>(z: &Tensor<T>, sigma: T, mean: &Tensor<T>, std: T) -> Result<Tensor<T>> {
    if sigma < T::zero() || !(std > T::zero()) {
        return Err(Error::Argument(format!(
            "posterior mean needs sigma >= 0 and std > 0, got sigma={sigma}, std={std}"
        )));
    }
    let (s2, v2) = (sigma * sigma, std * std);
    let denom = v2 + s2;
    mean.zip_map(z, "gaussian_posterior_mean", |m, x| (m * s2 + x * v2) / denom)
}

/// Component responsibilities of a noisy observation (softmax of the
/// per-component log evidence).
pub fn responsibilities<T: Scalar>(z: &Tensor<T>, sigma: T, components: &[GaussianComponent<T>]) -> Result<Vec<T>> {
    if components.is_empty() {
        return Err(Error::Argument("mixture has no components".into()));
    }
    let d = T::from_usize_lossy(z.len());
    let half = T::lit(0.5);
    let mut logits = Vec::with_capacity(components.len());
    for comp in components {
        let var = comp.std * comp.std + sigma * sigma;
        let sq = z.sub(&comp.mean)?.data().iter().map(|&x| x * x).sum::<T>();
        logits.push(comp.weight.ln() - half * d * var.ln() - half * sq / var);
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Responsibility-weighted sum of component posterior means.
pub fn mixture_posterior_mean<T: Scalar>(
    z: &Tensor<T>,
    sigma: T,
    components: &[GaussianComponent<T>],
) -> Result<Tensor<T>> {
    let r = responsibilities(z, sigma, components)?;
    let mut out = Tensor::zeros(z.shape());
    for (comp, rk) in components.iter().zip(r) {
        let pm = gaussian_posterior_mean(z, sigma, &comp.mean, comp.std)?;
        out = out.lin_comb(T::one(), &pm, rk)?;
    }
    Ok(out)
}

/// `v = sqrt(sigma^2 + 1) * eps - sigma * z / sqrt(sigma^2 + 1)`; an Euler
/// step driven by this `v` lands where the epsilon step driven by `eps` does.
pub fn v_from_epsilon<T: Scalar>(z: &Tensor<T>, eps: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
    let k = rescale_factor(sigma);
    eps.lin_comb(k, z, -sigma / k)
}

/// One object of the toy world: a mixture component whose mean depends on
/// the view.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyObject<T: Scalar> {
    pub view_means: Vec<Tensor<T>>,
    pub std: T,
    pub weight: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld<T: Scalar> {
    frame_shape: Vec<usize>,
    objects: Vec<ToyObject<T>>,
}

/// Compact description of a toy world: patterns come from seeds, views are
/// horizontal rolls of the pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorldSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_views: usize,
    /// Columns the pattern rolls per view.
    pub view_shift: usize,
    /// Standard deviation of every pattern.
    pub amplitude: f64,
    pub components: Vec<ComponentSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSpec {
    pub seed: u64,
    pub std: f64,
    pub weight: f64,
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 16,
            width: 16,
            num_views: 1,
            view_shift: 2,
            amplitude: 1.0,
            components: vec![
                ComponentSpec {
                    seed: 1,
                    std: 0.5,
                    weight: 0.5,
                },
                ComponentSpec {
                    seed: 2,
                    std: 0.5,
                    weight: 0.5,
                },
            ],
        }
    }
}

/// Smooth periodic pattern: a few low-frequency plane waves per channel,
/// normalized to zero mean and the requested standard deviation.
fn pattern<T: Scalar>(seed: u64, c: usize, h: usize, w: usize, amplitude: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let fy = rng.gen_range(0..=2) as f64;
            let fx = rng.gen_range(1..=2) as f64;
            let amp: f64 = rng.gen_range(0.5..1.0);
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            for i in 0..h {
                for j in 0..w {
                    let arg = 2.0 * PI * (fy * i as f64 / h as f64 + fx * j as f64 / w as f64) + phase;
                    data[(ch * h + i) * w + j] += amp * arg.sin();
                }
            }
        }
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let std = (plane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        for x in plane.iter_mut() {
            *x = amplitude * (*x - mean) / std;
        }
    }
    Tensor::new(vec![c, h, w], data.into_iter().map(T::lit).collect()).expect("pattern shape")
}

/// Rolls the last axis of a `C x H x W` tensor right by `shift` columns.
pub fn roll_columns<T: Scalar>(x: &Tensor<T>, shift: usize) -> Tensor<T> {
    let w = *x.shape().last().expect("non-empty shape");
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        for j in 0..w {
            dst[(j + shift) % w] = src[j];
        }
    }
    out
}

impl<T: Scalar> ToyWorld<T> {
    pub fn new(objects: Vec<ToyObject<T>>) -> Result<Self> {
        let first = objects
            .first()
            .ok_or_else(|| Error::Config("toy world needs at least one component".into()))?;
        let views = first.view_means.len();
        if views == 0 {
            return Err(Error::Config("toy world needs at least one view".into()));
        }
        let frame_shape = first.view_means[0].shape().to_vec();
        let mut total = 0.0;
        for (k, obj) in objects.iter().enumerate() {
            if obj.view_means.len() != views {
                return Err(Error::Config(format!("component {k} has a different view count")));
            }
            if obj.view_means.iter().any(|m| m.shape() != frame_shape.as_slice()) {
                return Err(Error::Config(format!("component {k} has a different latent shape")));
            }
            if !(obj.weight > T::zero()) || !(obj.std > T::zero()) {
                return Err(Error::Config(format!("component {k} needs positive weight and std")));
            }
            total += obj.weight.as_f64();
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("component weights sum to {total}, not 1")));
        }
        Ok(Self { frame_shape, objects })
    }

    /// Single-view world from explicit components.
    pub fn from_components(components: Vec<GaussianComponent<T>>) -> Result<Self> {
        Self::new(
            components
                .into_iter()
                .map(|c| ToyObject {
                    view_means: vec![c.mean],
                    std: c.std,
                    weight: c.weight,
                })
                .collect(),
        )
    }

    pub fn from_spec(spec: &ToyWorldSpec) -> Result<Self> {
        if spec.channels == 0 || spec.height == 0 || spec.width == 0 || spec.num_views == 0 {
            return Err(Error::Config("toy world dimensions must be positive".into()));
        }
        let objects = spec
            .components
            .iter()
            .map(|c| {
                let base = pattern::<T>(c.seed, spec.channels, spec.height, spec.width, spec.amplitude);
                ToyObject {
                    view_means: (0..spec.num_views)
                        .map(|v| roll_columns(&base, v * spec.view_shift % spec.width))
                        .collect(),
                    std: T::lit(c.std),
                    weight: T::lit(c.weight),
                }
            })
            .collect();
        Self::new(objects)
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.frame_shape
    }

    /// Shape of one multi-view sample: `[views, ..frame_shape]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        let mut s = vec![self.num_views()];
        s.extend_from_slice(&self.frame_shape);
        s
    }

    pub fn num_views(&self) -> usize {
        self.objects[0].view_means.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn objects(&self) -> &[ToyObject<T>] {
        &self.objects
    }

    /// Reference latent (view 0) of an object; plays the role of the image
    /// prompt and of the reference embedding fed to the noise network.
    pub fn reference(&self, object: usize) -> &Tensor<T> {
        &self.objects[object].view_means[0]
    }

    pub fn view_mean(&self, object: usize, view: usize) -> &Tensor<T> {
        &self.objects[object].view_means[view]
    }

    /// Ground-truth views of an object stacked as one sample.
    pub fn ground_truth(&self, object: usize) -> Tensor<T> {
        Tensor::stack(&self.objects[object].view_means).expect("equal view shapes")
    }

    /// Object rendered for a given dataset seed.
    pub fn object_for_seed(&self, seed: u64) -> usize {
        (seed % self.objects.len() as u64) as usize
    }

    /// Object whose reference latent is nearest to the prompt.
    pub fn object_for_prompt(&self, c: &Tensor<T>) -> Result<usize> {
        let mut best = (0, T::infinity());
        for k in 0..self.objects.len() {
            let d = c.sub(self.reference(k))?.norm();
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best.0)
    }

    pub fn components_at_view(&self, view: usize) -> Result<Vec<GaussianComponent<T>>> {
        if view >= self.num_views() {
            return Err(Error::Argument(format!(
                "view {view} out of range for {} views",
                self.num_views()
            )));
        }
        Ok(self
            .objects
            .iter()
            .map(|o| GaussianComponent {
                mean: o.view_means[view].clone(),
                std: o.std,
                weight: o.weight,
            })
            .collect())
    }

    /// Exact denoiser `E[x | z]` for the prompt: the prompted component's
    /// posterior mean, or the full mixture for the empty prompt.
    pub fn denoise(&self, prompt: &PromptContext<T>, z: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
        if prompt.is_null {
            mixture_posterior_mean(z, sigma, &self.components_at_view(prompt.view)?)
        } else {
            if prompt.view >= self.num_views() {
                return Err(Error::Argument(format!("view {} out of range", prompt.view)));
            }
            let k = self.object_for_prompt(&prompt.c)?;
            let obj = &self.objects[k];
            gaussian_posterior_mean(z, sigma, &obj.view_means[prompt.view], obj.std)
        }
    }

    /// Draws a clean sample `x` of an object's view.
    pub fn sample_view<R: Rng + ?Sized>(&self, object: usize, view: usize, rng: &mut R) -> Tensor<T> {
        use rand_distr::{Distribution, StandardNormal};
        let obj = &self.objects[object];
        obj.view_means[view].map(|m| {
            let g: f64 = StandardNormal.sample(rng);
            m + obj.std * T::lit(g)
        })
    }
}

impl<T: Scalar> NoisePredictor<T> for ToyWorld<T> {
    fn predict(
        &self,
        prompt: &PromptContext<T>,
        z_scaled: &Tensor<T>,
        sigma: T,
        kind: PredictionType,
    ) -> Result<Tensor<T>> {
        if !(sigma > T::zero()) {
            return Err(Error::ScheduleMisuse(format!(
                "noise prediction requested at sigma = {sigma}"
            )));
        }
        let z = z_scaled.scale(rescale_factor(sigma));
        let denoised = self.denoise(prompt, &z, sigma)?;
        let eps = z.zip_map(&denoised, "predict", |a, d| (a - d) / sigma)?;
        match kind {
            PredictionType::Epsilon => Ok(eps),
            PredictionType::VPrediction => v_from_epsilon(&z, &eps, sigma),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::euler_step;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![v.len()], v).unwrap()
    }

    fn two_point_world(a: f64, b: f64) -> ToyWorld<f64> {
        ToyWorld::from_components(vec![
            GaussianComponent {
                mean: t(&[a]),
                std: 0.5,
                weight: 0.5,
            },
            GaussianComponent {
                mean: t(&[b]),
                std: 0.5,
                weight: 0.5,
            },
        ])
        .unwrap()
    }

    #[test]
    fn gaussian_posterior_examples() {
        let z = t(&[2.0, -3.0]);
        let m = t(&[0.0, 1.0]);
        assert_eq!(gaussian_posterior_mean(&z, 0.0, &m, 1.3).unwrap(), z);
        assert_eq!(gaussian_posterior_mean(&t(&[2.0]), 1.0, &t(&[0.0]), 1.0).unwrap().data(), &[1.0]);
        let far = gaussian_posterior_mean(&z, 1e6, &m, 1.0).unwrap();
        assert!(far.max_abs_diff(&m).unwrap() < 1e-6);
        assert!(gaussian_posterior_mean(&z, 1.0, &m, 0.0).is_err());
    }

    #[test]
    fn single_component_mixture_is_gaussian() {
        let c = GaussianComponent {
            mean: t(&[1.0, -2.0, 0.5]),
            std: 0.7,
            weight: 1.0,
        };
        let z = t(&[3.0, 0.0, -1.0]);
        let a = mixture_posterior_mean(&z, 1.3, std::slice::from_ref(&c)).unwrap();
        let b = gaussian_posterior_mean(&z, 1.3, &c.mean, c.std).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn symmetric_midpoint() {
        let w = two_point_world(-1.0, 3.0);
        let d = mixture_posterior_mean(&t(&[1.0]), 0.8, &w.components_at_view(0).unwrap()).unwrap();
        assert!((d.data()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn world_validation() {
        let bad = ToyWorld::from_components(vec![GaussianComponent {
            mean: t(&[0.0]),
            std: 1.0,
            weight: 0.4,
        }]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let mismatched = ToyWorld::from_components(vec![
            GaussianComponent {
                mean: t(&[0.0]),
                std: 1.0,
                weight: 0.5,
            },
            GaussianComponent {
                mean: t(&[0.0, 1.0]),
                std: 1.0,
                weight: 0.5,
            },
        ]);
        assert!(mismatched.is_err());
    }

    #[test]
    fn spec_world_views_are_rolled_patterns() {
        let spec = ToyWorldSpec {
            num_views: 4,
            ..ToyWorldSpec::default()
        };
        let w = ToyWorld::<f64>::from_spec(&spec).unwrap();
        assert_eq!(w.sample_shape(), vec![4, 4, 16, 16]);
        let (m, s) = w.reference(0).mean_std();
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        assert_eq!(w.view_mean(1, 2), &roll_columns(w.reference(1), 4));
        assert_ne!(w.reference(0), w.reference(1));
        assert_eq!(w.object_for_prompt(w.reference(1)).unwrap(), 1);
    }

    #[test]
    fn null_prompt_single_component_matches_conditional() {
        let w = ToyWorld::from_components(vec![GaussianComponent {
            mean: t(&[0.5, -0.5]),
            std: 0.6,
            weight: 1.0,
        }])
        .unwrap();
        let z = t(&[0.3, 2.0]);
        let cond = PromptContext::conditional(w.reference(0).clone(), 0);
        for kind in [PredictionType::Epsilon, PredictionType::VPrediction] {
            let a = w.predict(&cond, &z, 2.0, kind).unwrap();
            let b = w.predict(&cond.to_null(), &z, 2.0, kind).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
        }
    }

    #[test]
    fn guidance_gap_nonzero_off_midpoint() {
        let w = two_point_world(-1.0, 1.0);
        let cond = PromptContext::conditional(w.reference(0).clone(), 0);
        for z in [-2.0, -0.3, 0.4, 1.7] {
            let zs = t(&[z]);
            let a = w.predict(&cond, &zs, 1.0, PredictionType::Epsilon).unwrap();
            let b = w.predict(&cond.to_null(), &zs, 1.0, PredictionType::Epsilon).unwrap();
            assert!((a.data()[0] - b.data()[0]).abs() > 1e-6, "z = {z}");
        }
    }

    #[test]
    fn sigma_zero_is_schedule_misuse() {
        let w = two_point_world(-1.0, 1.0);
        let p = PromptContext::null(&[1], 0);
        assert!(matches!(
            w.predict(&p, &t(&[0.0]), 0.0, PredictionType::Epsilon),
            Err(Error::ScheduleMisuse(_))
        ));
    }

    #[test]
    fn prediction_types_agree_through_euler_step() {
        let w = two_point_world(-1.0, 2.0);
        let cond = PromptContext::conditional(w.reference(1).clone(), 0);
        let (s, sp) = (3.0, 1.2);
        let z = t(&[1.7]);
        let zs = z.scale(1.0 / rescale_factor(s));
        let e = w.predict(&cond, &zs, s, PredictionType::Epsilon).unwrap();
        let v = w.predict(&cond, &zs, s, PredictionType::VPrediction).unwrap();
        let a = euler_step(&z, &e, s, sp, PredictionType::Epsilon).unwrap();
        let b = euler_step(&z, &v, s, sp, PredictionType::VPrediction).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn v_bridge_examples() {
        let z = t(&[1.5, -2.0]);
        let e = t(&[0.25, 0.75]);
        assert_eq!(v_from_epsilon(&z, &e, 0.0).unwrap(), e);
        let zero = Tensor::zeros(&[2]);
        let v = v_from_epsilon(&zero, &e, 2.0).unwrap();
        assert!(v.max_abs_diff(&e.scale(5f64.sqrt())).unwrap() < 1e-15);
    }
}
