use ndarray::{Array2, Array3};
use rand_distr::{Distribution, StandardNormal};

use super::attention::TokenScaling;
use super::schedule::{NoiseSchedule, TimestepSampler, WeightFn};
use crate::camera::CameraSpec;
use crate::error::{BackendError, Error, Result};
use crate::raster::Raster;
use crate::render::{render, render_backward, ComposedScene, ParamGrad, RenderGrad, RenderSettings};
use crate::rng;
use crate::scalar::{lit, Scalar};
use crate::scene::tokenize_caption;

const NOISE_TAG: u64 = 0x65707331;

/// One noise-prediction request.
#[derive(Debug, Clone, Copy)]
pub struct NoiseQuery<'a, T> {
    /// `x_t`, shape `(3, H, W)`.
    pub noisy: &'a Raster<T>,
    /// The noise used to form `x_t`. Real backends ignore it; analytic stand-ins
    /// use it to recover the clean image.
    pub noise: &'a Raster<T>,
    pub timestep: u32,
    pub prompt: &'a str,
    pub scaling: Option<&'a TokenScaling<T>>,
}

/// Attention probabilities captured at one cross-attention layer,
/// `(queries, tokens)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSite<T> {
    pub name: String,
    pub maps: Array2<T>,
}

/// Noise-prediction backend `eps_hat(x_t; y, t)`, optionally with token attention scaling.
pub trait ScoreProvider<T: Scalar>: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule<T>;

    fn tokens(&self, prompt: &str) -> std::result::Result<Vec<String>, BackendError> {
        tokenize_caption(prompt).map_err(|e| BackendError::new(e.to_string()))
    }

    fn predict_noise(&self, query: &NoiseQuery<'_, T>) -> std::result::Result<Raster<T>, BackendError>;

    /// Attention maps at every hooked layer under `query.scaling`.
    fn introspect_attention(
        &self,
        query: &NoiseQuery<'_, T>,
    ) -> std::result::Result<Vec<AttentionSite<T>>, BackendError>;
}

fn backend(e: BackendError) -> Error {
    Error::Backend {
        stage: "score",
        object: None,
        message: e.to_string(),
    }
}

/// Standard normal noise with the given shape.
pub fn sample_noise<T: Scalar>(rng: &mut impl rand::Rng, shape: (usize, usize, usize)) -> Raster<T> {
    Array3::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        lit(v)
    })
}

/// Timestep and noise for one `(iteration, view)` slot.
pub fn draw<T: Scalar>(
    sampler: &TimestepSampler,
    shape: (usize, usize, usize),
    iteration: u64,
    view: u64,
) -> (u32, Raster<T>) {
    let t = sampler.sample(iteration, view);
    let mut r = rng::stream(sampler.seed, &[NOISE_TAG, iteration, view]);
    (t, sample_noise(&mut r, shape))
}

/// Distillation outcome on a single image.
#[derive(Debug, Clone)]
pub struct PixelDistill<T> {
    pub timestep: u32,
    pub weight: T,
    /// `w(t) (eps_hat - eps)`: the gradient with respect to the image.
    pub gradient: Raster<T>,
    /// `w(t) mean((eps_hat - eps)²) / 2`, for logging.
    pub loss: T,
}

/// Score distillation with respect to the image pixels.
#[allow(clippy::too_many_arguments)]
pub fn distill_pixels<T: Scalar>(
    image: &Raster<T>,
    provider: &dyn ScoreProvider<T>,
    prompt: &str,
    timestep: u32,
    noise: &Raster<T>,
    weighting: &WeightFn,
    scaling: Option<&TokenScaling<T>>,
) -> Result<PixelDistill<T>> {
    if image.shape() != noise.shape() || image.shape()[0] != 3 {
        return Err(Error::validation(format!(
            "image {:?} and noise {:?} must both be (3, H, W)",
            image.shape(),
            noise.shape()
        )));
    }
    if let Some(s) = scaling {
        s.validate_for(provider.tokens(prompt).map_err(backend)?.len())?;
    }
    let schedule = provider.schedule();
    let (a, s) = schedule.coefficients(timestep)?;
    let w = weighting.eval(schedule, timestep)?;
    let noisy = ndarray::Zip::from(image).and(noise).map_collect(|&x, &e| a * x + s * e);
    let query = NoiseQuery {
        noisy: &noisy,
        noise,
        timestep,
        prompt,
        scaling,
    };
    let eps_hat = provider.predict_noise(&query).map_err(backend)?;
    if eps_hat.shape() != image.shape() {
        return Err(Error::validation(format!(
            "provider returned noise of shape {:?} for an image of shape {:?}",
            eps_hat.shape(),
            image.shape()
        )));
    }
    let residual = eps_hat - noise;
    let n = lit::<T>(residual.len() as f64);
    let loss = w * residual.iter().map(|&r| r * r).sum::<T>() / (n + n);
    Ok(PixelDistill {
        timestep,
        weight: w,
        gradient: residual.mapv(|r| w * r),
        loss,
    })
}

/// Everything needed to evaluate one distillation term.
#[derive(Clone, Copy)]
pub struct DistillSetup<'a, T: Scalar> {
    pub provider: &'a dyn ScoreProvider<T>,
    pub prompt: &'a str,
    pub sampler: &'a TimestepSampler,
    pub weighting: &'a WeightFn,
    pub render: &'a RenderSettings<T>,
}

#[derive(Debug, Clone)]
pub struct DistillGradient<T> {
    pub params: Vec<ParamGrad<T>>,
    pub timestep: u32,
    pub loss: T,
}

fn score_distillation<T: Scalar>(
    scene: &ComposedScene<'_, T>,
    camera: &CameraSpec<T>,
    setup: &DistillSetup<'_, T>,
    iteration: u64,
    view: u64,
    scaling: Option<&TokenScaling<T>>,
) -> Result<DistillGradient<T>> {
    let out = render(scene, camera, setup.render)?;
    let (t, noise) = draw(setup.sampler, out.rgb.dim(), iteration, view);
    let px = distill_pixels(
        &out.rgb,
        setup.provider,
        setup.prompt,
        t,
        &noise,
        setup.weighting,
        scaling,
    )?;
    let params = render_backward(
        scene,
        camera,
        setup.render,
        &RenderGrad {
            rgb: Some(&px.gradient),
            ..Default::default()
        },
    )?;
    Ok(DistillGradient {
        params,
        timestep: t,
        loss: px.loss,
    })
}

/// Score distillation gradient with respect to every placement.
pub fn sds_gradient<T: Scalar>(
    scene: &ComposedScene<'_, T>,
    camera: &CameraSpec<T>,
    setup: &DistillSetup<'_, T>,
    iteration: u64,
    view: u64,
) -> Result<DistillGradient<T>> {
    score_distillation(scene, camera, setup, iteration, view, None)
}

/// As [`sds_gradient`], with the provider's attention on the spatial tokens scaled.
pub fn ssds_gradient<T: Scalar>(
    scene: &ComposedScene<'_, T>,
    camera: &CameraSpec<T>,
    setup: &DistillSetup<'_, T>,
    scaling: &TokenScaling<T>,
    iteration: u64,
    view: u64,
) -> Result<DistillGradient<T>> {
    score_distillation(scene, camera, setup, iteration, view, Some(scaling))
}
