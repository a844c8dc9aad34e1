use ndarray::Zip;

use crate::error::{Error, Result};
use crate::raster::{Mask, Plane, Raster};
use crate::render::RenderOutput;
use crate::scalar::{lit, Scalar};
use crate::spatial_init::DepthMap;

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Reference-view loss and its gradients with respect to the render.
#[derive(Debug, Clone)]
pub struct ReferenceLoss<T> {
    pub value: T,
    pub rgb_term: T,
    pub alpha_term: T,
    pub grad_rgb: Raster<T>,
    pub grad_alpha: Plane<T>,
}

/// `λ_rgb · mean|rgb - target_rgb| + λ_a · mean|alpha - target_alpha|`.
pub fn reference_loss<T: Scalar>(
    render: &RenderOutput<T>,
    target_rgb: &Raster<T>,
    target_alpha: &Plane<T>,
    lambda_rgb: T,
    lambda_alpha: T,
) -> Result<ReferenceLoss<T>> {
    if render.rgb.shape() != target_rgb.shape() || render.alpha.shape() != target_alpha.shape() {
        return Err(Error::validation(format!(
            "render {:?}/{:?} does not match target {:?}/{:?}",
            render.rgb.shape(),
            render.alpha.shape(),
            target_rgb.shape(),
            target_alpha.shape()
        )));
    }
    let n_rgb = lit::<T>(target_rgb.len() as f64);
    let n_a = lit::<T>(target_alpha.len() as f64);
    let abs_rgb: T = Zip::from(&render.rgb)
        .and(target_rgb)
        .fold(T::zero(), |acc, &a, &b| acc + (a - b).abs());
    let abs_a: T = Zip::from(&render.alpha)
        .and(target_alpha)
        .fold(T::zero(), |acc, &a, &b| acc + (a - b).abs());
    let rgb_term = lambda_rgb * abs_rgb / n_rgb;
    let alpha_term = lambda_alpha * abs_a / n_a;
    let grad_rgb = Zip::from(&render.rgb)
        .and(target_rgb)
        .map_collect(|&a, &b| sign(a - b) * lambda_rgb / n_rgb);
    let grad_alpha = Zip::from(&render.alpha)
        .and(target_alpha)
        .map_collect(|&a, &b| sign(a - b) * lambda_alpha / n_a);
    Ok(ReferenceLoss {
        value: rgb_term + alpha_term,
        rgb_term,
        alpha_term,
        grad_rgb,
        grad_alpha,
    })
}

/// Shift and scale normalization over the masked values.
/// Returns the normalized values and the scale used.
pub fn normalize_masked<T: Scalar>(values: &[T]) -> (Vec<T>, T) {
    let n = lit::<T>(values.len() as f64);
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let scale = (var + lit(DEPTH_EPS * DEPTH_EPS)).sqrt();
    (values.iter().map(|&v| (v - mean) / scale).collect(), scale)
}

/// Keeps constant depth regions from dividing by zero.
const DEPTH_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct DepthLoss<T> {
    pub value: T,
    pub grad_depth: Plane<T>,
}

/// Mean absolute difference of normalized rendered and predicted depth over
/// the foreground.
pub fn depth_guidance_loss<T: Scalar>(
    rendered: &Plane<T>,
    predicted: &DepthMap<T>,
    foreground: &Mask,
) -> Result<DepthLoss<T>> {
    let (h, w) = rendered.dim();
    if predicted.values().dim() != (h, w) || foreground.dimensions() != (w as u32, h as u32) {
        return Err(Error::validation(format!(
            "depth loss inputs disagree: render {w}x{h}, prediction {}x{}, mask {}x{}",
            predicted.width(),
            predicted.height(),
            foreground.width(),
            foreground.height()
        )));
    }
    if foreground.is_empty() {
        return Err(Error::validation("depth loss needs a non-empty foreground mask"));
    }
    let idx: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| foreground.get(x as u32, y as u32))
        .collect();
    let d: Vec<T> = idx.iter().map(|&p| rendered[p]).collect();
    let p: Vec<T> = idx.iter().map(|&q| predicted.values()[q]).collect();
    let (z, s) = normalize_masked(&d);
    let (pz, _) = normalize_masked(&p);
    let n = lit::<T>(idx.len() as f64);
    let g: Vec<T> = z.iter().zip(&pz).map(|(&a, &b)| sign(a - b) / n).collect();
    let value = z.iter().zip(&pz).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
    let g_mean = g.iter().copied().sum::<T>() / n;
    let gz = g.iter().zip(&z).map(|(&a, &b)| a * b).sum::<T>() / n;
    let mut grad_depth = Plane::zeros((h, w));
    for (k, &q) in idx.iter().enumerate() {
        grad_depth[q] = (g[k] - g_mean - z[k] * gz) / s;
    }
    Ok(DepthLoss { value, grad_depth })
}
