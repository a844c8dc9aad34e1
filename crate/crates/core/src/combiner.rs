//! Joint placement optimization of every object under reference-view and
//! novel-view guidance. Meshes are never modified; only placements move.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbaImage;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraSpec;
use crate::error::{Error, Result};
use crate::guidance::{
    depth_guidance_loss, reference_loss, sds_gradient, ssds_gradient, DistillSetup, GuidanceConfig, GuidanceMode,
    ScoreProvider, TimestepRange, TokenScaling,
};
use crate::mesh::{gltf, obj, TriangleMesh};
use crate::raster::{foreground_target, planes_to_rgba, Mask, Plane, Raster};
use crate::render::{
    bake, render, render_backward, sample_novel_views, ComposedScene, ParamGrad, RenderGrad, RenderOutput,
    RenderSettings, ViewSampler,
};
use crate::scalar::{lit, to_f64, Scalar};
use crate::scene::{ObjectRecord, PlacementParams, SceneInput};
use crate::spatial_init::DepthMap;
use crate::tensor_io::{self, DType};

/// Which placement components are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamMask {
    pub scale: bool,
    pub rotation: [bool; 3],
    pub translation: [bool; 3],
}

impl Default for ParamMask {
    fn default() -> Self {
        Self {
            scale: true,
            rotation: [true; 3],
            translation: [true; 3],
        }
    }
}

impl ParamMask {
    pub fn translation_xy() -> Self {
        Self {
            scale: false,
            rotation: [false; 3],
            translation: [true, true, false],
        }
    }

    fn to_array(self) -> [bool; 7] {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        [self.scale, a, b, c, x, y, z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_translation_z: f64,
    pub lr_default: f64,
    pub iterations: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub trainable: ParamMask,
    /// Objects whose placement stays fixed.
    pub frozen_objects: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_translation_z: 0.01,
            lr_default: 0.001,
            iterations: 500,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            trainable: ParamMask::default(),
            frozen_objects: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("optimizer.lr_translation_z", self.lr_translation_z),
            ("optimizer.lr_default", self.lr_default),
            ("optimizer.epsilon", self.epsilon),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be positive"));
            }
        }
        for (name, v) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if self.iterations == 0 {
            return Err(Error::config("optimizer.iterations", "must be at least 1"));
        }
        Ok(())
    }

    /// Per-component rates in `[log s, rx, ry, rz, tx, ty, tz]` order.
    pub fn learning_rates(&self) -> [f64; 7] {
        let mut lr = [self.lr_default; 7];
        lr[6] = self.lr_translation_z;
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub count: usize,
    pub elevation_deg: [f64; 2],
    pub azimuth_deg: [f64; 2],
    /// Distill from the reference camera only, as in flat 2D layouts.
    pub reference_only: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            count: 10,
            elevation_deg: [-10.0, 45.0],
            azimuth_deg: [0.0, 360.0],
            reference_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceGuard {
    pub growth_factor: f64,
    pub patience: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self {
            growth_factor: 100.0,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CombineConfig {
    pub guidance: GuidanceConfig,
    pub optimizer: OptimizerConfig,
    pub views: ViewConfig,
    pub render: RenderSettings<f64>,
    pub divergence: DivergenceGuard,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl CombineConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.optimizer.validate()?;
        self.render.validate()?;
        if self.guidance.uses_novel_views() && !self.views.reference_only && self.views.count == 0 {
            return Err(Error::config("views.count", "must be at least 1"));
        }
        if !(self.divergence.growth_factor > 1.0) || self.divergence.patience == 0 {
            return Err(Error::config("divergence", "needs growth_factor > 1 and patience >= 1"));
        }
        Ok(())
    }
}

/// Where a run writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct CombineIo {
    pub metrics: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

/// Depth-baseline supervision at the reference view.
#[derive(Debug, Clone)]
pub struct DepthTarget<T> {
    pub predicted: DepthMap<T>,
    pub foreground: Mask,
}

/// Everything the optimizer needs apart from the configuration.
pub struct CombineProblem<'a, T: Scalar> {
    pub meshes: Vec<&'a TriangleMesh<T>>,
    pub reference: CameraSpec<T>,
    pub target_rgb: Raster<T>,
    pub target_alpha: Plane<T>,
    /// Distance from the reference camera to the orbit center of novel views.
    pub z_ref: T,
    pub depth: Option<DepthTarget<T>>,
    pub provider: Option<&'a dyn ScoreProvider<T>>,
    pub prompt: String,
    pub spatial_tokens: Vec<usize>,
}

fn resample_nearest<T: Copy>(src: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * sh as f64 / h as f64) as usize;
        let sx = ((x as f64 + 0.5) * sw as f64 / w as f64) as usize;
        src[[sy.min(sh - 1), sx.min(sw - 1)]]
    })
}

impl<'a, T: Scalar> CombineProblem<'a, T> {
    /// Problem for a decomposed scene. The reference target is the input image
    /// restricted to the union of the object masks.
    pub fn from_scene(
        scene: &SceneInput,
        records: &'a [ObjectRecord<T>],
        reference: CameraSpec<T>,
        z_ref: T,
        depth: Option<&DepthMap<T>>,
        provider: Option<&'a dyn ScoreProvider<T>>,
    ) -> Result<Self> {
        if records.len() != scene.objects.len() {
            return Err(Error::validation(format!(
                "{} records for {} objects",
                records.len(),
                scene.objects.len()
            )));
        }
        let mut meshes = Vec::with_capacity(records.len());
        let mut fg = Mask::new(scene.width(), scene.height());
        for (i, r) in records.iter().enumerate() {
            meshes.push(
                r.mesh
                    .as_ref()
                    .ok_or_else(|| Error::validation(format!("object {i} has no mesh")))?,
            );
            fg = fg.union(&r.mask)?;
        }
        let (w, h) = (reference.width, reference.height);
        let (target_rgb, target_alpha) = foreground_target(&scene.image, &fg, w as u32, h as u32)?;
        let depth = match depth {
            Some(d) => {
                let predicted = DepthMap::new(resample_nearest(d.values(), h, w))?;
                let fg_plane = resample_nearest(&fg.to_plane::<f64>(scene.width(), scene.height()), h, w);
                let foreground = Mask::from_fn(w as u32, h as u32, |x, y| fg_plane[[y as usize, x as usize]] > 0.5);
                Some(DepthTarget { predicted, foreground })
            }
            None => None,
        };
        Ok(Self {
            meshes,
            reference,
            target_rgb,
            target_alpha,
            z_ref,
            depth,
            provider,
            prompt: scene.caption.clone(),
            spatial_tokens: scene.spatial_token_indices.to_vec(),
        })
    }

    pub fn scene(&self, params: &[PlacementParams<T>]) -> Result<ComposedScene<'a, T>> {
        if params.len() != self.meshes.len() {
            return Err(Error::validation(format!(
                "{} placements for {} objects",
                params.len(),
                self.meshes.len()
            )));
        }
        ComposedScene::new(self.meshes.iter().copied().zip(params.iter().copied()))
    }
}

/// One iteration's logged losses. `total = λ_ref · reference + λ_guidance · guidance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub reference: f64,
    pub guidance: f64,
    pub total: f64,
    pub timesteps: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
struct MetricsLine<'a> {
    #[serde(flatten)]
    losses: &'a LossRecord,
    params: Vec<[f64; 7]>,
}

/// Adam state over `[log s, rx, ry, rz, tx, ty, tz]` per object.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    /// Completed iterations.
    pub iteration: usize,
    pub phi: Vec<[T; 7]>,
    pub m: Vec<[T; 7]>,
    pub v: Vec<[T; 7]>,
    pub initial_total: Option<T>,
    pub growth_streak: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(init: &[PlacementParams<T>]) -> Result<Self> {
        for (i, p) in init.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::validation(format!("object {i}: {e}")))?;
        }
        let phi = init
            .iter()
            .map(|p| {
                let mut a = p.to_array();
                a[0] = a[0].ln();
                a
            })
            .collect();
        let zeros = vec![[T::zero(); 7]; init.len()];
        Ok(Self {
            iteration: 0,
            phi,
            m: zeros.clone(),
            v: zeros,
            initial_total: None,
            growth_streak: 0,
        })
    }

    pub fn params(&self) -> Vec<PlacementParams<T>> {
        self.phi
            .iter()
            .map(|a| {
                let mut a = *a;
                a[0] = a[0].exp();
                PlacementParams::from_array(a)
            })
            .collect()
    }

    /// One Adam step from gradients with respect to the placements.
    pub fn step(&mut self, grads: &[ParamGrad<T>], config: &OptimizerConfig) {
        let lr = config.learning_rates();
        let mask = config.trainable.to_array();
        let (b1, b2) = (lit::<T>(config.beta1), lit::<T>(config.beta2));
        let t = (self.iteration + 1) as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let eps = lit::<T>(config.epsilon);
        for (o, g) in grads.iter().enumerate() {
            if config.frozen_objects.contains(&o) {
                continue;
            }
            let scale = self.phi[o][0].exp();
            for k in 0..7 {
                if !mask[k] {
                    continue;
                }
                // Chain rule into log-scale.
                let gk = if k == 0 { g[k] * scale } else { g[k] };
                self.m[o][k] = b1 * self.m[o][k] + (T::one() - b1) * gk;
                self.v[o][k] = b2 * self.v[o][k] + (T::one() - b2) * gk * gk;
                let mh = self.m[o][k] / c1;
                let vh = self.v[o][k] / c2;
                self.phi[o][k] -= lit::<T>(lr[k]) * mh / (vh.sqrt() + eps);
            }
        }
        self.iteration += 1;
    }
}

/// Checkpoint layout: `state.bin` holds an `(objects, 3, 7)` f64 tensor of
/// `phi`, `m` and `v`; `meta.json` holds the counters. Random draws are keyed
/// by seed and iteration, so no generator state needs saving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: usize,
    seed: u64,
    initial_total: Option<f64>,
    growth_streak: usize,
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration}"))
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, state: &OptimizerState<T>, seed: u64) -> Result<PathBuf> {
    let n = state.phi.len();
    let mut data = Array3::<T>::zeros((n, 3, 7));
    for o in 0..n {
        for k in 0..7 {
            data[[o, 0, k]] = state.phi[o][k];
            data[[o, 1, k]] = state.m[o][k];
            data[[o, 2, k]] = state.v[o][k];
        }
    }
    let meta = CheckpointMeta {
        iteration: state.iteration,
        seed,
        initial_total: state.initial_total.map(to_f64),
        growth_streak: state.growth_streak,
    };
    let final_path = checkpoint_path(dir, state.iteration);
    let tmp = dir.join(format!(".ckpt_{}.tmp", state.iteration));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    tensor_io::write(&tmp.join("state.bin"), &data.into_dyn(), DType::F64)?;
    let text = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
    std::fs::write(tmp.join("meta.json"), text).map_err(|e| Error::io(tmp.join("meta.json"), e))?;
    if final_path.exists() {
        std::fs::remove_dir_all(&final_path).map_err(|e| Error::io(&final_path, e))?;
    }
    std::fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(final_path)
}

/// Returns the state and the seed it was written with.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(OptimizerState<T>, u64)> {
    let meta_path = path.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::config(meta_path.display().to_string(), e.to_string()))?;
    let data = tensor_io::read::<T>(&path.join("state.bin"))?;
    let shape = data.shape().to_vec();
    if shape.len() != 3 || shape[1] != 3 || shape[2] != 7 {
        return Err(Error::validation(format!("checkpoint state has shape {shape:?}")));
    }
    let get = |o: usize, r: usize| -> [T; 7] { std::array::from_fn(|k| data[[o, r, k]]) };
    let n = shape[0];
    Ok((
        OptimizerState {
            iteration: meta.iteration,
            phi: (0..n).map(|o| get(o, 0)).collect(),
            m: (0..n).map(|o| get(o, 1)).collect(),
            v: (0..n).map(|o| get(o, 2)).collect(),
            initial_total: meta.initial_total.map(lit),
            growth_streak: meta.growth_streak,
        },
        meta.seed,
    ))
}

/// Per-iteration history. `trajectory[k]` holds the placements after step `k`.
#[derive(Debug, Clone, Default)]
pub struct CombineRun<T> {
    pub initial: Vec<PlacementParams<T>>,
    pub trajectory: Vec<Vec<PlacementParams<T>>>,
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CombineOutcome<T> {
    pub params: Vec<PlacementParams<T>>,
    pub run: CombineRun<T>,
}

struct Evaluation<T> {
    grads: Vec<ParamGrad<T>>,
    record: LossRecord,
}

fn add_into<T: Scalar>(acc: &mut [ParamGrad<T>], g: &[ParamGrad<T>], scale: T) {
    for (a, b) in acc.iter_mut().zip(g) {
        for k in 0..7 {
            a[k] += scale * b[k];
        }
    }
}

fn scaling_for<T: Scalar>(
    problem: &CombineProblem<'_, T>,
    guidance: &GuidanceConfig,
) -> Result<Option<TokenScaling<T>>> {
    if guidance.mode != GuidanceMode::Ssds {
        return Ok(None);
    }
    let tokens = guidance
        .spatial_tokens
        .clone()
        .unwrap_or_else(|| problem.spatial_tokens.clone());
    if tokens.is_empty() {
        return Err(Error::validation("ssds guidance needs at least one spatial token"));
    }
    Ok(Some(TokenScaling::new(tokens, lit(guidance.multiplier))?))
}

/// Loss and placement gradient at `params` for `iteration`.
fn evaluate<T: Scalar>(
    problem: &CombineProblem<'_, T>,
    config: &CombineConfig,
    render_settings: &RenderSettings<T>,
    scaling: Option<&TokenScaling<T>>,
    params: &[PlacementParams<T>],
    iteration: usize,
) -> Result<Evaluation<T>> {
    let g = &config.guidance;
    let w = &g.weights;
    let (lam_ref, lam_g) = (lit::<T>(w.reference), lit::<T>(w.guidance));
    let scene = problem.scene(params)?;
    let n = params.len();
    let mut grads = vec![[T::zero(); 7]; n];

    let out = render(&scene, &problem.reference, render_settings)?;
    let refl = reference_loss(
        &out,
        &problem.target_rgb,
        &problem.target_alpha,
        lit(w.rgb),
        lit(w.alpha),
    )?;
    let mut guidance = T::zero();
    let mut timesteps = Vec::new();

    let depth_grad = if g.mode == GuidanceMode::Depth {
        let d = problem
            .depth
            .as_ref()
            .ok_or_else(|| Error::validation("depth guidance needs a predicted depth map"))?;
        let dl = depth_guidance_loss(&out.depth, &d.predicted, &d.foreground)?;
        guidance = dl.value;
        Some(dl.grad_depth.mapv(|v| v * lam_g))
    } else {
        None
    };
    if lam_ref != T::zero() || depth_grad.is_some() {
        let grgb = refl.grad_rgb.mapv(|v| v * lam_ref);
        let galpha = refl.grad_alpha.mapv(|v| v * lam_ref);
        let back = render_backward(
            &scene,
            &problem.reference,
            render_settings,
            &RenderGrad {
                rgb: Some(&grgb),
                alpha: Some(&galpha),
                depth: depth_grad.as_ref(),
            },
        )?;
        add_into(&mut grads, &back, T::one());
    }

    if g.uses_novel_views() {
        let provider = problem
            .provider
            .ok_or_else(|| Error::validation("score distillation needs a score provider"))?;
        let prompt = g.prompt.clone().unwrap_or_else(|| problem.prompt.clone());
        let sampler = g.timesteps.sampler(config.optimizer.seed)?;
        let setup = DistillSetup {
            provider,
            prompt: &prompt,
            sampler: &sampler,
            weighting: &g.weighting,
            render: render_settings,
        };
        let cameras = if config.views.reference_only {
            vec![problem.reference]
        } else {
            let mut s = ViewSampler::around_reference(
                &problem.reference,
                problem.z_ref,
                config.views.count,
                config.optimizer.seed,
            );
            s.elevation_deg = (lit(config.views.elevation_deg[0]), lit(config.views.elevation_deg[1]));
            s.azimuth_deg = (lit(config.views.azimuth_deg[0]), lit(config.views.azimuth_deg[1]));
            sample_novel_views(&s, iteration as u64)?
        };
        let per_view: Vec<_> = cameras
            .par_iter()
            .enumerate()
            .map(|(v, cam)| match scaling {
                Some(s) => ssds_gradient(&scene, cam, &setup, s, iteration as u64, v as u64),
                None => sds_gradient(&scene, cam, &setup, iteration as u64, v as u64),
            })
            .collect::<Result<_>>()?;
        let inv = T::one() / lit(per_view.len() as f64);
        for d in &per_view {
            add_into(&mut grads, &d.params, lam_g * inv);
            guidance += d.loss * inv;
            timesteps.push(d.timestep);
        }
    }

    let total = lam_ref * refl.value + lam_g * guidance;
    Ok(Evaluation {
        grads,
        record: LossRecord {
            iteration,
            reference: to_f64(refl.value),
            guidance: to_f64(guidance),
            total: to_f64(total),
            timesteps,
        },
    })
}

fn check_problem<T: Scalar>(problem: &CombineProblem<'_, T>, config: &CombineConfig, n_init: usize) -> Result<()> {
    config.validate()?;
    if problem.meshes.is_empty() {
        return Err(Error::validation("nothing to combine"));
    }
    if n_init != problem.meshes.len() {
        return Err(Error::validation(format!(
            "{n_init} initial placements for {} objects",
            problem.meshes.len()
        )));
    }
    if let Some(&o) = config.optimizer.frozen_objects.iter().find(|&&o| o >= n_init) {
        return Err(Error::config(
            "optimizer.frozen_objects",
            format!("object {o} does not exist"),
        ));
    }
    Ok(())
}

/// Optimizes every placement starting from `init`.
pub fn combine<T: Scalar>(
    problem: &CombineProblem<'_, T>,
    init: &[PlacementParams<T>],
    config: &CombineConfig,
    io: &CombineIo,
) -> Result<CombineOutcome<T>> {
    check_problem(problem, config, init.len())?;
    let state = OptimizerState::new(init)?;
    if let Some(m) = &io.metrics {
        if m.exists() {
            std::fs::remove_file(m).map_err(|e| Error::io(m, e))?;
        }
    }
    resume(problem, state, config, io)
}

/// Continues from `state` until `config.optimizer.iterations` are complete.
pub fn resume<T: Scalar>(
    problem: &CombineProblem<'_, T>,
    mut state: OptimizerState<T>,
    config: &CombineConfig,
    io: &CombineIo,
) -> Result<CombineOutcome<T>> {
    check_problem(problem, config, state.phi.len())?;
    let render_settings = RenderSettings {
        sigma: lit::<T>(config.render.sigma),
        tile_size: config.render.tile_size,
    };
    let scaling = scaling_for(problem, &config.guidance)?;
    if let (Some(s), Some(p)) = (&scaling, problem.provider) {
        let prompt = config.guidance.prompt.clone().unwrap_or_else(|| problem.prompt.clone());
        let n = p
            .tokens(&prompt)
            .map_err(|e| Error::Backend {
                stage: "score",
                object: None,
                message: e.to_string(),
            })?
            .len();
        s.validate_for(n)?;
    }
    let mut metrics: Option<File> = match &io.metrics {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?,
            )
        }
        None => None,
    };
    if let Some(dir) = &io.checkpoints {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut run = CombineRun {
        initial: state.params(),
        ..Default::default()
    };
    let mut last_checkpoint: Option<PathBuf> = None;
    let guard = config.divergence;
    while state.iteration < config.optimizer.iterations {
        let k = state.iteration;
        let params = state.params();
        let diverged = |reason: String, ckpt: &Option<PathBuf>| Error::Divergence {
            iteration: k,
            reason,
            last_checkpoint: ckpt.clone(),
        };
        let ev = match evaluate(problem, config, &render_settings, scaling.as_ref(), &params, k) {
            Ok(ev) => ev,
            Err(Error::Validation(msg)) if params.iter().any(|p| p.validate().is_err()) => {
                return Err(diverged(msg, &last_checkpoint));
            }
            Err(e) => return Err(e),
        };
        let total = ev.record.total;
        if !total.is_finite() || ev.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(diverged(
                format!("non-finite loss or gradient (total {total})"),
                &last_checkpoint,
            ));
        }
        let initial = *state.initial_total.get_or_insert(lit(total));
        if to_f64(initial) > 0.0 && total > guard.growth_factor * to_f64(initial) {
            state.growth_streak += 1;
            if state.growth_streak >= guard.patience {
                return Err(diverged(
                    format!(
                        "loss above {}x its initial value for {} iterations",
                        guard.growth_factor, guard.patience
                    ),
                    &last_checkpoint,
                ));
            }
        } else {
            state.growth_streak = 0;
        }
        state.step(&ev.grads, &config.optimizer);
        let after = state.params();
        if let Some(f) = metrics.as_mut() {
            let line = MetricsLine {
                losses: &ev.record,
                params: after.iter().map(|p| p.to_array().map(to_f64)).collect(),
            };
            let text = serde_json::to_string(&line).expect("metrics serialize");
            writeln!(f, "{text}").map_err(|e| Error::io(io.metrics.as_ref().expect("metrics path"), e))?;
        }
        if let Some(dir) = &io.checkpoints {
            if config.checkpoint_every > 0 && state.iteration.is_multiple_of(config.checkpoint_every) {
                let p = save_checkpoint(dir, &state, config.optimizer.seed)?;
                run.checkpoints.push(p.clone());
                last_checkpoint = Some(p);
            }
        }
        log::debug!("iteration {k}: total {total:.6}");
        run.trajectory.push(after);
        run.losses.push(ev.record);
    }
    Ok(CombineOutcome {
        params: state.params(),
        run,
    })
}

/// Bakes every placement into its mesh and writes `<stem>.gltf` and `<stem>.obj`.
pub fn export_composition<T: Scalar>(
    names: &[String],
    meshes: &[&TriangleMesh<T>],
    params: &[PlacementParams<T>],
    gltf_path: &Path,
    obj_path: &Path,
) -> Result<Vec<TriangleMesh<T>>> {
    if names.len() != meshes.len() || params.len() != meshes.len() {
        return Err(Error::validation("export needs one name and placement per mesh"));
    }
    let baked: Vec<TriangleMesh<T>> = meshes
        .iter()
        .zip(params)
        .map(|(m, p)| bake(m, p))
        .collect::<Result<_>>()?;
    let objects: Vec<(&str, &TriangleMesh<T>)> = names.iter().map(String::as_str).zip(baked.iter()).collect();
    gltf::write_gltf(gltf_path, &objects).map_err(export_error)?;
    obj::write_obj(obj_path, &objects).map_err(export_error)?;
    Ok(baked)
}

fn export_error(e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Export {
            path,
            message: source.to_string(),
        },
        other => other,
    }
}

/// Guidance settings compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "depth")]
    Depth,
    #[serde(rename = "sds")]
    Sds,
    #[serde(rename = "ssds-low")]
    SsdsLow,
    #[serde(rename = "ssds-uniform")]
    SsdsUniform,
    #[serde(rename = "ssds-full")]
    SsdsFull,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Base,
        AblationMode::Depth,
        AblationMode::Sds,
        AblationMode::SsdsLow,
        AblationMode::SsdsUniform,
        AblationMode::SsdsFull,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Base => "base",
            AblationMode::Depth => "depth",
            AblationMode::Sds => "sds",
            AblationMode::SsdsLow => "ssds-low",
            AblationMode::SsdsUniform => "ssds-uniform",
            AblationMode::SsdsFull => "ssds-full",
        }
    }

    /// `base` with this mode's loss selection and timestep range.
    pub fn configure(&self, base: &GuidanceConfig) -> GuidanceConfig {
        let mut g = base.clone();
        let (mode, range) = match self {
            AblationMode::Base => (GuidanceMode::Base, base.timesteps),
            AblationMode::Depth => (GuidanceMode::Depth, base.timesteps),
            AblationMode::Sds => (GuidanceMode::Sds, base.timesteps),
            AblationMode::SsdsLow => (GuidanceMode::Ssds, TimestepRange { low: 100, high: 200 }),
            AblationMode::SsdsUniform => (GuidanceMode::Ssds, TimestepRange { low: 20, high: 980 }),
            AblationMode::SsdsFull => (GuidanceMode::Ssds, TimestepRange::default()),
        };
        g.mode = mode;
        g.timesteps = range;
        g
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow<T> {
    pub mode: AblationMode,
    pub outcome: CombineOutcome<T>,
    /// Reference-view render of the final placements.
    pub render: RenderOutput<T>,
}

impl<T: Scalar> AblationRow<T> {
    pub fn final_losses(&self) -> Option<&LossRecord> {
        self.outcome.run.losses.last()
    }
}

/// Runs [`combine`] once per mode with shared seeds.
pub fn ablation_matrix<T: Scalar>(
    problem: &CombineProblem<'_, T>,
    init: &[PlacementParams<T>],
    config: &CombineConfig,
    modes: &[AblationMode],
) -> Result<Vec<AblationRow<T>>> {
    let settings = RenderSettings {
        sigma: lit::<T>(config.render.sigma),
        tile_size: config.render.tile_size,
    };
    modes
        .iter()
        .map(|&mode| {
            let mut c = config.clone();
            c.guidance = mode.configure(&config.guidance);
            let outcome = combine(problem, init, &c, &CombineIo::default())?;
            let render = render(&problem.scene(&outcome.params)?, &problem.reference, &settings)?;
            Ok(AblationRow { mode, outcome, render })
        })
        .collect()
}

/// Side-by-side strip of images with a one-pixel gap.
pub fn contact_sheet(images: &[RgbaImage]) -> RgbaImage {
    let w: u32 = images.iter().map(|i| i.width() + 1).sum::<u32>().saturating_sub(1);
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let mut out = RgbaImage::new(w.max(1), h.max(1));
    let mut x0 = 0;
    for img in images {
        image::imageops::overlay(&mut out, img, x0 as i64, 0);
        x0 += img.width() + 1;
    }
    out
}

/// 8-bit image of a render.
pub fn render_image<T: Scalar>(out: &RenderOutput<T>) -> RgbaImage {
    planes_to_rgba(&out.rgb, &out.alpha)
}
