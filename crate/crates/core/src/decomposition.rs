//! Per-object decomposition: segmentation, background noise, inpainting, reconstruction.

use std::sync::Mutex;

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{with_retries, RetryPolicy};
use crate::error::{BackendError, Error, Result};
use crate::mesh::{decimate_mesh, TriangleMesh, DEFAULT_FACE_BUDGET};
use crate::raster::{check_dims, Mask};
use crate::rng;
use crate::scene::{ObjectRecord, ObjectSpec};

pub const DEFAULT_PROMPT: &str = "a complete 3D model";

const NOISE_TAG: u64 = 0x6e6f697365;

/// Promptable segmentation backend.
pub trait SegmenterClient: Send + Sync {
    fn segment(&self, image: &RgbaImage, bbox: &ObjectSpec) -> std::result::Result<Mask, BackendError>;
}

/// Diffusion inpainting backend. White mask pixels are regenerated.
pub trait InpainterClient: Send + Sync {
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &Mask,
        request: &InpaintRequest,
    ) -> std::result::Result<RgbImage, BackendError>;
}

/// Image-to-3D backend.
pub trait ReconstructorClient: Send + Sync {
    fn reconstruct(&self, image: &RgbImage) -> std::result::Result<TriangleMesh<f64>, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub prompt: String,
    pub guidance_scale: f64,
    pub num_steps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintSettings {
    pub prompt: Option<String>,
    pub guidance_scale: f64,
    pub num_steps: u32,
}

impl Default for InpaintSettings {
    fn default() -> Self {
        Self {
            prompt: None,
            guidance_scale: 7.5,
            num_steps: 30,
        }
    }
}

impl InpaintSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale > 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::config("inpaint.guidance_scale", "must be positive"));
        }
        if self.num_steps < 1 {
            return Err(Error::config("inpaint.num_steps", "must be at least 1"));
        }
        if matches!(&self.prompt, Some(p) if p.trim().is_empty()) {
            return Err(Error::config("inpaint.prompt", "must not be empty"));
        }
        Ok(())
    }

    pub fn request(&self) -> InpaintRequest {
        InpaintRequest {
            prompt: self.prompt.clone().unwrap_or_else(|| DEFAULT_PROMPT.to_string()),
            guidance_scale: self.guidance_scale,
            num_steps: self.num_steps,
        }
    }
}

/// Segments one object and clips the mask to its box.
pub fn segment_object(
    image: &RgbaImage,
    bbox: &ObjectSpec,
    client: &dyn SegmenterClient,
    retry: &RetryPolicy,
) -> Result<(RgbaImage, Mask)> {
    let (w, h) = image.dimensions();
    bbox.validate_in(w, h)?;
    let raw = with_retries(retry, "segment", None, || client.segment(image, bbox))?;
    if raw.dimensions() != (w, h) {
        return Err(Error::Backend {
            stage: "segment",
            object: None,
            message: format!("mask is {}x{}, image is {w}x{h}", raw.width(), raw.height()),
        });
    }
    let mask = Mask::from_fn(w, h, |x, y| raw.get(x, y) && bbox.contains(x, y));
    if mask.is_empty() {
        return Err(Error::DegenerateSegmentation { object: None });
    }
    let cutout = RgbaImage::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            let p = image.get_pixel(x, y);
            Rgba([p[0], p[1], p[2], 255])
        } else {
            Rgba([0, 0, 0, 0])
        }
    });
    Ok((cutout, mask))
}

/// Replaces background pixels by i.i.d. uniform noise over `0..=255`.
pub fn noise_background(cutout: &RgbaImage, mask: &Mask, seed: u64) -> Result<RgbImage> {
    check_dims("mask", mask.dimensions(), cutout.dimensions())?;
    let mut rng = rng::stream(seed, &[NOISE_TAG]);
    let (w, h) = cutout.dimensions();
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            // Draw for every pixel so the noise field does not depend on the mask.
            let noise: [u8; 3] = rng.random();
            let p = cutout.get_pixel(x, y);
            out.put_pixel(
                x,
                y,
                if mask.get(x, y) {
                    Rgb([p[0], p[1], p[2]])
                } else {
                    Rgb(noise)
                },
            );
        }
    }
    Ok(out)
}

/// Pixels inside the box that are not foreground.
pub fn build_inpaint_mask(mask: &Mask, bbox: &ObjectSpec) -> Result<Mask> {
    let (w, h) = mask.dimensions();
    bbox.validate_in(w, h)?;
    Ok(Mask::from_fn(w, h, |x, y| bbox.contains(x, y) && !mask.get(x, y)))
}

/// Runs the inpainter. Pixels outside the mask are copied back from the input.
pub fn inpaint_object(
    noised: &RgbImage,
    inpaint_mask: &Mask,
    client: &dyn InpainterClient,
    settings: &InpaintSettings,
    retry: &RetryPolicy,
) -> Result<RgbImage> {
    settings.validate()?;
    check_dims("inpaint mask", inpaint_mask.dimensions(), noised.dimensions())?;
    if inpaint_mask.is_empty() {
        log::warn!("inpaint mask is empty; keeping the noised image");
        return Ok(noised.clone());
    }
    let request = settings.request();
    let out = with_retries(retry, "inpaint", None, || {
        client.inpaint(noised, inpaint_mask, &request)
    })?;
    if out.dimensions() != noised.dimensions() {
        return Err(Error::Backend {
            stage: "inpaint",
            object: None,
            message: format!(
                "returned {:?} image for {:?} input",
                out.dimensions(),
                noised.dimensions()
            ),
        });
    }
    let (w, h) = out.dimensions();
    Ok(RgbImage::from_fn(w, h, |x, y| {
        if inpaint_mask.get(x, y) {
            *out.get_pixel(x, y)
        } else {
            *noised.get_pixel(x, y)
        }
    }))
}

/// Calls the reconstructor and normalizes the mesh to unit extent.
pub fn reconstruct_object(
    completed: &RgbImage,
    client: &dyn ReconstructorClient,
    retry: &RetryPolicy,
) -> Result<TriangleMesh<f64>> {
    let mesh = with_retries(retry, "reconstruct", None, || client.reconstruct(completed))?;
    mesh.validate()?;
    mesh.normalized()
}

/// Backends used by [`decompose_object`].
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub segmenter: &'a dyn SegmenterClient,
    pub inpainter: &'a dyn InpainterClient,
    pub reconstructor: &'a dyn ReconstructorClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeSettings {
    pub inpaint: InpaintSettings,
    pub face_budget: usize,
    pub retry: RetryPolicy,
}

impl Default for DecomposeSettings {
    fn default() -> Self {
        Self {
            inpaint: InpaintSettings::default(),
            face_budget: DEFAULT_FACE_BUDGET,
            retry: RetryPolicy::default(),
        }
    }
}

/// Seed for object `index`'s background noise.
pub fn noise_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[NOISE_TAG, index as u64])
}

/// All of the decomposition steps for object `index`.
pub fn decompose_object(
    image: &RgbaImage,
    bbox: &ObjectSpec,
    index: usize,
    backends: Backends<'_>,
    settings: &DecomposeSettings,
    seed: u64,
) -> Result<ObjectRecord<f64>> {
    let run = || -> Result<ObjectRecord<f64>> {
        let (cutout, mask) = segment_object(image, bbox, backends.segmenter, &settings.retry)?;
        let noised = noise_background(&cutout, &mask, noise_seed(seed, index))?;
        let inpaint_mask = build_inpaint_mask(&mask, bbox)?;
        let completed = inpaint_object(
            &noised,
            &inpaint_mask,
            backends.inpainter,
            &settings.inpaint,
            &settings.retry,
        )?;
        let mesh = reconstruct_object(&completed, backends.reconstructor, &settings.retry)?;
        let mesh = decimate_mesh(&mesh, settings.face_budget)?;
        let mut record = ObjectRecord::new(image.dimensions(), bbox, mask, cutout, noised, inpaint_mask, completed)?;
        record.mesh = Some(mesh);
        Ok(record)
    };
    run().map_err(|e| e.for_object(index))
}

// Deterministic stand-ins for the external backends.

/// Returns the whole box as foreground.
#[derive(Debug, Default, Clone, Copy)]
pub struct BoxSegmenter;

impl SegmenterClient for BoxSegmenter {
    fn segment(&self, image: &RgbaImage, bbox: &ObjectSpec) -> std::result::Result<Mask, BackendError> {
        Ok(bbox.indicator(image.width(), image.height()))
    }
}

/// Foreground is every pixel whose color differs from the image's top-left
/// pixel by more than `threshold` in any channel, or whose alpha is nonzero
/// when the image has transparency.
#[derive(Debug, Clone, Copy)]
pub struct KeySegmenter {
    pub threshold: u8,
}

impl Default for KeySegmenter {
    fn default() -> Self {
        Self { threshold: 24 }
    }
}

impl SegmenterClient for KeySegmenter {
    fn segment(&self, image: &RgbaImage, _bbox: &ObjectSpec) -> std::result::Result<Mask, BackendError> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Err(BackendError::new("empty image"));
        }
        let key = *image.get_pixel(0, 0);
        let translucent = image.pixels().any(|p| p[3] < 255);
        Ok(Mask::from_fn(w, h, |x, y| {
            let p = image.get_pixel(x, y);
            if translucent {
                p[3] > 0
            } else {
                (0..3).any(|c| p[c].abs_diff(key[c]) > self.threshold)
            }
        }))
    }
}

/// Returns its input unchanged. Records every request.
#[derive(Debug, Default)]
pub struct IdentityInpainter {
    pub log: Mutex<Vec<InpaintRequest>>,
}

impl InpainterClient for IdentityInpainter {
    fn inpaint(
        &self,
        image: &RgbImage,
        _mask: &Mask,
        request: &InpaintRequest,
    ) -> std::result::Result<RgbImage, BackendError> {
        self.log.lock().expect("log lock").push(request.clone());
        Ok(image.clone())
    }
}

/// Paints the masked region a constant color. Records every request.
#[derive(Debug, Default)]
pub struct FillInpainter {
    pub color: [u8; 3],
    pub log: Mutex<Vec<InpaintRequest>>,
}

impl FillInpainter {
    pub fn new(color: [u8; 3]) -> Self {
        Self {
            color,
            log: Mutex::default(),
        }
    }
}

impl InpainterClient for FillInpainter {
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &Mask,
        request: &InpaintRequest,
    ) -> std::result::Result<RgbImage, BackendError> {
        self.log.lock().expect("log lock").push(request.clone());
        let mut out = image.clone();
        for (x, y, p) in out.enumerate_pixels_mut() {
            if mask.get(x, y) {
                *p = Rgb(self.color);
            }
        }
        Ok(out)
    }
}

/// Always returns a unit cube tinted with the image's mean color.
#[derive(Debug, Default, Clone, Copy)]
pub struct CubeReconstructor;

impl ReconstructorClient for CubeReconstructor {
    fn reconstruct(&self, image: &RgbImage) -> std::result::Result<TriangleMesh<f64>, BackendError> {
        let n = (image.width() as f64 * image.height() as f64).max(1.0);
        let mut sum = [0.0; 3];
        for p in image.pixels() {
            for c in 0..3 {
                sum[c] += p[c] as f64 / 255.0;
            }
        }
        Ok(TriangleMesh::unit_cube(sum.map(|s| s / n)))
    }
}

/// Returns a fixed mesh.
#[derive(Debug, Clone)]
pub struct FixedReconstructor(pub TriangleMesh<f64>);

impl ReconstructorClient for FixedReconstructor {
    fn reconstruct(&self, _image: &RgbImage) -> std::result::Result<TriangleMesh<f64>, BackendError> {
        Ok(self.0.clone())
    }
}
