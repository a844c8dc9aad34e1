use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraSpec, Projection, RigidPose};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CameraModel {
    #[default]
    Pinhole,
    Orthographic,
}

/// How the reference camera is registered to the input image.
///
/// An image pixel offset `p` from the image center maps to `p * pixel_to_scene`
/// scene units at depth `z_ref`, and the render keeps the image aspect ratio
/// with `resolution` pixels on the longer side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFraming<T> {
    pub image_width: u32,
    pub image_height: u32,
    pub pixel_to_scene: T,
    pub z_ref: T,
    pub resolution: usize,
    pub model: CameraModel,
}

impl<T: Scalar> ReferenceFraming<T> {
    pub fn render_size(&self) -> (usize, usize) {
        let long = self.image_width.max(self.image_height) as f64;
        let r = self.resolution as f64;
        let w = ((self.image_width as f64 * r / long).round() as usize).max(1);
        let h = ((self.image_height as f64 * r / long).round() as usize).max(1);
        (w, h)
    }

    /// Render pixels per image pixel.
    pub fn render_scale(&self) -> T {
        lit(self.resolution as f64 / self.image_width.max(self.image_height) as f64)
    }

    /// Pinhole focal length in render pixels.
    pub fn focal(&self) -> T {
        self.z_ref * self.render_scale() / self.pixel_to_scene
    }
}

/// Identity-pose camera at the origin looking down +z, registered to the
/// input image as described by `framing`.
pub fn reference_camera<T: Scalar>(framing: &ReferenceFraming<T>) -> Result<CameraSpec<T>> {
    if framing.image_width == 0 || framing.image_height == 0 || framing.resolution == 0 {
        return Err(Error::validation("reference framing needs positive sizes"));
    }
    if !(framing.pixel_to_scene > T::zero()) || !(framing.z_ref > T::zero()) {
        return Err(Error::validation("pixel_to_scene and z_ref must be positive"));
    }
    let (width, height) = framing.render_size();
    let cx = lit::<T>(width as f64 / 2.0);
    let cy = lit::<T>(height as f64 / 2.0);
    let projection = match framing.model {
        CameraModel::Pinhole => Projection::Pinhole {
            focal: framing.focal(),
            cx,
            cy,
        },
        CameraModel::Orthographic => Projection::Orthographic {
            scale: framing.render_scale() / framing.pixel_to_scene,
            cx,
            cy,
        },
    };
    let cam = CameraSpec {
        pose: RigidPose::identity(),
        projection,
        width,
        height,
    };
    cam.validate()?;
    Ok(cam)
}

/// Random orbit cameras around `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSampler<T> {
    pub count: usize,
    /// Degrees, inclusive low and exclusive high.
    pub elevation_deg: (T, T),
    pub azimuth_deg: (T, T),
    pub radius: T,
    pub center: [T; 3],
    pub seed: u64,
    pub projection: Projection<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> ViewSampler<T> {
    /// Sampler orbiting the reference view's look-at point at distance
    /// `z_ref` with the reference intrinsics.
    pub fn around_reference(reference: &CameraSpec<T>, z_ref: T, count: usize, seed: u64) -> Self {
        Self {
            count,
            elevation_deg: (lit(-10.0), lit(45.0)),
            azimuth_deg: (T::zero(), lit(360.0)),
            radius: z_ref,
            center: [T::zero(), T::zero(), z_ref],
            seed,
            projection: reference.projection,
            width: reference.width,
            height: reference.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("views.count", "must be at least 1"));
        }
        let (e0, e1) = self.elevation_deg;
        if !(e0 < e1) || e0 <= lit(-90.0) || e1 >= lit(90.0) {
            return Err(Error::config("views.elevation_deg", "needs -90 < low < high < 90"));
        }
        let (a0, a1) = self.azimuth_deg;
        if !(a0 < a1) {
            return Err(Error::config("views.azimuth_deg", "needs low < high"));
        }
        if !(self.radius > T::zero()) {
            return Err(Error::config("views.radius", "must be positive"));
        }
        Ok(())
    }

    /// Camera at the given angles in degrees.
    pub fn camera_at(&self, elevation_deg: T, azimuth_deg: T) -> Result<CameraSpec<T>> {
        let e = elevation_deg.to_radians();
        let a = azimuth_deg.to_radians();
        let c = self.center;
        let eye = [
            c[0] + self.radius * e.cos() * a.sin(),
            c[1] + self.radius * e.sin(),
            c[2] - self.radius * e.cos() * a.cos(),
        ];
        let cam = CameraSpec {
            pose: RigidPose::look_at(eye, c)?,
            projection: self.projection,
            width: self.width,
            height: self.height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Angles `(elevation, azimuth)` in degrees for `iteration`.
    pub fn angles(&self, iteration: u64) -> Vec<(T, T)> {
        let mut r = rng::stream(self.seed, &[0x7669_6577, iteration]);
        let (e0, e1) = (to_f64(self.elevation_deg.0), to_f64(self.elevation_deg.1));
        let (a0, a1) = (to_f64(self.azimuth_deg.0), to_f64(self.azimuth_deg.1));
        (0..self.count)
            .map(|_| (lit(r.random_range(e0..e1)), lit(r.random_range(a0..a1))))
            .collect()
    }
}

/// Deterministic views for `(sampler.seed, iteration)`.
pub fn sample_novel_views<T: Scalar>(sampler: &ViewSampler<T>, iteration: u64) -> Result<Vec<CameraSpec<T>>> {
    sampler.validate()?;
    sampler
        .angles(iteration)
        .into_iter()
        .map(|(e, a)| sampler.camera_at(e, a))
        .collect()
}
