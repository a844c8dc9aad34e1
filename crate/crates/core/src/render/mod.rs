//! Soft rasterizer with analytic gradients with respect to object placement.
//!
//! Every object contributes one fragment per pixel. Its coverage is
//! `D = sigmoid(±d² / (sigma · E²))`, where `d` is the pixel-center distance to
//! the object's nearest silhouette edge in pixels, the sign is positive inside
//! the projected object, and `E` is the larger image side. Color and depth come
//! from the nearest face under the pixel, or from the nearest silhouette edge
//! outside the object. Object fragments are composited front to back in depth
//! order over a transparent black background. Depth is the coverage-weighted
//! expected depth, so it falls to zero where nothing is visible.

mod raster;
mod transform;
mod views;

pub use raster::{render, render_backward, render_depth};
pub use transform::{apply_transform, bake, mat_vec, place_point, rotation_matrix, Mat3};
pub use views::{reference_camera, sample_novel_views, CameraModel, ReferenceFraming, ViewSampler};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::raster::{Plane, Raster};
use crate::scalar::{lit, Scalar};
use crate::scene::PlacementParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings<T> {
    /// Edge temperature as a fraction of the squared screen extent.
    pub sigma: T,
    /// Side of the square screen tiles used for binning.
    pub tile_size: usize,
}

impl<T: Scalar> Default for RenderSettings<T> {
    fn default() -> Self {
        Self {
            sigma: lit(1e-4),
            tile_size: 8,
        }
    }
}

impl<T: Scalar> RenderSettings<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > T::zero()) || !self.sigma.is_finite() {
            return Err(Error::config("render.sigma", "must be positive and finite"));
        }
        if self.tile_size == 0 {
            return Err(Error::config("render.tile_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SceneObject<'a, T> {
    pub mesh: &'a TriangleMesh<T>,
    pub params: PlacementParams<T>,
}

#[derive(Debug, Clone)]
pub struct ComposedScene<'a, T> {
    pub objects: Vec<SceneObject<'a, T>>,
}

impl<'a, T: Scalar> ComposedScene<'a, T> {
    pub fn new(objects: impl IntoIterator<Item = (&'a TriangleMesh<T>, PlacementParams<T>)>) -> Result<Self> {
        let scene = Self {
            objects: objects
                .into_iter()
                .map(|(mesh, params)| SceneObject { mesh, params })
                .collect(),
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::validation("composed scene needs at least one object"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.params
                .validate()
                .map_err(|e| Error::validation(format!("object {i}: {e}")))?;
            o.mesh.validate()?;
        }
        Ok(())
    }

    /// Same meshes with new placements.
    pub fn with_params(&self, params: &[PlacementParams<T>]) -> Result<Self> {
        if params.len() != self.objects.len() {
            return Err(Error::validation(format!(
                "expected {} placements, got {}",
                self.objects.len(),
                params.len()
            )));
        }
        Ok(Self {
            objects: self
                .objects
                .iter()
                .zip(params)
                .map(|(o, &params)| SceneObject { mesh: o.mesh, params })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    /// `(3, H, W)`, premultiplied over a black background.
    pub rgb: Raster<T>,
    pub alpha: Plane<T>,
    pub depth: Plane<T>,
}

impl<T: Scalar> RenderOutput<T> {
    pub fn width(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn height(&self) -> usize {
        self.alpha.nrows()
    }
}

/// Upstream gradients of a scalar loss with respect to render outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct RenderGrad<'a, T> {
    pub rgb: Option<&'a Raster<T>>,
    pub alpha: Option<&'a Plane<T>>,
    pub depth: Option<&'a Plane<T>>,
}

/// Per-object gradient in `PlacementParams::to_array` order.
pub type ParamGrad<T> = [T; 7];
