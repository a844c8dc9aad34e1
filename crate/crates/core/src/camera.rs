//! Camera model shared by the renderer and the combination loop.
//!
//! Camera space is x right, y up, z forward (depth). A pose stores
//! camera-to-world: the rotation's columns are the camera axes expressed in
//! world coordinates and `position` is the eye. Screen coordinates are in
//! pixels with the origin at the top-left corner and v growing downward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose<T> {
    /// Row-major; column k is camera axis k (right, up, forward) in world space.
    pub rotation: [[T; 3]; 3],
    pub position: [T; 3],
}

impl<T: Scalar> RigidPose<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            position: [z; 3],
        }
    }

    /// Pose at `eye` looking toward `target` with world +y as the up hint.
    pub fn look_at(eye: [T; 3], target: [T; 3]) -> Result<Self> {
        let forward =
            normalize(sub(target, eye)).ok_or_else(|| Error::validation("look_at: eye coincides with target"))?;
        let up_hint = [T::zero(), T::one(), T::zero()];
        let right = normalize(cross(up_hint, forward))
            .ok_or_else(|| Error::validation("look_at: view direction parallel to up"))?;
        let up = cross(forward, right);
        let mut rotation = [[T::zero(); 3]; 3];
        for r in 0..3 {
            rotation[r] = [right[r], up[r], forward[r]];
        }
        Ok(Self {
            rotation,
            position: eye,
        })
    }

    pub fn forward(&self) -> [T; 3] {
        [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]]
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let tol = lit::<T>(1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let dot: T = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { T::one() } else { T::zero() };
                if (dot - want).abs() > tol {
                    return Err(Error::validation("camera rotation is not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - T::one()).abs() > tol {
            return Err(Error::validation("camera rotation is not proper (det != 1)"));
        }
        if self.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("camera position is not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection<T> {
    /// `u = cx + focal * x / z`, `v = cy - focal * y / z`, focal in pixels.
    Pinhole { focal: T, cx: T, cy: T },
    /// `u = cx + scale * x`, `v = cy - scale * y`, scale in pixels per unit.
    Orthographic { scale: T, cx: T, cy: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec<T> {
    pub pose: RigidPose<T>,
    pub projection: Projection<T>,
    pub width: usize,
    pub height: usize,
}

/// Geometry closer than this along the view axis is not rasterized.
pub const NEAR_PLANE: f64 = 1e-2;

impl<T: Scalar> CameraSpec<T> {
    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("camera image size must be positive"));
        }
        match self.projection {
            Projection::Pinhole { focal, .. } if !(focal > T::zero()) => {
                Err(Error::validation("pinhole focal length must be positive"))
            }
            Projection::Orthographic { scale, .. } if !(scale > T::zero()) => {
                Err(Error::validation("orthographic scale must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Maps a world point to `(u, v, depth)`.
    #[inline]
    pub fn project<S: Scalar>(&self, p: [S; 3]) -> [S; 3] {
        let c = |x: T| S::from(x).expect("camera constant");
        let d = [
            p[0] - c(self.pose.position[0]),
            p[1] - c(self.pose.position[1]),
            p[2] - c(self.pose.position[2]),
        ];
        let r = &self.pose.rotation;
        // camera = R^T (p - eye)
        let cam: [S; 3] = [0, 1, 2].map(|k| d[0] * c(r[0][k]) + d[1] * c(r[1][k]) + d[2] * c(r[2][k]));
        match self.projection {
            Projection::Pinhole { focal, cx, cy } => {
                let inv = S::one() / cam[2];
                [c(cx) + c(focal) * cam[0] * inv, c(cy) - c(focal) * cam[1] * inv, cam[2]]
            }
            Projection::Orthographic { scale, cx, cy } => {
                [c(cx) + c(scale) * cam[0], c(cy) - c(scale) * cam[1], cam[2]]
            }
        }
    }
}

pub(crate) fn sub<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize<T: Scalar>(a: [T; 3]) -> Option<[T; 3]> {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if n > lit::<T>(1e-12) {
        Some([a[0] / n, a[1] / n, a[2] / n])
    } else {
        None
    }
}
