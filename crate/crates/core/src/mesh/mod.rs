//! Triangle meshes with per-vertex color.

mod decimate;
pub mod gltf;
pub mod obj;
mod primitives;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

pub use decimate::{decimate_mesh, DEFAULT_FACE_BUDGET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh<T> {
    pub vertices: Vec<[T; 3]>,
    pub faces: Vec<[u32; 3]>,
    /// One RGB triple in [0, 1] per vertex.
    pub colors: Vec<[T; 3]>,
}

/// Axis-aligned bounds `(min, max)`.
pub type Bounds<T> = ([T; 3], [T; 3]);

impl<T: Scalar> TriangleMesh<T> {
    pub fn new(vertices: Vec<[T; 3]>, faces: Vec<[u32; 3]>, colors: Vec<[T; 3]>) -> Result<Self> {
        let m = Self {
            vertices,
            faces,
            colors,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() || self.faces.is_empty() {
            return Err(Error::Mesh("mesh has no vertices or faces".into()));
        }
        if self.colors.len() != self.vertices.len() {
            return Err(Error::Mesh(format!(
                "{} colors for {} vertices",
                self.colors.len(),
                self.vertices.len()
            )));
        }
        let n = self.vertices.len() as u32;
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::Mesh(format!("face {f:?} indexes beyond {n} vertices")));
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Mesh("non-finite vertex position".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Bounds<T> {
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn extent(&self) -> [T; 3] {
        let (lo, hi) = self.bounds();
        [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
    }

    /// Centers the bounds on the origin and scales the longest axis to 1.
    pub fn normalized(&self) -> Result<Self> {
        self.validate()?;
        let (lo, hi) = self.bounds();
        let half = lit::<T>(0.5);
        let center = [0, 1, 2].map(|k| (lo[k] + hi[k]) * half);
        let longest = (0..3).map(|k| hi[k] - lo[k]).fold(T::zero(), T::max);
        if !(longest > T::zero()) {
            return Err(Error::Mesh("mesh has zero extent".into()));
        }
        let inv = T::one() / longest;
        let vertices = self
            .vertices
            .iter()
            .map(|v| [0, 1, 2].map(|k| (v[k] - center[k]) * inv))
            .collect();
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            colors: self.colors.clone(),
        })
    }

    pub fn is_normalized(&self) -> bool {
        let tol = lit::<T>(1e-9);
        let (lo, hi) = self.bounds();
        (0..3).all(|k| lo[k] >= lit::<T>(-0.5) - tol && hi[k] <= lit::<T>(0.5) + tol)
    }

    pub fn cast<U: Scalar>(&self) -> TriangleMesh<U> {
        let c = |v: &[T; 3]| v.map(|x| U::from(x).expect("finite mesh value"));
        TriangleMesh {
            vertices: self.vertices.iter().map(c).collect(),
            faces: self.faces.clone(),
            colors: self.colors.iter().map(c).collect(),
        }
    }

    pub fn with_color(mut self, rgb: [T; 3]) -> Self {
        self.colors = vec![rgb; self.vertices.len()];
        self
    }

    /// Concatenates meshes, offsetting face indices.
    pub fn merge<'a>(meshes: impl IntoIterator<Item = &'a TriangleMesh<T>>) -> Result<Self> {
        let mut out = Self {
            vertices: Vec::new(),
            faces: Vec::new(),
            colors: Vec::new(),
        };
        for m in meshes {
            let off = out.vertices.len() as u32;
            out.vertices.extend_from_slice(&m.vertices);
            out.colors.extend_from_slice(&m.colors);
            out.faces.extend(m.faces.iter().map(|f| f.map(|i| i + off)));
        }
        out.validate()?;
        Ok(out)
    }

    pub fn unit_cube(color: [T; 3]) -> Self {
        primitives::unit_cube(color)
    }

    pub fn unit_quad(color: [T; 3]) -> Self {
        primitives::unit_quad(color)
    }

    pub fn icosphere(subdivisions: u32, color: [T; 3]) -> Self {
        primitives::icosphere(subdivisions, color)
    }
}
