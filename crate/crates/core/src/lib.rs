//! Core library for compositional multi-object 3D asset assembly.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read better in the per-component numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod backend;
pub mod camera;
pub mod combiner;
pub mod decomposition;
pub mod error;
pub mod guidance;
pub mod mesh;
pub mod raster;
pub mod render;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod scenes;
pub mod spatial_init;
pub mod tensor_io;

pub use error::{BackendError, Error, Result};
pub use scalar::Scalar;

/// Concrete `f64` instantiations of the generic core types.
pub type Placement = scene::PlacementParams<f64>;
pub type Mesh = mesh::TriangleMesh<f64>;
pub type Camera = camera::CameraSpec<f64>;
pub type Record = scene::ObjectRecord<f64>;
pub type Depth = spatial_init::DepthMap<f64>;
pub type Output = render::RenderOutput<f64>;
pub type Settings = render::RenderSettings<f64>;
pub type Problem<'a> = combiner::CombineProblem<'a, f64>;
pub type Outcome = combiner::CombineOutcome<f64>;
pub type Synthetic = guidance::synthetic::SyntheticProvider<f64>;
