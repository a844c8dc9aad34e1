//! Run-directory pipeline around `combiverse-core`: configuration, backend
//! selection, manifests and the stage runners behind the `combiverse` binary.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod config;
pub mod examples;
pub mod manifest;
pub mod stages;

use combiverse_core::Error;

pub use config::RunConfig;
pub use manifest::{Manifest, Stage};
pub use stages::{Options, Pipeline};

/// Process exit status for a failed run.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Validation(_) => 2,
        Error::Backend { .. } | Error::DegenerateSegmentation { .. } | Error::Conformance { .. } | Error::Mesh(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}
