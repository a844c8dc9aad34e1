//! Guidance signals for placement optimization: score distillation with and
//! without spatial-token attention scaling, the reference-view loss, and the
//! depth baseline.

mod attention;
mod config;
pub mod conformance;
mod distill;
mod losses;
mod schedule;
pub mod synthetic;

pub use attention::{attention_maps, reweight_attention, TokenScaling};
pub use config::{GuidanceConfig, GuidanceMode, LossWeights, TimestepRange};
pub use distill::{
    distill_pixels, draw, sample_noise, sds_gradient, ssds_gradient, AttentionSite, DistillGradient, DistillSetup,
    NoiseQuery, PixelDistill, ScoreProvider,
};
pub use losses::{depth_guidance_loss, normalize_masked, reference_loss, DepthLoss, ReferenceLoss};
pub use schedule::{NoiseSchedule, TimestepSampler, WeightFn, TOTAL_STEPS};
