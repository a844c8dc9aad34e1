use serde::{Deserialize, Serialize};

use super::schedule::{TimestepSampler, WeightFn};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Reference-view loss only.
    Base,
    /// Reference loss plus normalized depth agreement with the depth backend.
    Depth,
    Sds,
    Ssds,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "depth" => Ok(Self::Depth),
            "sds" => Ok(Self::Sds),
            "ssds" => Ok(Self::Ssds),
            _ => Err(Error::validation(format!("unknown guidance mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepRange {
    pub low: u32,
    pub high: u32,
}

impl Default for TimestepRange {
    fn default() -> Self {
        Self { low: 800, high: 900 }
    }
}

impl TimestepRange {
    pub fn sampler(&self, seed: u64) -> Result<TimestepSampler> {
        TimestepSampler::new(self.low, self.high, seed).map_err(|e| Error::config("guidance.timesteps", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reference: f64,
    /// Weight of the novel-view guidance term (distillation or depth).
    pub guidance: f64,
    pub rgb: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reference: 1.0,
            guidance: 1.0,
            rgb: 1000.0,
            alpha: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Attention multiplier for the spatial tokens.
    pub multiplier: f64,
    /// Overrides the scene's spatial tokens.
    pub spatial_tokens: Option<Vec<usize>>,
    pub timesteps: TimestepRange,
    pub weights: LossWeights,
    pub weighting: WeightFn,
    /// Overrides the scene caption as the distillation prompt.
    pub prompt: Option<String>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Ssds,
            multiplier: 25.0,
            spatial_tokens: None,
            timesteps: TimestepRange::default(),
            weights: LossWeights::default(),
            weighting: WeightFn::default(),
            prompt: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("guidance.weights.reference", w.reference),
            ("guidance.weights.guidance", w.guidance),
            ("guidance.weights.rgb", w.rgb),
            ("guidance.weights.alpha", w.alpha),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if !(self.multiplier > 0.0) || !self.multiplier.is_finite() {
            return Err(Error::config("guidance.multiplier", "must be positive"));
        }
        self.timesteps.sampler(0)?;
        self.weighting.validate()?;
        if matches!(&self.prompt, Some(p) if p.trim().is_empty()) {
            return Err(Error::config("guidance.prompt", "must not be empty"));
        }
        Ok(())
    }

    /// Whether novel views are rendered at all.
    pub fn uses_novel_views(&self) -> bool {
        matches!(self.mode, GuidanceMode::Sds | GuidanceMode::Ssds)
    }
}
