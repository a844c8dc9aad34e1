//! Retry wrapper shared by the external backend adapters.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    /// Additional attempts after the first failure.
    pub retries: u32,
    /// Delay before the first retry; doubled for each following retry.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(retries: u32) -> Self {
        Self {
            retries,
            base_delay_ms: 0,
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << retry.min(20)))
    }
}

/// Runs `call` until it succeeds or the retries are exhausted.
pub fn with_retries<R>(
    policy: &RetryPolicy,
    stage: &'static str,
    object: Option<usize>,
    mut call: impl FnMut() -> std::result::Result<R, BackendError>,
) -> Result<R> {
    let mut attempt = 0;
    loop {
        match call() {
            Ok(r) => return Ok(r),
            Err(e) if attempt < policy.retries => {
                log::warn!("{stage} backend failed (attempt {}): {e}; retrying", attempt + 1);
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(e) => {
                return Err(Error::Backend {
                    stage,
                    object,
                    message: format!("{e} (after {} attempts)", attempt + 1),
                })
            }
        }
    }
}
