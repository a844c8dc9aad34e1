//! Checks that a score provider implements token attention scaling as specified.

use serde::Serialize;

use super::attention::TokenScaling;
use super::distill::{AttentionSite, NoiseQuery, ScoreProvider};
use super::schedule::NoiseSchedule;
use crate::error::{BackendError, Error, Result};
use crate::raster::Raster;
use crate::scalar::{lit, to_f64, Scalar};

pub const ROW_SUM_TOL: f64 = 1e-6;
pub const SCALE_TOL: f64 = 1e-9;
pub const DRIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub sites: Vec<String>,
    pub checks: Vec<CheckOutcome>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// First failing check as an error.
    pub fn into_result(self) -> Result<Self> {
        match self.checks.iter().find(|c| !c.passed) {
            Some(c) => Err(Error::Conformance {
                check: c.name,
                detail: c.detail.clone(),
            }),
            None => Ok(self),
        }
    }
}

fn backend(e: BackendError) -> Error {
    Error::Backend {
        stage: "score",
        object: None,
        message: e.to_string(),
    }
}

fn row_sums<T: Scalar>(sites: &[AttentionSite<T>]) -> CheckOutcome {
    let mut worst = 0.0f64;
    for s in sites {
        for row in s.maps.rows() {
            worst = worst.max((to_f64(row.iter().copied().sum::<T>()) - 1.0).abs());
        }
    }
    CheckOutcome {
        name: "row_sums",
        passed: !sites.is_empty() && worst <= ROW_SUM_TOL,
        detail: if sites.is_empty() {
            "provider exposes no attention sites".into()
        } else {
            format!("max |row sum - 1| = {worst:e}")
        },
    }
}

fn token_scaling<T: Scalar>(
    base: &[AttentionSite<T>],
    scaled: &[AttentionSite<T>],
    scaling: &TokenScaling<T>,
) -> CheckOutcome {
    let fail = |detail: String| CheckOutcome {
        name: "token_scaling",
        passed: false,
        detail,
    };
    if base.len() != scaled.len() {
        return fail(format!("{} sites unscaled, {} scaled", base.len(), scaled.len()));
    }
    let c = to_f64(scaling.multiplier);
    let mut worst = 0.0f64;
    for (a, b) in base.iter().zip(scaled) {
        if a.maps.dim() != b.maps.dim() {
            return fail(format!("site {} changed shape under scaling", a.name));
        }
        for j in 0..a.maps.ncols() {
            for i in 0..a.maps.nrows() {
                let (u, s) = (to_f64(a.maps[[i, j]]), to_f64(b.maps[[i, j]]));
                if scaling.tokens.contains(&j) {
                    worst = worst.max((s - c * u).abs() / (c * u).abs().max(1e-300));
                } else if u != s {
                    return fail(format!("site {}: untouched token {j} changed ({u} -> {s})", a.name));
                }
            }
        }
    }
    CheckOutcome {
        name: "token_scaling",
        passed: worst <= SCALE_TOL,
        detail: format!("max relative error of scaled columns = {worst:e}"),
    }
}

fn unit_drift<T: Scalar>(plain: &Raster<T>, unit: &Raster<T>) -> CheckOutcome {
    let worst = if plain.shape() == unit.shape() {
        plain
            .iter()
            .zip(unit)
            .map(|(&a, &b)| to_f64((a - b).abs()))
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    CheckOutcome {
        name: "unit_multiplier",
        passed: worst <= DRIFT_TOL,
        detail: format!("max |eps(c=1) - eps(unscaled)| = {worst:e}"),
    }
}

/// Probes `provider` on `image` and checks that
/// (a) unscaled attention rows sum to one,
/// (b) scaling multiplies exactly the designated columns by `c` at every site,
/// (c) a unit multiplier leaves the predicted noise unchanged.
pub fn run_conformance<T: Scalar>(
    provider: &dyn ScoreProvider<T>,
    prompt: &str,
    image: &Raster<T>,
    scaling: &TokenScaling<T>,
    timestep: u32,
) -> Result<ConformanceReport> {
    let noise = Raster::from_elem(image.dim(), lit::<T>(0.25));
    let schedule = provider.schedule();
    let (a, s) = schedule.coefficients(timestep)?;
    let noisy = ndarray::Zip::from(image)
        .and(&noise)
        .map_collect(|&x, &e| a * x + s * e);
    let query = |scaling| NoiseQuery {
        noisy: &noisy,
        noise: &noise,
        timestep,
        prompt,
        scaling,
    };
    let base = provider.introspect_attention(&query(None)).map_err(backend)?;
    let scaled = provider.introspect_attention(&query(Some(scaling))).map_err(backend)?;
    let unit = scaling.with_multiplier(T::one());
    let plain = provider.predict_noise(&query(None)).map_err(backend)?;
    let at_one = provider.predict_noise(&query(Some(&unit))).map_err(backend)?;
    Ok(ConformanceReport {
        sites: base.iter().map(|s| s.name.clone()).collect(),
        checks: vec![
            row_sums(&base),
            token_scaling(&base, &scaled, scaling),
            unit_drift(&plain, &at_one),
        ],
    })
}

/// [`run_conformance`], failing on the first violated check.
pub fn provider_conformance_check<T: Scalar>(
    provider: &dyn ScoreProvider<T>,
    prompt: &str,
    image: &Raster<T>,
    scaling: &TokenScaling<T>,
    timestep: u32,
) -> Result<ConformanceReport> {
    run_conformance(provider, prompt, image, scaling, timestep)?.into_result()
}

/// Predicts exactly the injected noise. Distillation against it is zero.
#[derive(Debug, Clone)]
pub struct EchoProvider<T> {
    schedule: NoiseSchedule<T>,
}

impl<T: Scalar> Default for EchoProvider<T> {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::unit(super::schedule::TOTAL_STEPS),
        }
    }
}

impl<T: Scalar> ScoreProvider<T> for EchoProvider<T> {
    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn predict_noise(&self, q: &NoiseQuery<'_, T>) -> std::result::Result<Raster<T>, BackendError> {
        Ok(q.noise.clone())
    }

    fn introspect_attention(&self, _q: &NoiseQuery<'_, T>) -> std::result::Result<Vec<AttentionSite<T>>, BackendError> {
        Ok(Vec::new())
    }
}

/// Wraps a provider and renormalizes attention rows after scaling.
pub struct RenormalizingProvider<P>(pub P);

impl<T: Scalar, P: ScoreProvider<T>> ScoreProvider<T> for RenormalizingProvider<P> {
    fn schedule(&self) -> &NoiseSchedule<T> {
        self.0.schedule()
    }

    fn predict_noise(&self, q: &NoiseQuery<'_, T>) -> std::result::Result<Raster<T>, BackendError> {
        self.0.predict_noise(q)
    }

    fn introspect_attention(&self, q: &NoiseQuery<'_, T>) -> std::result::Result<Vec<AttentionSite<T>>, BackendError> {
        let mut sites = self.0.introspect_attention(q)?;
        for s in &mut sites {
            for mut row in s.maps.rows_mut() {
                let sum: T = row.iter().copied().sum();
                row.mapv_inplace(|v| v / sum);
            }
        }
        Ok(sites)
    }
}

/// Wraps a provider and perturbs its output whenever any scaling is requested.
pub struct DriftingProvider<P> {
    pub inner: P,
    pub drift: f64,
}

impl<T: Scalar, P: ScoreProvider<T>> ScoreProvider<T> for DriftingProvider<P> {
    fn schedule(&self) -> &NoiseSchedule<T> {
        self.inner.schedule()
    }

    fn predict_noise(&self, q: &NoiseQuery<'_, T>) -> std::result::Result<Raster<T>, BackendError> {
        let out = self.inner.predict_noise(q)?;
        Ok(match q.scaling {
            Some(_) => out.mapv(|v| v + lit(self.drift)),
            None => out,
        })
    }

    fn introspect_attention(&self, q: &NoiseQuery<'_, T>) -> std::result::Result<Vec<AttentionSite<T>>, BackendError> {
        self.inner.introspect_attention(q)
    }
}
