//! Analytic score provider for desk-scale experiments.
//!
//! The predicted noise is `eps + gain(t) ∇_x Σ_j u_j w_j P_j(x)`. Each term
//! `P_j` belongs to one caption token, and `u_j` is the ratio of that token's
//! scaled to unscaled attention mass, so scaling a token's attention by `c`
//! multiplies its term by `c`.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention_maps, reweight_attention, TokenScaling};
use super::distill::{AttentionSite, NoiseQuery, ScoreProvider};
use super::schedule::{NoiseSchedule, TOTAL_STEPS};
use crate::error::{BackendError, Error, Result};
use crate::raster::Raster;
use crate::rng;
use crate::scalar::{lit, Scalar};
use crate::scene::tokenize_caption;

const QUERIES: usize = 16;
const FEATURES: usize = 8;
const SITES: [&str; 2] = ["down.cross_attn", "up.cross_attn"];

/// How strongly a term acts at timestep `t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gain {
    #[default]
    Constant,
    /// `sigmoid((t - center) / width)`: layout only matters at high noise.
    HighNoise { center: f64, width: f64 },
    /// `sigmoid((center - t) / width)`: appearance dominates at low noise.
    LowNoise { center: f64, width: f64 },
}

impl Gain {
    pub fn eval(&self, t: u32) -> f64 {
        match *self {
            Gain::Constant => 1.0,
            Gain::HighNoise { center, width } => 1.0 / (1.0 + (-(t as f64 - center) / width).exp()),
            Gain::LowNoise { center, width } => 1.0 / (1.0 + ((t as f64 - center) / width).exp()),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Gain::HighNoise { center, width } | Gain::LowNoise { center, width }
                if !center.is_finite() || !(width > 0.0) || !width.is_finite() =>
            {
                Err(Error::validation(
                    "noise-dependent gain needs a finite center and positive width",
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Scalar field over an image `(3, H, W)`. Pixel coordinates are pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential<T> {
    Null,
    /// `½ Σ (x - target)²`.
    Quadratic {
        target: Raster<T>,
    },
    /// `½ |centroid(key · x) - target|²`.
    Centroid {
        key: [T; 3],
        target: [T; 2],
    },
    /// `½ |centroid(a · x) - centroid(b · x) - offset|²`.
    Relation {
        a: [T; 3],
        b: [T; 3],
        offset: [T; 2],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTerm<T> {
    pub token: usize,
    pub weight: T,
    pub gain: Gain,
    pub potential: Potential<T>,
}

/// Key-weighted mass and centroid with its pixel-space gradient factors.
struct Moments<T> {
    mass: T,
    centroid: [T; 2],
}

fn moments<T: Scalar>(x: &Raster<T>, key: &[T; 3]) -> Moments<T> {
    let (_, h, w) = x.dim();
    let half = lit::<T>(0.5);
    let mut mass = T::zero();
    let mut sx = T::zero();
    let mut sy = T::zero();
    for y in 0..h {
        for xx in 0..w {
            let m = key[0] * x[[0, y, xx]] + key[1] * x[[1, y, xx]] + key[2] * x[[2, y, xx]];
            mass += m;
            sx += m * (lit::<T>(xx as f64) + half);
            sy += m * (lit::<T>(y as f64) + half);
        }
    }
    let centroid = if mass > T::zero() {
        [sx / mass, sy / mass]
    } else {
        [T::zero(); 2]
    };
    Moments { mass, centroid }
}

/// Below this key mass a centroid is undefined and its term is inactive.
const MIN_MASS: f64 = 1e-9;

/// Adds `scale · d(centroid · dir)/dx` to `grad`.
fn add_centroid_grad<T: Scalar>(grad: &mut Raster<T>, key: &[T; 3], m: &Moments<T>, dir: [T; 2], scale: T) {
    let (_, h, w) = grad.dim();
    let half = lit::<T>(0.5);
    let f = scale / m.mass;
    for y in 0..h {
        for xx in 0..w {
            let px = lit::<T>(xx as f64) + half - m.centroid[0];
            let py = lit::<T>(y as f64) + half - m.centroid[1];
            let s = f * (dir[0] * px + dir[1] * py);
            for c in 0..3 {
                grad[[c, y, xx]] += s * key[c];
            }
        }
    }
}

impl<T: Scalar> Potential<T> {
    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        match self {
            Potential::Quadratic { target } if target.shape() != shape => Err(Error::validation(format!(
                "quadratic target {:?} does not match image {shape:?}",
                target.shape()
            ))),
            Potential::Centroid { key, .. } if key.iter().any(|k| *k < T::zero()) => {
                Err(Error::validation("centroid key must be non-negative"))
            }
            Potential::Relation { a, b, .. } if a.iter().chain(b).any(|k| *k < T::zero()) => {
                Err(Error::validation("relation keys must be non-negative"))
            }
            _ => Ok(()),
        }
    }

    pub fn energy(&self, x: &Raster<T>) -> T {
        let half = lit::<T>(0.5);
        match self {
            Potential::Null => T::zero(),
            Potential::Quadratic { target } => {
                half * ndarray::Zip::from(x)
                    .and(target)
                    .fold(T::zero(), |a, &p, &q| a + (p - q) * (p - q))
            }
            Potential::Centroid { key, target } => {
                let m = moments(x, key);
                if m.mass <= lit(MIN_MASS) {
                    return T::zero();
                }
                let d = [m.centroid[0] - target[0], m.centroid[1] - target[1]];
                half * (d[0] * d[0] + d[1] * d[1])
            }
            Potential::Relation { .. } => match self.relation_residual(x) {
                Some(r) => half * (r[0] * r[0] + r[1] * r[1]),
                None => T::zero(),
            },
        }
    }

    /// `centroid(a) - centroid(b) - offset` for relation terms.
    pub fn relation_residual(&self, x: &Raster<T>) -> Option<[T; 2]> {
        let Potential::Relation { a, b, offset } = self else {
            return None;
        };
        let ma = moments(x, a);
        let mb = moments(x, b);
        if ma.mass <= lit(MIN_MASS) || mb.mass <= lit(MIN_MASS) {
            return None;
        }
        Some([
            ma.centroid[0] - mb.centroid[0] - offset[0],
            ma.centroid[1] - mb.centroid[1] - offset[1],
        ])
    }

    /// Adds `scale · ∇_x P` to `grad`.
    pub fn add_gradient(&self, x: &Raster<T>, scale: T, grad: &mut Raster<T>) {
        match self {
            Potential::Null => {}
            Potential::Quadratic { target } => {
                ndarray::Zip::from(grad)
                    .and(x)
                    .and(target)
                    .for_each(|g, &p, &q| *g += scale * (p - q));
            }
            Potential::Centroid { key, target } => {
                let m = moments(x, key);
                if m.mass <= lit(MIN_MASS) {
                    return;
                }
                let d = [m.centroid[0] - target[0], m.centroid[1] - target[1]];
                add_centroid_grad(grad, key, &m, d, scale);
            }
            Potential::Relation { a, b, .. } => {
                let Some(r) = self.relation_residual(x) else {
                    return;
                };
                add_centroid_grad(grad, a, &moments(x, a), r, scale);
                add_centroid_grad(grad, b, &moments(x, b), r, -scale);
            }
        }
    }
}

/// Serializable term description. `anchor` is a quadratic term whose target is
/// supplied when the provider is built, usually the reference image, and
/// `centroid_anchor` holds a keyed centroid where it is in that image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermKind {
    Null,
    Anchor,
    CentroidAnchor { key: [f64; 3] },
    Centroid { key: [f64; 3], target: [f64; 2] },
    Relation { a: [f64; 3], b: [f64; 3], offset: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub token: usize,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub gain: Gain,
    pub potential: TermKind,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub terms: Vec<TermConfig>,
}

impl PotentialConfig {
    pub fn resolve<T: Scalar>(&self, anchor: Option<&Raster<T>>) -> Result<Vec<PotentialTerm<T>>> {
        self.terms
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let potential = match &t.potential {
                    TermKind::Null => Potential::Null,
                    TermKind::Anchor => Potential::Quadratic {
                        target: anchor
                            .ok_or_else(|| Error::validation(format!("term {i}: anchor needs a reference image")))?
                            .clone(),
                    },
                    TermKind::CentroidAnchor { key } => {
                        let image = anchor.ok_or_else(|| {
                            Error::validation(format!("term {i}: centroid anchor needs a reference image"))
                        })?;
                        let key = key.map(lit);
                        let m = moments(image, &key);
                        if m.mass <= lit(MIN_MASS) {
                            return Err(Error::validation(format!(
                                "term {i}: key has no mass in the reference image"
                            )));
                        }
                        Potential::Centroid {
                            key,
                            target: m.centroid,
                        }
                    }
                    TermKind::Centroid { key, target } => Potential::Centroid {
                        key: key.map(lit),
                        target: target.map(lit),
                    },
                    TermKind::Relation { a, b, offset } => Potential::Relation {
                        a: a.map(lit),
                        b: b.map(lit),
                        offset: offset.map(lit),
                    },
                };
                Ok(PotentialTerm {
                    token: t.token,
                    weight: lit(t.weight),
                    gain: t.gain,
                    potential,
                })
            })
            .collect()
    }
}

struct Site<T> {
    name: &'static str,
    queries: Array2<T>,
    keys: Array2<T>,
}

fn token_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub struct SyntheticProvider<T> {
    tokens: Vec<String>,
    terms: Vec<PotentialTerm<T>>,
    shape: Option<(usize, usize, usize)>,
    sites: Vec<Site<T>>,
    schedule: NoiseSchedule<T>,
}

impl<T: Scalar> SyntheticProvider<T> {
    pub fn new(prompt: &str, terms: Vec<PotentialTerm<T>>, seed: u64) -> Result<Self> {
        let tokens = tokenize_caption(prompt)?;
        let mut shape = None;
        for (i, t) in terms.iter().enumerate() {
            if t.token >= tokens.len() {
                return Err(Error::validation(format!(
                    "term {i}: token {} out of range for {} tokens",
                    t.token,
                    tokens.len()
                )));
            }
            if !(t.weight >= T::zero()) || !t.weight.is_finite() {
                return Err(Error::validation(format!(
                    "term {i}: weight must be finite and non-negative"
                )));
            }
            t.gain.validate()?;
            if let Potential::Quadratic { target } = &t.potential {
                let d = target.dim();
                if shape.is_some_and(|s| s != d) || d.0 != 3 {
                    return Err(Error::validation(format!("term {i}: inconsistent target shape {d:?}")));
                }
                shape = Some(d);
            }
        }
        let sites = SITES
            .iter()
            .enumerate()
            .map(|(s, &name)| {
                let mut r = rng::stream(seed, &[0x7369_7465, s as u64]);
                let queries = Array2::from_shape_simple_fn((QUERIES, FEATURES), || lit(r.random_range(-1.0..1.0)));
                let mut keys = Array2::zeros((tokens.len(), FEATURES));
                for (j, tok) in tokens.iter().enumerate() {
                    let mut kr = rng::stream(seed, &[0x006b_6579, s as u64, j as u64, token_hash(tok)]);
                    for f in 0..FEATURES {
                        keys[[j, f]] = lit(kr.random_range(-1.0..1.0));
                    }
                }
                Site { name, queries, keys }
            })
            .collect();
        Ok(Self {
            tokens,
            terms,
            shape,
            sites,
            schedule: NoiseSchedule::unit(TOTAL_STEPS),
        })
    }

    pub fn terms(&self) -> &[PotentialTerm<T>] {
        &self.terms
    }

    fn unscaled(&self) -> Result<Vec<Array2<T>>> {
        self.sites
            .iter()
            .map(|s| attention_maps(s.queries.view(), s.keys.view()))
            .collect()
    }

    /// Per-token term multipliers `u_j`.
    pub fn token_weights(&self, scaling: Option<&TokenScaling<T>>) -> Result<Vec<T>> {
        let n = self.tokens.len();
        let Some(scaling) = scaling else {
            return Ok(vec![T::one(); n]);
        };
        let base = self.unscaled()?;
        let mut u = vec![T::zero(); n];
        for a in &base {
            let scaled = reweight_attention(a.view(), scaling)?;
            for (j, uj) in u.iter_mut().enumerate() {
                let num: T = scaled.column(j).iter().copied().sum();
                let den: T = a.column(j).iter().copied().sum();
                *uj += num / den;
            }
        }
        let sites = lit::<T>(base.len() as f64);
        Ok(u.into_iter().map(|v| v / sites).collect())
    }

    /// `∇_x Σ_j u_j w_j gain_j(t) P_j(x)`.
    pub fn potential_gradient(
        &self,
        x: &Raster<T>,
        timestep: u32,
        scaling: Option<&TokenScaling<T>>,
    ) -> Result<Raster<T>> {
        let u = self.token_weights(scaling)?;
        let mut g = Array3::zeros(x.dim());
        for term in &self.terms {
            term.potential.validate(x.shape())?;
            let scale = u[term.token] * term.weight * lit(term.gain.eval(timestep));
            term.potential.add_gradient(x, scale, &mut g);
        }
        Ok(g)
    }

    /// `Σ_j u_j w_j gain_j(t) P_j(x)`.
    pub fn energy(&self, x: &Raster<T>, timestep: u32, scaling: Option<&TokenScaling<T>>) -> Result<T> {
        let u = self.token_weights(scaling)?;
        Ok(self
            .terms
            .iter()
            .map(|t| u[t.token] * t.weight * lit(t.gain.eval(timestep)) * t.potential.energy(x))
            .sum())
    }

    /// Residual of the first relation term, in pixels.
    pub fn relation_error(&self, x: &Raster<T>) -> Option<T> {
        self.terms
            .iter()
            .find_map(|t| t.potential.relation_residual(x))
            .map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt())
    }

    fn check_query(&self, q: &NoiseQuery<'_, T>) -> std::result::Result<(), BackendError> {
        let toks = tokenize_caption(q.prompt).map_err(|e| BackendError::new(e.to_string()))?;
        if toks != self.tokens {
            return Err(BackendError::new(format!(
                "prompt {:?} does not match the provider's caption",
                q.prompt
            )));
        }
        if let Some(s) = self.shape {
            if q.noisy.dim() != s {
                return Err(BackendError::new(format!(
                    "image shape {:?} does not match potential shape {s:?}",
                    q.noisy.dim()
                )));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ScoreProvider<T> for SyntheticProvider<T> {
    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn tokens(&self, _prompt: &str) -> std::result::Result<Vec<String>, BackendError> {
        Ok(self.tokens.clone())
    }

    fn predict_noise(&self, q: &NoiseQuery<'_, T>) -> std::result::Result<Raster<T>, BackendError> {
        self.check_query(q)?;
        let (a, s) = self
            .schedule
            .coefficients(q.timestep)
            .map_err(|e| BackendError::new(e.to_string()))?;
        let clean = ndarray::Zip::from(q.noisy)
            .and(q.noise)
            .map_collect(|&xt, &e| (xt - s * e) / a);
        let g = self
            .potential_gradient(&clean, q.timestep, q.scaling)
            .map_err(|e| BackendError::new(e.to_string()))?;
        Ok(g + q.noise)
    }

    fn introspect_attention(&self, q: &NoiseQuery<'_, T>) -> std::result::Result<Vec<AttentionSite<T>>, BackendError> {
        self.check_query(q)?;
        let base = self.unscaled().map_err(|e| BackendError::new(e.to_string()))?;
        self.sites
            .iter()
            .zip(base)
            .map(|(site, a)| {
                let maps = match q.scaling {
                    Some(s) => reweight_attention(a.view(), s).map_err(|e| BackendError::new(e.to_string()))?,
                    None => a,
                };
                Ok(AttentionSite {
                    name: site.name.to_string(),
                    maps,
                })
            })
            .collect()
    }
}
