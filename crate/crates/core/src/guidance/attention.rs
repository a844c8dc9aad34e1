use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Multiplier applied to the attention maps of selected tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScaling<T> {
    pub tokens: BTreeSet<usize>,
    pub multiplier: T,
}

impl<T: Scalar> TokenScaling<T> {
    pub fn new(tokens: impl IntoIterator<Item = usize>, multiplier: T) -> Result<Self> {
        let s = Self {
            tokens: tokens.into_iter().collect(),
            multiplier,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.multiplier > T::zero()) || !self.multiplier.is_finite() {
            return Err(Error::validation(format!(
                "token multiplier must be positive, got {}",
                self.multiplier
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, n_tokens: usize) -> Result<()> {
        self.validate()?;
        if let Some(&j) = self.tokens.iter().find(|&&j| j >= n_tokens) {
            return Err(Error::validation(format!(
                "token index {j} out of range for {n_tokens} tokens"
            )));
        }
        Ok(())
    }

    /// Same tokens with a different multiplier.
    pub fn with_multiplier(&self, multiplier: T) -> Self {
        Self {
            tokens: self.tokens.clone(),
            multiplier,
        }
    }
}

/// Row-wise `softmax(Q Kᵀ / √d)`.
pub fn attention_maps<T: Scalar>(queries: ArrayView2<'_, T>, keys: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let d = queries.ncols();
    if d == 0 {
        return Err(Error::validation("attention feature dimension must be positive"));
    }
    if keys.ncols() != d {
        return Err(Error::validation(format!(
            "query dimension {d} does not match key dimension {}",
            keys.ncols()
        )));
    }
    if keys.nrows() == 0 {
        return Err(Error::validation("attention needs at least one key"));
    }
    let inv = T::one() / lit::<T>(d as f64).sqrt();
    let mut logits = queries.dot(&keys.t()).mapv(|v| v * inv);
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(logits)
}

/// Multiplies the designated columns by `c`. Nothing is renormalized.
pub fn reweight_attention<T: Scalar>(maps: ArrayView2<'_, T>, scaling: &TokenScaling<T>) -> Result<Array2<T>> {
    scaling.validate_for(maps.ncols())?;
    let mut out = maps.to_owned();
    for &j in &scaling.tokens {
        out.column_mut(j).mapv_inplace(|v| v * scaling.multiplier);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn softmax_cases() {
        let q = array![[1.0, 2.0], [-3.0, 0.5]];
        let one: Array2<f64> = attention_maps(q.view(), array![[0.3, 0.1]].view()).unwrap();
        assert!(one.iter().all(|&v| v == 1.0));
        let orth = attention_maps(
            array![[0.0, 0.0]].view(),
            array![[1.0, 0.0], [0.0, 2.0], [5.0, 5.0]].view(),
        )
        .unwrap();
        assert!(orth.iter().all(|&v: &f64| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(attention_maps(
            ndarray::Array2::<f64>::zeros((2, 0)).view(),
            ndarray::Array2::zeros((2, 0)).view()
        )
        .is_err());
    }

    #[test]
    fn reweight_examples() {
        let row = array![[0.1, 0.2, 0.3, 0.4]];
        let s = TokenScaling::new([1], 25.0).unwrap();
        assert_eq!(
            reweight_attention(row.view(), &s).unwrap(),
            array![[0.1, 0.2 * 25.0, 0.3, 0.4]]
        );
        assert!((0.2f64 * 25.0 - 5.0).abs() < 1e-15);
        let s = TokenScaling::new([0, 2], 2.0).unwrap();
        let q = array![[0.25, 0.25, 0.25, 0.25]];
        assert_eq!(
            reweight_attention(q.view(), &s).unwrap(),
            array![[0.5, 0.25, 0.5, 0.25]]
        );
        let id = TokenScaling::new([0, 1, 2, 3], 1.0).unwrap();
        assert_eq!(reweight_attention(row.view(), &id).unwrap(), row);
        assert!(reweight_attention(row.view(), &TokenScaling::new([4], 2.0).unwrap()).is_err());
        assert!(TokenScaling::new([0], 0.0).is_err());
    }
}
