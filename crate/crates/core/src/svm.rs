//! L2-regularized linear hinge-loss classifier, trained by full-batch
//! subgradient descent. One solver backs both the per-identity hyperplanes
//! and the pair-verification classifier; full-batch updates with a fixed
//! sample order make the result independent of thread count and rerun.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, s64, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// L2 penalty weight; the objective is
    /// `lambda/2 ||w||^2 + mean hinge loss`.
    pub lambda: f64,
    /// Full-batch subgradient steps.
    pub epochs: usize,
    /// Initial step size, decayed as `lr / (1 + lambda * lr * t)`.
    pub learning_rate: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 0.01,
            epochs: 200,
            learning_rate: 1.0,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// `score(x) = w . x + b`; positive scores predict the positive class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<S> {
    pub weights: Vec<S>,
    pub bias: S,
}

impl<S: Scalar> LinearModel<S> {
    pub fn score(&self, x: &[S]) -> S {
        dot(&self.weights, x) + self.bias
    }

    pub fn predict(&self, x: &[S]) -> bool {
        self.score(x) > S::zero()
    }
}

/// Regularized mean hinge objective of a model on a labeled set.
pub fn hinge_objective<S: Scalar>(
    model: &LinearModel<S>,
    features: &[S],
    dim: usize,
    positive: &[bool],
    lambda: f64,
) -> f64 {
    let n = positive.len();
    let mut loss = 0.0f64;
    for (i, &pos) in positive.iter().enumerate() {
        let y = if pos { 1.0 } else { -1.0 };
        let margin = y * model.score(&features[i * dim..(i + 1) * dim]).to_f64_exact();
        loss += (1.0 - margin).max(0.0);
    }
    let w2: f64 = model
        .weights
        .iter()
        .map(|w| {
            let v = w.to_f64_exact();
            v * v
        })
        .sum();
    0.5 * lambda * w2 + loss / n as f64
}

/// Train on `features` (row-major, `positive.len()` rows of `dim`). Requires
/// both classes to be present.
pub fn train_hinge<S: Scalar>(
    features: &[S],
    dim: usize,
    positive: &[bool],
    cfg: &SvmConfig,
) -> Result<LinearModel<S>> {
    cfg.validate()?;
    let n = positive.len();
    if n == 0 || dim == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if features.len() != n * dim {
        return Err(Error::Shape(format!(
            "{} feature values for {n} rows of {dim}",
            features.len()
        )));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    if pos == 0 || pos == n {
        return Err(Error::Data(format!(
            "need both classes, got {pos} positive of {n}"
        )));
    }

    let lambda = s64::<S>(cfg.lambda);
    let inv_n = s64::<S>(1.0 / n as f64);
    let mut w = vec![S::zero(); dim];
    let mut b = S::zero();
    let mut g_w = vec![S::zero(); dim];

    for t in 0..cfg.epochs {
        for (gi, &wi) in g_w.iter_mut().zip(&w) {
            *gi = lambda * wi;
        }
        let mut g_b = S::zero();
        for (i, &p) in positive.iter().enumerate() {
            let y = if p { S::one() } else { -S::one() };
            let x = &features[i * dim..(i + 1) * dim];
            let margin = y * (dot(&w, x) + b);
            if margin < S::one() {
                let scale = y * inv_n;
                for (gi, &xi) in g_w.iter_mut().zip(x) {
                    *gi -= scale * xi;
                }
                g_b -= scale;
            }
        }
        let step = s64::<S>(cfg.learning_rate / (1.0 + cfg.lambda * cfg.learning_rate * t as f64));
        for (wi, &gi) in w.iter_mut().zip(&g_w) {
            *wi -= step * gi;
        }
        b -= step * g_b;
    }
    Ok(LinearModel { weights: w, bias: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, STREAM_INIT};
    use rand::Rng;

    fn two_blobs(n_per: usize, gap: f64, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = stream_rng(seed, STREAM_INIT, 800);
        let mut x = Vec::with_capacity(n_per * 4);
        let mut y = Vec::with_capacity(n_per * 2);
        for i in 0..n_per * 2 {
            let pos = i % 2 == 0;
            let center = if pos { gap } else { -gap };
            x.push(center + rng.random::<f64>() - 0.5);
            x.push(rng.random::<f64>() - 0.5);
            y.push(pos);
        }
        (x, y)
    }

    #[test]
    fn separates_two_blobs() {
        let (x, y) = two_blobs(40, 2.0, 1);
        let cfg = SvmConfig { lambda: 1.0 / 80.0, ..SvmConfig::default() };
        let model = train_hinge(&x, 2, &y, &cfg).unwrap();
        assert!(model.weights[0] > 0.0, "separating direction should point at the positive blob");
        let correct = y
            .iter()
            .enumerate()
            .filter(|&(i, &pos)| model.predict(&x[i * 2..i * 2 + 2]) == pos)
            .count();
        assert_eq!(correct, y.len());
    }

    #[test]
    fn objective_decreases_with_training() {
        let (x, y) = two_blobs(30, 1.0, 2);
        let lambda = 1.0 / 60.0;
        let short = SvmConfig { lambda, epochs: 2, ..SvmConfig::default() };
        let long = SvmConfig { lambda, epochs: 300, ..SvmConfig::default() };
        let a = train_hinge(&x, 2, &y, &short).unwrap();
        let b = train_hinge(&x, 2, &y, &long).unwrap();
        let ja = hinge_objective(&a, &x, 2, &y, lambda);
        let jb = hinge_objective(&b, &x, 2, &y, lambda);
        assert!(jb < ja, "more epochs should reduce the objective: {ja} -> {jb}");
    }

    #[test]
    fn stronger_regularization_shrinks_weights() {
        let (x, y) = two_blobs(30, 2.0, 3);
        let weak = train_hinge(
            &x,
            2,
            &y,
            &SvmConfig { lambda: 1e-4, ..SvmConfig::default() },
        )
        .unwrap();
        let strong = train_hinge(
            &x,
            2,
            &y,
            &SvmConfig { lambda: 1.0, ..SvmConfig::default() },
        )
        .unwrap();
        let norm = |m: &LinearModel<f64>| m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm(&strong) < norm(&weak));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (x, y) = two_blobs(25, 1.5, 4);
        let cfg = SvmConfig { lambda: 0.02, ..SvmConfig::default() };
        let xs: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let a = train_hinge(&xs, 2, &y, &cfg).unwrap();
        let b = train_hinge(&xs, 2, &y, &cfg).unwrap();
        let bits = |m: &LinearModel<f32>| -> Vec<u32> {
            m.weights
                .iter()
                .chain(std::iter::once(&m.bias))
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        assert!(train_hinge(&x, 2, &[true, true], &SvmConfig::default()).is_err());
        assert!(train_hinge(&x, 2, &[], &SvmConfig::default()).is_err());
        assert!(train_hinge(&x, 3, &[true, false], &SvmConfig::default()).is_err());
        let bad = SvmConfig { lambda: 0.0, ..SvmConfig::default() };
        assert!(train_hinge(&x, 2, &[true, false], &bad).is_err());
    }
}
