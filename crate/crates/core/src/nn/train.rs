//! Mini-batch SGD with momentum and weight decay.

use serde::{Deserialize, Serialize};

use super::{backward, batch_loss, forward, LayerParams, Network};
use crate::error::{Error, Result};
use crate::rng::{permutation, stream_rng, STREAM_SHUFFLE};
use crate::scalar::{s64, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            rng_seed: 1,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy per epoch, in epoch order.
    pub epoch_loss: Vec<f64>,
}

/// Train in place. Sample order is a fresh deterministic permutation each
/// epoch (derived from `rng_seed` and the epoch index); the final short batch
/// is kept. Frozen layers are skipped by the update entirely, so their bytes
/// never change even with weight decay.
pub fn train<S: Scalar>(
    net: &mut Network<S>,
    images: &Tensor<S>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let dims = images.shape();
    let (in_h, in_w, in_c) = net.config().input_dims;
    if dims.len() != 4 || dims[1] != in_c || dims[2] != in_h || dims[3] != in_w {
        return Err(Error::Shape(format!(
            "image tensor {dims:?} does not match input dims [N, {in_c}, {in_h}, {in_w}]"
        )));
    }
    let n = dims[0];
    if n == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} images", labels.len())));
    }
    let num_classes = net.config().num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }

    let sample_len = in_c * in_h * in_w;
    let mut velocity: Vec<Option<LayerParams<S>>> = net
        .params()
        .iter()
        .map(|p| {
            p.as_ref().map(|lp| LayerParams {
                weights: Tensor::zeros(lp.weights.shape()),
                bias: Tensor::zeros(lp.bias.shape()),
            })
        })
        .collect();

    let lr = s64::<S>(cfg.learning_rate);
    let mom = s64::<S>(cfg.momentum);
    let wd = s64::<S>(cfg.weight_decay);
    let mut log = TrainLog { epoch_loss: Vec::with_capacity(cfg.epochs) };

    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.rng_seed, STREAM_SHUFFLE, epoch as u64);
        let order = permutation(&mut rng, n);
        let mut epoch_total = 0.0f64;

        for chunk in order.chunks(cfg.batch_size) {
            let bs = chunk.len();
            let mut batch = vec![S::zero(); bs * sample_len];
            for (row, &src) in chunk.iter().enumerate() {
                batch[row * sample_len..(row + 1) * sample_len]
                    .copy_from_slice(&images.data()[src * sample_len..(src + 1) * sample_len]);
            }
            let batch = Tensor::new(vec![bs, in_c, in_h, in_w], batch)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let pass = forward(net, &batch)?;
            let loss = batch_loss(&pass, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite loss at epoch {epoch}; lower the learning rate"
                )));
            }
            epoch_total += loss.to_f64_exact() * bs as f64;

            let grads = backward(net, &pass, &batch_labels)?;
            for layer in 0..net.config().layers.len() {
                if net.frozen().contains(&layer) {
                    continue;
                }
                let (Some(p), Some(g), Some(v)) = (
                    net.params_mut()[layer].as_mut(),
                    grads.layers[layer].as_ref(),
                    velocity[layer].as_mut(),
                ) else {
                    continue;
                };
                sgd_update(p.weights.data_mut(), g.weights.data(), v.weights.data_mut(), lr, mom, wd);
                sgd_update(p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), lr, mom, wd);
            }
        }
        log.epoch_loss.push(epoch_total / n as f64);
    }
    Ok(log)
}

fn sgd_update<S: Scalar>(p: &mut [S], g: &[S], v: &mut [S], lr: S, mom: S, wd: S) {
    for i in 0..p.len() {
        v[i] = mom * v[i] - lr * (g[i] + wd * p[i]);
        p[i] += v[i];
    }
}
