//! Representation-quality diagnostics: posterior entropy (exact and a
//! second-order Taylor approximation around uniform logits), rank and linear
//! correlation, and the per-image norm-vs-entropy study used to show that the
//! bottleneck norm tracks image quality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, softmax, LayerKind, Network};
use crate::rng::{stream_rng, STREAM_IMAGE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{IdentityId, ImageId};
use rand::Rng;

/// Exact Shannon entropy (natural log) of `softmax(z)`.
pub fn entropy<S: Scalar>(z: &[S]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Invalid("entropy of an empty logit vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("logits must be finite".into()));
    }
    let p = softmax(z);
    let mut h = 0.0f64;
    for v in p {
        let v = v.to_f64_exact();
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    Ok(h)
}

/// Second-order entropy approximation around the uniform distribution:
/// `T(z) = -sum_i (1 + z_i)/N * (z_i - ln N)`, valid for centered logits.
/// Errors if `|mean(z)| > 1e-9`; center with [`centered`] first.
pub fn taylor_entropy<S: Scalar>(z: &[S]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Invalid("entropy of an empty logit vector".into()));
    }
    let n = z.len() as f64;
    let mean = z.iter().map(|v| v.to_f64_exact()).sum::<f64>() / n;
    if mean.abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "taylor entropy needs centered logits, got mean {mean:e}"
        )));
    }
    let ln_n = n.ln();
    let mut t = 0.0f64;
    for v in z {
        let zi = v.to_f64_exact();
        t -= (1.0 + zi) / n * (zi - ln_n);
    }
    Ok(t)
}

/// Subtract the mean, in f64.
pub fn centered<S: Scalar>(z: &[S]) -> Vec<f64> {
    let n = z.len() as f64;
    let mean = z.iter().map(|v| v.to_f64_exact()).sum::<f64>() / n;
    z.iter().map(|v| v.to_f64_exact() - mean).collect()
}

/// Mean `|taylor_entropy - entropy|` at each logit scale, over `draws` random
/// centered logit vectors of `num_components` entries drawn uniformly from
/// `[-scale/2, scale/2]` (so the centered magnitude stays below `scale`).
/// The error shrinks quadratically: halving the scale should quarter it.
pub fn taylor_error_curve(
    num_components: usize,
    scales: &[f64],
    draws: usize,
    rng_seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if num_components < 2 {
        return Err(Error::Invalid("need at least two components".into()));
    }
    if draws == 0 {
        return Err(Error::Invalid("need at least one draw".into()));
    }
    let mut out = Vec::with_capacity(scales.len());
    for (si, &scale) in scales.iter().enumerate() {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Invalid(format!("scale must be positive, got {scale}")));
        }
        let mut rng = stream_rng(rng_seed, STREAM_IMAGE, si as u64);
        let mut total = 0.0f64;
        for _ in 0..draws {
            let raw: Vec<f64> = (0..num_components)
                .map(|_| (rng.random::<f64>() - 0.5) * scale)
                .collect();
            let z = centered(&raw);
            total += (taylor_entropy(&z)? - entropy(&z)?).abs();
        }
        out.push((scale, total / draws as f64));
    }
    Ok(out)
}

/// Pearson linear correlation. Errors on length mismatch, fewer than two
/// points, or zero variance in either input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} xs vs {} ys", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Invalid("correlation needs at least two points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("correlation undefined for constant input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, with tied values sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("rank input must be finite"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} xs vs {} ys", x.len(), y.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEntropyRecord {
    pub image_id: ImageId,
    pub identity: IdentityId,
    /// L2 norm of the bottleneck activations before normalization.
    pub raw_norm: f64,
    /// Exact entropy of the class posterior.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEntropyStudy {
    pub records: Vec<NormEntropyRecord>,
    pub pearson: f64,
    pub spearman: f64,
}

/// Per-image bottleneck norm and posterior entropy, with their correlation
/// across the set. A healthy identity representation shows the two moving in
/// opposite directions: degraded images silence the bottleneck and flatten
/// the posterior.
pub fn norm_entropy_study<S: Scalar>(
    net: &Network<S>,
    images: &Tensor<S>,
    ids: &[(ImageId, IdentityId)],
) -> Result<NormEntropyStudy> {
    let dims = images.shape();
    if dims.len() != 4 {
        return Err(Error::Shape(format!("expected [N, C, H, W] images, got {dims:?}")));
    }
    let n = dims[0];
    if ids.len() != n {
        return Err(Error::Shape(format!("{} ids for {n} images", ids.len())));
    }
    let sample_len = dims[1] * dims[2] * dims[3];
    let f7_out = net.f7_index() + 1;
    let mut records = Vec::with_capacity(n);
    for start in (0..n).step_by(128) {
        let end = (start + 128).min(n);
        let batch = Tensor::new(
            vec![end - start, dims[1], dims[2], dims[3]],
            images.data()[start * sample_len..end * sample_len].to_vec(),
        )?;
        let pass = forward(net, &batch)?;
        for row in 0..end - start {
            let raw_norm = crate::scalar::l2_norm(pass.activation_row(f7_out, row));
            let (image_id, identity) = ids[start + row].clone();
            records.push(NormEntropyRecord {
                image_id,
                identity,
                raw_norm: raw_norm.to_f64_exact(),
                entropy: entropy(pass.logit_row(row))?,
            });
        }
    }
    let norms: Vec<f64> = records.iter().map(|r| r.raw_norm).collect();
    let ents: Vec<f64> = records.iter().map(|r| r.entropy).collect();
    Ok(NormEntropyStudy {
        pearson: pearson(&norms, &ents)?,
        spearman: spearman(&norms, &ents)?,
        records,
    })
}

/// Post-activation map of the last locally-connected layer for one image,
/// shaped `[channels, height, width]`.
pub fn lc_activation_map<S: Scalar>(net: &Network<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
    let lc = net
        .config()
        .layers
        .iter()
        .rposition(|l| l.kind == LayerKind::LocallyConnected)
        .ok_or_else(|| Error::Config("network has no locally-connected layer".into()))?;
    let dims = image.shape();
    let batch = match dims.len() {
        3 => Tensor::new(vec![1, dims[0], dims[1], dims[2]], image.data().to_vec())?,
        4 if dims[0] == 1 => image.clone(),
        _ => {
            return Err(Error::Shape(format!(
                "expected one [C, H, W] image, got {dims:?}"
            )))
        }
    };
    let pass = forward(net, &batch)?;
    let shape = net.shapes()[lc];
    Tensor::new(
        vec![shape.out_c, shape.out_h, shape.out_w],
        pass.activations[lc + 1].data().to_vec(),
    )
}
