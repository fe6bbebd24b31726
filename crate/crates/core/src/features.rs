//! Identity features taken from the bottleneck layer: extraction and
//! normalization, sign binarization, multi-network fusion, and the two
//! architecture transfers (bottleneck compression with a warm start, and
//! widening with a frozen convolutional front end).

use crate::error::{Error, Result};
use crate::nn::{build_network, forward, train, LayerKind, Network, TrainConfig, TrainLog};
use crate::scalar::{dot, l2_norm, Scalar};
use crate::tensor::Tensor;
use crate::{IdentityId, ImageId};

/// Batch rows per forward pass during extraction.
const EXTRACT_BATCH: usize = 128;

/// A unit-normalized bottleneck activation vector for one image.
///
/// `raw_norm` is the L2 norm of the activations before normalization; it is
/// kept because it carries image-quality signal. An image that silences the
/// whole bottleneck layer yields the zero vector with `raw_norm == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<S> {
    pub image_id: ImageId,
    pub identity: IdentityId,
    pub vector: Vec<S>,
    pub raw_norm: S,
}

impl<S: Scalar> Embedding<S> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.raw_norm == S::zero()
    }

    /// Cosine similarity; zero if either side is degenerate.
    pub fn cosine(&self, other: &Embedding<S>) -> S {
        dot(&self.vector, &other.vector)
    }
}

/// Run images through the network and return one embedding per row of
/// `images`, labeled by the parallel `ids` slice.
pub fn extract_embeddings<S: Scalar>(
    net: &Network<S>,
    images: &Tensor<S>,
    ids: &[(ImageId, IdentityId)],
) -> Result<Vec<Embedding<S>>> {
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
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EXTRACT_BATCH) {
        let end = (start + EXTRACT_BATCH).min(n);
        let batch = Tensor::new(
            vec![end - start, dims[1], dims[2], dims[3]],
            images.data()[start * sample_len..end * sample_len].to_vec(),
        )?;
        let pass = forward(net, &batch)?;
        for row in 0..end - start {
            let raw = pass.activation_row(f7_out, row);
            let norm = l2_norm(raw);
            let vector = if norm > S::zero() {
                raw.iter().map(|&v| v / norm).collect()
            } else {
                vec![S::zero(); raw.len()]
            };
            let (image_id, identity) = ids[start + row].clone();
            out.push(Embedding { image_id, identity, vector, raw_norm: norm });
        }
    }
    Ok(out)
}

/// Sign pattern of an embedding, packed little-endian: bit `i` lives in byte
/// `i / 8` at position `i % 8` and is set iff `vector[i] > 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryEmbedding {
    pub image_id: ImageId,
    pub identity: IdentityId,
    pub bits: Vec<u8>,
    pub num_bits: usize,
}

impl BinaryEmbedding {
    pub fn bit(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }
}

pub fn binarize<S: Scalar>(e: &Embedding<S>) -> BinaryEmbedding {
    let num_bits = e.vector.len();
    let mut bits = vec![0u8; num_bits.div_ceil(8)];
    for (i, &v) in e.vector.iter().enumerate() {
        if v > S::zero() {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    BinaryEmbedding {
        image_id: e.image_id.clone(),
        identity: e.identity.clone(),
        bits,
        num_bits,
    }
}

/// Fraction of matching bits, in `[0, 1]`.
pub fn hamming_similarity(a: &BinaryEmbedding, b: &BinaryEmbedding) -> Result<f64> {
    if a.num_bits != b.num_bits {
        return Err(Error::Shape(format!(
            "bit widths differ: {} vs {}",
            a.num_bits, b.num_bits
        )));
    }
    if a.num_bits == 0 {
        return Err(Error::Invalid("empty bit vectors".into()));
    }
    let distance: u32 = a
        .bits
        .iter()
        .zip(&b.bits)
        .map(|(&x, &y)| (x ^ y).count_ones())
        .sum();
    Ok((a.num_bits as f64 - distance as f64) / a.num_bits as f64)
}

/// Concatenate several embeddings of the same image (from different networks)
/// and re-normalize. The fused `raw_norm` is the norm of the concatenation,
/// `sqrt(k)` for `k` non-degenerate parts.
pub fn fuse<S: Scalar>(parts: &[&Embedding<S>]) -> Result<Embedding<S>> {
    let Some(first) = parts.first() else {
        return Err(Error::Invalid("nothing to fuse".into()));
    };
    for p in &parts[1..] {
        if p.image_id != first.image_id || p.identity != first.identity {
            return Err(Error::Invalid(format!(
                "fusing embeddings of different images: {} vs {}",
                first.image_id, p.image_id
            )));
        }
    }
    let mut vector: Vec<S> = Vec::with_capacity(parts.iter().map(|p| p.vector.len()).sum());
    for p in parts {
        vector.extend_from_slice(&p.vector);
    }
    let norm = l2_norm(&vector);
    if norm > S::zero() {
        for v in &mut vector {
            *v = *v / norm;
        }
    }
    Ok(Embedding {
        image_id: first.image_id.clone(),
        identity: first.identity.clone(),
        vector,
        raw_norm: norm,
    })
}

/// Shrink the bottleneck: keep every layer below F7 as a warm start, draw a
/// fresh F7 of width `new_bottleneck` and a fresh F8, then retrain the whole
/// stack on the given set.
pub fn compress_retrain<S: Scalar>(
    base: &Network<S>,
    images: &Tensor<S>,
    labels: &[usize],
    new_bottleneck: usize,
    tc: &TrainConfig,
) -> Result<(Network<S>, TrainLog)> {
    if new_bottleneck == 0 {
        return Err(Error::Config("bottleneck width must be positive".into()));
    }
    let mut cfg = base.config().clone();
    let f7 = cfg.f7_index();
    cfg.layers[f7].channels_out = new_bottleneck;
    cfg.bottleneck_dim = new_bottleneck;

    let mut net: Network<S> = build_network(&cfg, tc.rng_seed)?;
    for layer in 0..f7 {
        net.params_mut()[layer] = base.params()[layer].clone();
    }
    let log = train(&mut net, images, labels, tc)?;
    Ok((net, log))
}

/// Widen every locally-connected layer by `multiplier`, reusing the trained
/// convolutional front end (copied and frozen) and drawing fresh parameters
/// for the widened and fully-connected layers. The result still needs
/// training; F8 is sized for `num_classes`.
pub fn expand_network<S: Scalar>(
    base: &Network<S>,
    multiplier: usize,
    num_classes: usize,
    rng_seed: u64,
) -> Result<Network<S>> {
    if multiplier == 0 {
        return Err(Error::Config("multiplier must be positive".into()));
    }
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let mut cfg = base.config().clone();
    let first_lc = cfg
        .layers
        .iter()
        .position(|l| l.kind == LayerKind::LocallyConnected)
        .ok_or_else(|| {
            Error::Config("network has no locally-connected layers to widen".into())
        })?;
    for spec in cfg.layers.iter_mut() {
        if spec.kind == LayerKind::LocallyConnected {
            spec.channels_out *= multiplier;
        }
    }
    let f8 = cfg.f8_index();
    cfg.layers[f8].channels_out = num_classes;
    cfg.num_classes = num_classes;

    let mut net: Network<S> = build_network(&cfg, rng_seed)?;
    for layer in 0..first_lc {
        if base.config().layers[layer].kind == LayerKind::Conv {
            net.params_mut()[layer] = base.params()[layer].clone();
            net.freeze(layer);
        }
    }
    Ok(net)
}
