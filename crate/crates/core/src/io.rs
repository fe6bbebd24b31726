//! Binary artifact files. Every format shares one container layout: a 4-byte
//! magic, a little-endian u32 format version, a little-endian u64 header
//! length, a JSON header describing shapes and metadata, then a raw payload
//! of little-endian f32 values (or packed bits). Writes go through a
//! temporary file and rename, so a crash never leaves a half-written
//! artifact.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::HyperplaneModel;
use crate::data::atomic_write;
use crate::error::{Error, Result};
use crate::features::{BinaryEmbedding, Embedding};
use crate::nn::{LayerParams, Network, NetworkConfig};
use crate::scalar::l2_norm;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const MAGIC_NETWORK: &[u8; 4] = b"FIDC";
const MAGIC_EMBEDDINGS: &[u8; 4] = b"FIDE";
const MAGIC_BINARY: &[u8; 4] = b"FIDB";
const MAGIC_MODELS: &[u8; 4] = b"FIDH";

fn write_container(path: &Path, magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    atomic_write(path, &out)
}

fn read_container(path: &Path, magic: &[u8; 4], what: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(bad(format!("too short to be a {what} file")));
    }
    if &bytes[..4] != magic {
        return Err(bad(format!("not a {what} file (bad magic)")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported {what} format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(bad("truncated header".into()));
    }
    let header = bytes[16..16 + header_len].to_vec();
    let payload = bytes[16 + header_len..].to_vec();
    Ok((header, payload))
}

fn floats_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_floats(bytes: &[u8], expected: usize, what: &str, path: &Path) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{}: {what} payload holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkHeader {
    config: NetworkConfig,
    frozen: Vec<usize>,
    rng_seed: u64,
    /// Weight and bias shapes per layer; null for layers without parameters.
    layers: Vec<Option<(Vec<usize>, Vec<usize>)>>,
}

pub fn save_network(path: &Path, net: &Network<f32>) -> Result<()> {
    let layers: Vec<Option<(Vec<usize>, Vec<usize>)>> = net
        .params()
        .iter()
        .map(|p| p.as_ref().map(|p| (p.weights.shape().to_vec(), p.bias.shape().to_vec())))
        .collect();
    let header = NetworkHeader {
        config: net.config().clone(),
        frozen: net.frozen().iter().copied().collect(),
        rng_seed: net.rng_seed(),
        layers,
    };
    let mut values: Vec<f32> = Vec::new();
    for p in net.params().iter().flatten() {
        values.extend_from_slice(p.weights.data());
        values.extend_from_slice(p.bias.data());
    }
    write_container(
        path,
        MAGIC_NETWORK,
        &serde_json::to_vec(&header)?,
        &floats_to_bytes(&values),
    )
}

pub fn load_network(path: &Path) -> Result<Network<f32>> {
    let (header, payload) = read_container(path, MAGIC_NETWORK, "network checkpoint")?;
    let header: NetworkHeader = serde_json::from_slice(&header)?;
    let expected: usize = header
        .layers
        .iter()
        .flatten()
        .map(|(ws, bs)| ws.iter().product::<usize>() + bs.iter().product::<usize>())
        .sum();
    let values = bytes_to_floats(&payload, expected, "network checkpoint", path)?;

    let mut offset = 0usize;
    let mut params: Vec<Option<LayerParams<f32>>> = Vec::with_capacity(header.layers.len());
    for shapes in &header.layers {
        match shapes {
            None => params.push(None),
            Some((ws, bs)) => {
                let wn: usize = ws.iter().product();
                let bn: usize = bs.iter().product();
                let weights = Tensor::new(ws.clone(), values[offset..offset + wn].to_vec())?;
                let bias = Tensor::new(bs.clone(), values[offset + wn..offset + wn + bn].to_vec())?;
                offset += wn + bn;
                params.push(Some(LayerParams { weights, bias }));
            }
        }
    }
    let frozen: BTreeSet<usize> = header.frozen.into_iter().collect();
    Network::from_parts(header.config, params, frozen, header.rng_seed)
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    dim: usize,
    entries: Vec<EmbeddingEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingEntry {
    image_id: String,
    identity: String,
    raw_norm: f64,
}

pub fn save_embeddings(path: &Path, embeddings: &[Embedding<f32>]) -> Result<()> {
    let dim = embeddings.first().map(|e| e.dim()).unwrap_or(0);
    let mut values: Vec<f32> = Vec::with_capacity(embeddings.len() * dim);
    let mut entries = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::Shape(format!(
                "embedding {} has dim {}, expected {dim}",
                e.image_id,
                e.dim()
            )));
        }
        values.extend_from_slice(&e.vector);
        entries.push(EmbeddingEntry {
            image_id: e.image_id.clone(),
            identity: e.identity.clone(),
            raw_norm: e.raw_norm as f64,
        });
    }
    let header = EmbeddingHeader { dim, entries };
    write_container(
        path,
        MAGIC_EMBEDDINGS,
        &serde_json::to_vec(&header)?,
        &floats_to_bytes(&values),
    )
}

pub fn load_embeddings(path: &Path) -> Result<Vec<Embedding<f32>>> {
    let (header, payload) = read_container(path, MAGIC_EMBEDDINGS, "embedding")?;
    let header: EmbeddingHeader = serde_json::from_slice(&header)?;
    let values = bytes_to_floats(&payload, header.dim * header.entries.len(), "embedding", path)?;
    Ok(header
        .entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| Embedding {
            image_id: e.image_id,
            identity: e.identity,
            vector: values[i * header.dim..(i + 1) * header.dim].to_vec(),
            raw_norm: e.raw_norm as f32,
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryHeader {
    num_bits: usize,
    entries: Vec<BinaryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryEntry {
    image_id: String,
    identity: String,
}

pub fn save_binary_embeddings(path: &Path, embeddings: &[BinaryEmbedding]) -> Result<()> {
    let num_bits = embeddings.first().map(|e| e.num_bits).unwrap_or(0);
    let stride = num_bits.div_ceil(8);
    let mut payload = Vec::with_capacity(embeddings.len() * stride);
    let mut entries = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        if e.num_bits != num_bits || e.bits.len() != stride {
            return Err(Error::Shape(format!(
                "binary embedding {} has {} bits, expected {num_bits}",
                e.image_id, e.num_bits
            )));
        }
        payload.extend_from_slice(&e.bits);
        entries.push(BinaryEntry { image_id: e.image_id.clone(), identity: e.identity.clone() });
    }
    let header = BinaryHeader { num_bits, entries };
    write_container(path, MAGIC_BINARY, &serde_json::to_vec(&header)?, &payload)
}

pub fn load_binary_embeddings(path: &Path) -> Result<Vec<BinaryEmbedding>> {
    let (header, payload) = read_container(path, MAGIC_BINARY, "binary embedding")?;
    let header: BinaryHeader = serde_json::from_slice(&header)?;
    let stride = header.num_bits.div_ceil(8);
    if payload.len() != stride * header.entries.len() {
        return Err(Error::Format(format!(
            "{}: binary embedding payload holds {} bytes, expected {}",
            path.display(),
            payload.len(),
            stride * header.entries.len()
        )));
    }
    Ok(header
        .entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| BinaryEmbedding {
            image_id: e.image_id,
            identity: e.identity,
            bits: payload[i * stride..(i + 1) * stride].to_vec(),
            num_bits: header.num_bits,
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelBankHeader {
    dim: usize,
    num_models: usize,
    /// Mean L2 norm of the weight vectors, for a quick sanity read.
    mean_weight_norm: f64,
    identities: Vec<String>,
}

pub fn save_models(path: &Path, models: &[HyperplaneModel<f32>]) -> Result<()> {
    let dim = models.first().map(|m| m.weights.len()).unwrap_or(0);
    let mut values: Vec<f32> = Vec::with_capacity(models.len() * (dim + 1));
    let mut identities = Vec::with_capacity(models.len());
    let mut norm_sum = 0.0f64;
    for m in models {
        if m.weights.len() != dim {
            return Err(Error::Shape(format!(
                "model {} has dim {}, expected {dim}",
                m.identity,
                m.weights.len()
            )));
        }
        values.extend_from_slice(&m.weights);
        values.push(m.bias);
        identities.push(m.identity.clone());
        norm_sum += l2_norm(&m.weights) as f64;
    }
    let header = ModelBankHeader {
        dim,
        num_models: models.len(),
        mean_weight_norm: if models.is_empty() { 0.0 } else { norm_sum / models.len() as f64 },
        identities,
    };
    write_container(
        path,
        MAGIC_MODELS,
        &serde_json::to_vec(&header)?,
        &floats_to_bytes(&values),
    )
}

pub fn load_models(path: &Path) -> Result<Vec<HyperplaneModel<f32>>> {
    let (header, payload) = read_container(path, MAGIC_MODELS, "model bank")?;
    let header: ModelBankHeader = serde_json::from_slice(&header)?;
    if header.identities.len() != header.num_models {
        return Err(Error::Format(format!(
            "{}: model bank lists {} identities for {} models",
            path.display(),
            header.identities.len(),
            header.num_models
        )));
    }
    let per = header.dim + 1;
    let values = bytes_to_floats(&payload, per * header.num_models, "model bank", path)?;
    Ok(header
        .identities
        .into_iter()
        .enumerate()
        .map(|(i, identity)| HyperplaneModel {
            identity,
            weights: values[i * per..i * per + header.dim].to_vec(),
            bias: values[i * per + header.dim],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::binarize;
    use crate::nn::{build_network, forward, NetworkConfig};
    use crate::rng::{stream_rng, STREAM_IMAGE};
    use rand::Rng;

    fn small_net() -> Network<f32> {
        let cfg = NetworkConfig::desk_with_filters(4, 16, 5);
        let mut net: Network<f32> = build_network(&cfg, 7).unwrap();
        net.freeze(0);
        net
    }

    #[test]
    fn network_round_trips_bit_for_bit() {
        let net = small_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.fidc");
        save_network(&path, &net).unwrap();
        let back = load_network(&path).unwrap();

        assert_eq!(back.config(), net.config());
        assert_eq!(back.frozen(), net.frozen());
        assert_eq!(back.rng_seed(), net.rng_seed());
        for (a, b) in net.params().iter().zip(back.params()) {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.weights.data(), b.weights.data());
                    assert_eq!(a.bias.data(), b.bias.data());
                }
                _ => panic!("parameter presence differs"),
            }
        }

        // Same forward outputs on the same input.
        let mut rng = stream_rng(1, STREAM_IMAGE, 0);
        let input = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.random_range(0.0f32..1.0));
        let a = forward(&net, &input).unwrap();
        let b = forward(&back, &input).unwrap();
        assert_eq!(a.logits().data(), b.logits().data());

        // Saving again produces identical bytes.
        let bytes_before = fs::read(&path).unwrap();
        save_network(&path, &net).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes_before);
    }

    #[test]
    fn containers_reject_corruption() {
        let net = small_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.fidc");
        save_network(&path, &net).unwrap();

        // Wrong magic.
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.fidc");
        fs::write(&bad, &bytes).unwrap();
        assert!(load_network(&bad).is_err());

        // Wrong version.
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&bad, &bytes).unwrap();
        assert!(load_network(&bad).is_err());

        // Truncated payload.
        let bytes = fs::read(&path).unwrap();
        fs::write(&bad, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_network(&bad).is_err());

        // Wrong artifact kind.
        assert!(load_embeddings(&path).is_err());
    }

    fn sample_embeddings() -> Vec<Embedding<f32>> {
        let mut rng = stream_rng(3, STREAM_IMAGE, 1);
        (0..6)
            .map(|i| {
                let v: Vec<f32> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
                let norm = crate::scalar::l2_norm(&v);
                Embedding {
                    image_id: format!("id{:02}/img{}", i / 2, i % 2),
                    identity: format!("id{:02}", i / 2),
                    vector: v.iter().map(|x| x / norm).collect(),
                    raw_norm: norm,
                }
            })
            .collect()
    }

    #[test]
    fn embeddings_round_trip_bit_for_bit() {
        let embs = sample_embeddings();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.fide");
        save_embeddings(&path, &embs).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.len(), embs.len());
        for (a, b) in embs.iter().zip(&back) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.vector, b.vector);
            assert_eq!(a.raw_norm.to_bits(), b.raw_norm.to_bits());
        }
    }

    #[test]
    fn binary_embeddings_round_trip() {
        let bins: Vec<BinaryEmbedding> = sample_embeddings().iter().map(binarize).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.fidb");
        save_binary_embeddings(&path, &bins).unwrap();
        let back = load_binary_embeddings(&path).unwrap();
        assert_eq!(bins, back);
    }

    #[test]
    fn model_bank_round_trips_with_stats_header() {
        let models: Vec<HyperplaneModel<f32>> = (0..4)
            .map(|i| HyperplaneModel {
                identity: format!("id{i:02}"),
                weights: vec![i as f32, 1.0, -0.5],
                bias: 0.25 * i as f32,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fidh");
        save_models(&path, &models).unwrap();
        let back = load_models(&path).unwrap();
        assert_eq!(models.len(), back.len());
        for (a, b) in models.iter().zip(&back) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }

        // The header carries readable stats.
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert_eq!(header["num_models"], 4);
        assert_eq!(header["dim"], 3);
        assert!(header["mean_weight_norm"].as_f64().unwrap() > 0.0);
    }
}
