//! Semantic bootstrapping: represent each identity by the hyperplane that
//! separates its embeddings from everyone else's, measure identity confusability
//! as cosine similarity between hyperplanes, and assemble a harder training
//! set from random seed identities plus their nearest neighbors in model space.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Embedding;
use crate::rng::{sample_without_replacement, stream_rng, STREAM_CONTROL, STREAM_SEEDS};
use crate::scalar::{dot, l2_norm, Scalar};
use crate::svm::{train_hinge, SvmConfig};
use crate::IdentityId;

/// Pool rows per block in the similarity scan.
const SEARCH_BLOCK: usize = 256;

/// One-vs-rest separating hyperplane for a single identity.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperplaneModel<S> {
    pub identity: IdentityId,
    pub weights: Vec<S>,
    pub bias: S,
}

/// Which coordinates enter the model-space cosine. The bias says where the
/// boundary sits, not which direction separates, so it is excluded by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    #[default]
    WeightsOnly,
    WeightsWithBias,
}

/// Solver settings for hyperplane training. The regularization strength is
/// not configurable: it is fixed at `1 / num_embeddings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperplaneTraining {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for HyperplaneTraining {
    fn default() -> Self {
        HyperplaneTraining { epochs: 200, learning_rate: 1.0 }
    }
}

/// Train one hyperplane per identity (in sorted identity order) on the
/// normalized embedding vectors.
pub fn train_hyperplanes<S: Scalar>(
    embeddings: &[Embedding<S>],
    solver: &HyperplaneTraining,
) -> Result<Vec<HyperplaneModel<S>>> {
    if embeddings.is_empty() {
        return Err(Error::Data("no embeddings to train on".into()));
    }
    let dim = embeddings[0].dim();
    if embeddings.iter().any(|e| e.dim() != dim) {
        return Err(Error::Shape("embeddings have mixed dimensions".into()));
    }
    let identities: BTreeSet<&IdentityId> = embeddings.iter().map(|e| &e.identity).collect();
    if identities.len() < 2 {
        return Err(Error::Data(
            "one-vs-rest hyperplanes need at least two identities".into(),
        ));
    }

    let n = embeddings.len();
    let mut features = Vec::with_capacity(n * dim);
    for e in embeddings {
        features.extend_from_slice(&e.vector);
    }
    let cfg = SvmConfig {
        lambda: 1.0 / n as f64,
        epochs: solver.epochs,
        learning_rate: solver.learning_rate,
    };

    let identities: Vec<&IdentityId> = identities.into_iter().collect();
    identities
        .par_iter()
        .map(|&id| {
            let positive: Vec<bool> = embeddings.iter().map(|e| &e.identity == id).collect();
            let model = train_hinge(&features, dim, &positive, &cfg)
                .map_err(|e| Error::Data(format!("hyperplane for {id}: {e}")))?;
            Ok(HyperplaneModel {
                identity: id.clone(),
                weights: model.weights,
                bias: model.bias,
            })
        })
        .collect()
}

fn direction<S: Scalar>(model: &HyperplaneModel<S>, space: SimilaritySpace) -> Vec<S> {
    let mut v = model.weights.clone();
    if space == SimilaritySpace::WeightsWithBias {
        v.push(model.bias);
    }
    let norm = l2_norm(&v);
    if norm > S::zero() {
        for x in &mut v {
            *x = *x / norm;
        }
    } else {
        v.fill(S::zero());
    }
    v
}

/// Cosine similarity between two identity models, computed as the dot product
/// of the unit-normalized direction vectors (zero direction gives zero).
pub fn model_similarity<S: Scalar>(
    a: &HyperplaneModel<S>,
    b: &HyperplaneModel<S>,
    space: SimilaritySpace,
) -> Result<S> {
    if a.weights.len() != b.weights.len() {
        return Err(Error::Shape(format!(
            "weight dimensions differ: {} vs {}",
            a.weights.len(),
            b.weights.len()
        )));
    }
    Ok(dot(&direction(a, space), &direction(b, space)))
}

/// Exact top-`k` most similar models to `models[seed]`, excluding the seed
/// itself. The pool is scanned in fixed-size row blocks (the vector dimension
/// is never split), every pair gets the same normalize-then-dot cosine as
/// [`model_similarity`], and the full ranking is resolved before truncation,
/// so the result is identical to a serial pairwise scan. Ties break by
/// ascending identity.
pub fn nearest_models<S: Scalar>(
    models: &[HyperplaneModel<S>],
    seed: usize,
    k: usize,
    space: SimilaritySpace,
) -> Result<Vec<(usize, S)>> {
    let n = models.len();
    if seed >= n {
        return Err(Error::Invalid(format!("seed index {seed} out of range for {n} models")));
    }
    if k > n - 1 {
        return Err(Error::Invalid(format!(
            "asked for {k} neighbors from a pool of {n} (seed excluded)"
        )));
    }
    let dim = models[0].weights.len();
    if models.iter().any(|m| m.weights.len() != dim) {
        return Err(Error::Shape("models have mixed weight dimensions".into()));
    }

    let dirs: Vec<Vec<S>> = models.par_iter().map(|m| direction(m, space)).collect();
    let seed_dir = &dirs[seed];
    let mut sims = vec![S::zero(); n];
    sims.par_chunks_mut(SEARCH_BLOCK)
        .enumerate()
        .for_each(|(block, chunk)| {
            for (j, out) in chunk.iter_mut().enumerate() {
                *out = dot(&dirs[block * SEARCH_BLOCK + j], seed_dir);
            }
        });

    let mut order: Vec<usize> = (0..n).filter(|&i| i != seed).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .expect("similarities are finite")
            .then_with(|| models[a].identity.cmp(&models[b].identity))
    });
    order.truncate(k);
    Ok(order.into_iter().map(|i| (i, sims[i])).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapPlan {
    pub num_seeds: usize,
    pub neighbors_per_seed: usize,
    pub rng_seed: u64,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        BootstrapPlan { num_seeds: 10, neighbors_per_seed: 50, rng_seed: 1 }
    }
}

impl BootstrapPlan {
    /// The scale used with production-sized identity pools.
    pub fn production_scale(rng_seed: u64) -> Self {
        BootstrapPlan { num_seeds: 100, neighbors_per_seed: 1000, rng_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedNeighborhood {
    pub seed: IdentityId,
    /// Neighbor identities with model-space similarity, best first.
    pub neighbors: Vec<(IdentityId, f64)>,
}

/// The assembled harder training set: seed identities plus their model-space
/// neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrappedDataset {
    /// Union of seeds and neighbors, sorted and deduplicated.
    pub identities: Vec<IdentityId>,
    /// Seeds in draw order.
    pub seeds: Vec<IdentityId>,
    pub neighborhoods: Vec<SeedNeighborhood>,
    /// Digest of the model pool, the plan, and the similarity space.
    pub provenance: String,
}

/// Draw `plan.num_seeds` seed identities without replacement, take the
/// `plan.neighbors_per_seed` nearest models of each, and union everything
/// into one identity set.
pub fn build_bootstrap<S: Scalar>(
    models: &[HyperplaneModel<S>],
    plan: &BootstrapPlan,
    space: SimilaritySpace,
) -> Result<BootstrappedDataset> {
    let n = models.len();
    if n < 2 {
        return Err(Error::Data("need at least two identity models".into()));
    }
    if plan.num_seeds == 0 || plan.num_seeds > n {
        return Err(Error::Config(format!(
            "num_seeds {} out of range for {n} models",
            plan.num_seeds
        )));
    }
    if plan.neighbors_per_seed == 0 || plan.neighbors_per_seed > n - 1 {
        return Err(Error::Config(format!(
            "neighbors_per_seed {} out of range for {n} models",
            plan.neighbors_per_seed
        )));
    }

    let mut rng = stream_rng(plan.rng_seed, STREAM_SEEDS, 0);
    let seed_indices = sample_without_replacement(&mut rng, n, plan.num_seeds);

    let mut identities = BTreeSet::new();
    let mut seeds = Vec::with_capacity(plan.num_seeds);
    let mut neighborhoods = Vec::with_capacity(plan.num_seeds);
    for &si in &seed_indices {
        let found = nearest_models(models, si, plan.neighbors_per_seed, space)?;
        identities.insert(models[si].identity.clone());
        seeds.push(models[si].identity.clone());
        let neighbors: Vec<(IdentityId, f64)> = found
            .into_iter()
            .map(|(idx, sim)| {
                identities.insert(models[idx].identity.clone());
                (models[idx].identity.clone(), sim.to_f64_exact())
            })
            .collect();
        neighborhoods.push(SeedNeighborhood { seed: models[si].identity.clone(), neighbors });
    }

    Ok(BootstrappedDataset {
        identities: identities.into_iter().collect(),
        seeds,
        neighborhoods,
        provenance: pool_digest(models, plan, space),
    })
}

fn pool_digest<S: Scalar>(
    models: &[HyperplaneModel<S>],
    plan: &BootstrapPlan,
    space: SimilaritySpace,
) -> String {
    let mut h = Sha256::new();
    for m in models {
        h.update((m.identity.len() as u64).to_le_bytes());
        h.update(m.identity.as_bytes());
        h.update(m.bias.to_f64_exact().to_le_bytes());
        for w in &m.weights {
            h.update(w.to_f64_exact().to_le_bytes());
        }
    }
    h.update(serde_json::to_vec(plan).expect("plan serializes"));
    h.update(serde_json::to_vec(&space).expect("space serializes"));
    format!("{:x}", h.finalize())
}

/// A size-matched random identity set, for comparing against a bootstrapped
/// one. Drawn from the sorted identity list of the pool.
pub fn sample_control<S: Scalar>(
    models: &[HyperplaneModel<S>],
    size: usize,
    rng_seed: u64,
) -> Result<Vec<IdentityId>> {
    let pool: Vec<&IdentityId> = {
        let set: BTreeSet<&IdentityId> = models.iter().map(|m| &m.identity).collect();
        set.into_iter().collect()
    };
    if size == 0 || size > pool.len() {
        return Err(Error::Config(format!(
            "control size {size} out of range for {} identities",
            pool.len()
        )));
    }
    let mut rng = stream_rng(rng_seed, STREAM_CONTROL, 0);
    let mut picked: Vec<IdentityId> = sample_without_replacement(&mut rng, pool.len(), size)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    picked.sort();
    Ok(picked)
}

/// How confusable a chosen identity set is, relative to the whole pool: mean
/// pairwise model similarity within the set versus across all pool pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessReport {
    pub set_size: usize,
    pub set_mean_similarity: f64,
    pub pool_mean_similarity: f64,
}

pub fn hardness_report<S: Scalar>(
    models: &[HyperplaneModel<S>],
    chosen: &[IdentityId],
    space: SimilaritySpace,
) -> Result<HardnessReport> {
    let chosen_set: BTreeSet<&IdentityId> = chosen.iter().collect();
    let member_indices: Vec<usize> = models
        .iter()
        .enumerate()
        .filter(|(_, m)| chosen_set.contains(&m.identity))
        .map(|(i, _)| i)
        .collect();
    if member_indices.len() < 2 {
        return Err(Error::Data(format!(
            "chosen set matches only {} models",
            member_indices.len()
        )));
    }

    let dirs: Vec<Vec<S>> = models.par_iter().map(|m| direction(m, space)).collect();
    let mean_over = |indices: &[usize]| -> f64 {
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                total += dot(&dirs[i], &dirs[j]).to_f64_exact();
                pairs += 1;
            }
        }
        total / pairs as f64
    };

    let all: Vec<usize> = (0..models.len()).collect();
    Ok(HardnessReport {
        set_size: member_indices.len(),
        set_mean_similarity: mean_over(&member_indices),
        pool_mean_similarity: mean_over(&all),
    })
}
