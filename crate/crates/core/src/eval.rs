//! Identification protocols over embeddings: pair verification with a learned
//! classifier on chi-square difference features, closed-set ranking against an
//! enrolled gallery, and open-set detection-and-identification at fixed false
//! accept rates.
//!
//! All percentages are computed as `count as f64 * 100.0 / total as f64`;
//! score ties resolve by ascending identity. Both conventions are part of the
//! contract so independent reimplementations can match results exactly.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Embedding;
use crate::rng::{stream_rng, STREAM_NEGATIVES, STREAM_PAIRS};
use crate::scalar::{s64, Scalar};
use crate::svm::{train_hinge, LinearModel, SvmConfig};

/// Elementwise chi-square distance features:
/// `(a_i - b_i)^2 / (a_i + b_i + 1e-12)`. Inputs are expected non-negative
/// (post-activation embeddings are).
pub fn chi2_vector<S: Scalar>(a: &[S], b: &[S]) -> Result<Vec<S>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "chi-square inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let eps = s64::<S>(1e-12);
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d / (x + y + eps)
        })
        .collect())
}

/// Image pairs for verification training or testing, indices into an
/// embedding slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub genuine: Vec<bool>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_genuine(&self) -> usize {
        self.genuine.iter().filter(|&&g| g).count()
    }
}

/// Deterministically sample verification pairs: up to `max_genuine`
/// same-identity pairs, plus `negative_ratio` times as many cross-identity
/// pairs (fewer only if the set is too small to supply them). `stream`
/// decorrelates draws sharing one seed, e.g. training vs test pairs.
pub fn sample_pairs<S: Scalar>(
    embeddings: &[Embedding<S>],
    max_genuine: usize,
    negative_ratio: usize,
    rng_seed: u64,
    stream: u64,
) -> Result<PairSet> {
    if max_genuine == 0 || negative_ratio == 0 {
        return Err(Error::Config("pair budget must be positive".into()));
    }
    let n = embeddings.len();
    let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in embeddings.iter().enumerate() {
        by_identity.entry(e.identity.as_str()).or_default().push(i);
    }
    let mut genuine_pool: Vec<(usize, usize)> = Vec::new();
    for members in by_identity.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                genuine_pool.push((i, j));
            }
        }
    }
    if genuine_pool.is_empty() {
        return Err(Error::Data("no same-identity pairs available".into()));
    }

    let mut rng = stream_rng(rng_seed, STREAM_PAIRS, stream);
    let genuine_pairs: Vec<(usize, usize)> = if genuine_pool.len() > max_genuine {
        crate::rng::sample_without_replacement(&mut rng, genuine_pool.len(), max_genuine)
            .into_iter()
            .map(|k| genuine_pool[k])
            .collect()
    } else {
        genuine_pool
    };

    let cross_total: usize = {
        let same: usize = by_identity.values().map(|m| m.len() * (m.len() - 1) / 2).sum();
        n * (n - 1) / 2 - same
    };
    let target = (negative_ratio * genuine_pairs.len()).min(cross_total);
    let mut neg_rng = stream_rng(rng_seed, STREAM_NEGATIVES, stream);
    let mut impostor_pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut attempts = 0usize;
    let budget = target.saturating_mul(200).max(1000);
    while impostor_pairs.len() < target && attempts < budget {
        attempts += 1;
        let i = neg_rng.random_range(0..n);
        let j = neg_rng.random_range(0..n);
        if i == j || embeddings[i].identity == embeddings[j].identity {
            continue;
        }
        impostor_pairs.insert((i.min(j), i.max(j)));
    }

    let mut pairs = genuine_pairs;
    let mut genuine = vec![true; pairs.len()];
    for p in impostor_pairs {
        pairs.push(p);
        genuine.push(false);
    }
    Ok(PairSet { pairs, genuine })
}

/// Train the pair verifier: a linear hinge classifier on chi-square features,
/// regularized with `lambda = 1 / num_pairs`.
pub fn train_verifier<S: Scalar>(
    embeddings: &[Embedding<S>],
    training: &PairSet,
    epochs: usize,
    learning_rate: f64,
) -> Result<LinearModel<S>> {
    if training.pairs.len() != training.genuine.len() {
        return Err(Error::Shape("pair/label length mismatch".into()));
    }
    if training.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let dim = embeddings
        .first()
        .map(|e| e.dim())
        .ok_or_else(|| Error::Data("no embeddings".into()))?;
    let mut features = Vec::with_capacity(training.len() * dim);
    for &(i, j) in &training.pairs {
        if i >= embeddings.len() || j >= embeddings.len() {
            return Err(Error::Invalid(format!("pair ({i}, {j}) out of range")));
        }
        features.extend_from_slice(&chi2_vector(
            &embeddings[i].vector,
            &embeddings[j].vector,
        )?);
    }
    let cfg = SvmConfig {
        lambda: 1.0 / training.len() as f64,
        epochs,
        learning_rate,
    };
    // Chi-square features grow with distance, so genuine pairs sit near zero:
    // train with flipped labels and negate, keeping "higher score = more
    // likely genuine" for every score in this module.
    let impostor_labels: Vec<bool> = training.genuine.iter().map(|&g| !g).collect();
    let flipped = train_hinge(&features, dim, &impostor_labels, &cfg)?;
    Ok(LinearModel {
        weights: flipped.weights.iter().map(|&w| -w).collect(),
        bias: -flipped.bias,
    })
}

/// Verifier score for one pair; higher means more likely the same identity.
pub fn pair_score<S: Scalar>(
    model: &LinearModel<S>,
    a: &Embedding<S>,
    b: &Embedding<S>,
) -> Result<S> {
    Ok(model.score(&chi2_vector(&a.vector, &b.vector)?))
}

/// One operating point of a score sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// Percent of genuine pairs at or above the threshold.
    pub tpr: f64,
    /// Percent of impostor pairs at or above the threshold.
    pub fpr: f64,
}

/// ROC curve by sweeping the decision threshold over every observed score,
/// from accept-all to reject-all.
pub fn roc_curve(genuine_scores: &[f64], impostor_scores: &[f64]) -> Result<Vec<RocPoint>> {
    if genuine_scores.is_empty() || impostor_scores.is_empty() {
        return Err(Error::Data("roc needs both genuine and impostor scores".into()));
    }
    let mut thresholds: Vec<f64> = genuine_scores
        .iter()
        .chain(impostor_scores)
        .copied()
        .collect();
    for &s in &thresholds {
        if !s.is_finite() {
            return Err(Error::Invalid("scores must be finite".into()));
        }
    }
    thresholds.push(f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let percent_at = |scores: &[f64], t: f64| -> f64 {
        let c = scores.iter().filter(|&&s| s >= t).count();
        c as f64 * 100.0 / scores.len() as f64
    };
    Ok(thresholds
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            tpr: percent_at(genuine_scores, t),
            fpr: percent_at(impostor_scores, t),
        })
        .collect())
}

/// Best achievable verification accuracy over all thresholds, with the
/// smallest threshold achieving it. Predicts "genuine" for scores at or above
/// the threshold; accuracy is in percent.
pub fn threshold_accuracy(
    genuine_scores: &[f64],
    impostor_scores: &[f64],
) -> Result<(f64, f64)> {
    if genuine_scores.is_empty() || impostor_scores.is_empty() {
        return Err(Error::Data("need both genuine and impostor scores".into()));
    }
    let total = (genuine_scores.len() + impostor_scores.len()) as f64;
    let mut candidates: Vec<f64> = genuine_scores
        .iter()
        .chain(impostor_scores)
        .copied()
        .collect();
    for &s in &candidates {
        if !s.is_finite() {
            return Err(Error::Invalid("scores must be finite".into()));
        }
    }
    candidates.push(f64::NEG_INFINITY);
    candidates.push(f64::INFINITY);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &t in &candidates {
        let tp = genuine_scores.iter().filter(|&&s| s >= t).count();
        let tn = impostor_scores.iter().filter(|&&s| s < t).count();
        let acc = (tp + tn) as f64 * 100.0 / total;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok((best.0, best.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub num_genuine: usize,
    pub num_impostor: usize,
    /// Percent correct at the best threshold on these scores.
    pub accuracy: f64,
    pub threshold: f64,
    pub roc: Vec<RocPoint>,
}

/// Score a labeled pair set with the verifier and summarize.
pub fn verification_report<S: Scalar>(
    model: &LinearModel<S>,
    embeddings: &[Embedding<S>],
    test: &PairSet,
) -> Result<VerificationReport> {
    if test.pairs.len() != test.genuine.len() {
        return Err(Error::Shape("pair/label length mismatch".into()));
    }
    let mut genuine_scores = Vec::new();
    let mut impostor_scores = Vec::new();
    for (&(i, j), &g) in test.pairs.iter().zip(&test.genuine) {
        if i >= embeddings.len() || j >= embeddings.len() {
            return Err(Error::Invalid(format!("pair ({i}, {j}) out of range")));
        }
        let s = pair_score(model, &embeddings[i], &embeddings[j])?.to_f64_exact();
        if g {
            genuine_scores.push(s);
        } else {
            impostor_scores.push(s);
        }
    }
    let (accuracy, threshold) = threshold_accuracy(&genuine_scores, &impostor_scores)?;
    Ok(VerificationReport {
        num_genuine: genuine_scores.len(),
        num_impostor: impostor_scores.len(),
        accuracy,
        threshold,
        roc: roc_curve(&genuine_scores, &impostor_scores)?,
    })
}

/// Split a labeled embedding set into one gallery template per identity (the
/// lexicographically first image id wins) and probe entries (everything else).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeGallerySplit {
    pub gallery: Vec<usize>,
    pub probes: Vec<usize>,
}

pub fn split_probe_gallery<S: Scalar>(embeddings: &[Embedding<S>]) -> Result<ProbeGallerySplit> {
    if embeddings.is_empty() {
        return Err(Error::Data("no embeddings to split".into()));
    }
    let mut best: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, e) in embeddings.iter().enumerate() {
        match best.entry(e.identity.as_str()) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(i);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                if embeddings[i].image_id < embeddings[*o.get()].image_id {
                    o.insert(i);
                }
            }
        }
    }
    let gallery: Vec<usize> = best.into_values().collect();
    let in_gallery: BTreeSet<usize> = gallery.iter().copied().collect();
    let probes: Vec<usize> = (0..embeddings.len())
        .filter(|i| !in_gallery.contains(i))
        .collect();
    Ok(ProbeGallerySplit { gallery, probes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedSetReport {
    pub num_gallery: usize,
    pub num_probes: usize,
    /// `rank_accuracy[k-1]` = percent of probes whose true identity ranks in
    /// the top `k`.
    pub rank_accuracy: Vec<f64>,
    /// 1-based rank of the true identity for each probe, in probe order.
    pub probe_ranks: Vec<usize>,
}

/// Rank gallery identities for each probe by cosine similarity. Every probe
/// identity must be enrolled; gallery identities must be unique. A tie with
/// the true identity's score counts against the probe if the tied identity
/// sorts first.
pub fn closed_set_eval<S: Scalar>(
    gallery: &[Embedding<S>],
    probes: &[Embedding<S>],
    max_rank: usize,
) -> Result<ClosedSetReport> {
    validate_gallery(gallery)?;
    if probes.is_empty() {
        return Err(Error::Data("no probes".into()));
    }
    let max_rank = max_rank.clamp(1, gallery.len());
    let mut probe_ranks = Vec::with_capacity(probes.len());
    for p in probes {
        let true_idx = gallery
            .iter()
            .position(|g| g.identity == p.identity)
            .ok_or_else(|| {
                Error::Data(format!("probe identity {} is not enrolled", p.identity))
            })?;
        let true_score = p.cosine(&gallery[true_idx]);
        let mut rank = 1usize;
        for (gi, g) in gallery.iter().enumerate() {
            if gi == true_idx {
                continue;
            }
            let s = p.cosine(g);
            if s > true_score || (s == true_score && g.identity < gallery[true_idx].identity) {
                rank += 1;
            }
        }
        probe_ranks.push(rank);
    }
    let rank_accuracy = (1..=max_rank)
        .map(|k| {
            let c = probe_ranks.iter().filter(|&&r| r <= k).count();
            c as f64 * 100.0 / probes.len() as f64
        })
        .collect();
    Ok(ClosedSetReport {
        num_gallery: gallery.len(),
        num_probes: probes.len(),
        rank_accuracy,
        probe_ranks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetReport {
    pub num_known_probes: usize,
    pub num_impostor_probes: usize,
    /// One row per requested false-accept rate.
    pub operating_points: Vec<OpenSetPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetPoint {
    /// Requested maximum false accept rate, as a fraction.
    pub far_target: f64,
    /// Chosen score threshold; accept when top-1 score >= threshold. May be
    /// infinite at the extremes (note: JSON renders those as null).
    pub threshold: f64,
    /// Achieved false accept rate at the threshold, as a fraction.
    pub far: f64,
    /// Detection-and-identification rate, percent of known probes accepted
    /// with the correct top-1 identity.
    pub dir: f64,
}

/// Open-set evaluation: probes of enrolled identities must be detected and
/// correctly identified; probes of unknown identities must be rejected. The
/// threshold for each target is the smallest candidate (impostor top-1 scores
/// plus both infinities) whose false accept rate stays at or under the
/// target, erring conservative.
pub fn open_set_eval<S: Scalar>(
    gallery: &[Embedding<S>],
    probes: &[Embedding<S>],
    far_targets: &[f64],
) -> Result<OpenSetReport> {
    validate_gallery(gallery)?;
    if far_targets.is_empty() {
        return Err(Error::Config("no far targets".into()));
    }
    for &f in far_targets {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("far target {f} outside [0, 1]")));
        }
    }

    // Top match for each probe: highest cosine, ties to the identity that
    // sorts first.
    let enrolled: BTreeSet<&str> = gallery.iter().map(|g| g.identity.as_str()).collect();
    let mut known: Vec<(f64, bool)> = Vec::new(); // (top1 score, top1 correct)
    let mut impostor_scores: Vec<f64> = Vec::new();
    for p in probes {
        let mut best_idx = 0usize;
        let mut best_score = p.cosine(&gallery[0]);
        for (gi, g) in gallery.iter().enumerate().skip(1) {
            let s = p.cosine(g);
            if s > best_score
                || (s == best_score && g.identity < gallery[best_idx].identity)
            {
                best_idx = gi;
                best_score = s;
            }
        }
        let score = best_score.to_f64_exact();
        if enrolled.contains(p.identity.as_str()) {
            known.push((score, gallery[best_idx].identity == p.identity));
        } else {
            impostor_scores.push(score);
        }
    }
    if known.is_empty() {
        return Err(Error::Data("no probes of enrolled identities".into()));
    }
    if impostor_scores.is_empty() {
        return Err(Error::Data("no impostor probes".into()));
    }

    let mut candidates: Vec<f64> = impostor_scores.clone();
    candidates.push(f64::NEG_INFINITY);
    candidates.push(f64::INFINITY);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let far_at = |t: f64| -> f64 {
        let c = impostor_scores.iter().filter(|&&s| s >= t).count();
        c as f64 / impostor_scores.len() as f64
    };
    let operating_points = far_targets
        .iter()
        .map(|&target| {
            let threshold = candidates
                .iter()
                .copied()
                .find(|&t| far_at(t) <= target)
                .expect("+inf always meets any target");
            let accepted_correct = known
                .iter()
                .filter(|&&(s, correct)| correct && s >= threshold)
                .count();
            OpenSetPoint {
                far_target: target,
                threshold,
                far: far_at(threshold),
                dir: accepted_correct as f64 * 100.0 / known.len() as f64,
            }
        })
        .collect();
    Ok(OpenSetReport {
        num_known_probes: known.len(),
        num_impostor_probes: impostor_scores.len(),
        operating_points,
    })
}

fn validate_gallery<S: Scalar>(gallery: &[Embedding<S>]) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    let mut seen = BTreeSet::new();
    for g in gallery {
        if !seen.insert(g.identity.as_str()) {
            return Err(Error::Data(format!(
                "identity {} enrolled more than once",
                g.identity
            )));
        }
    }
    Ok(())
}
