//! Independent oracles and experiment helpers shared by the acceptance suite.
//! Every oracle recomputes its answer from first principles (serial loops,
//! explicit sorts) so agreement with the library is meaningful.

use std::collections::BTreeMap;
use std::path::Path;

use faceid_core::bootstrap::HyperplaneModel;
use faceid_core::data::{FaceDataset, LabeledImage};
use faceid_core::features::{extract_embeddings, Embedding};
use faceid_core::nn::{
    backward, batch_loss, build_network, forward, train, Network, NetworkConfig, TrainConfig,
};
use faceid_core::rng::{stream_rng, STREAM_INIT};
use faceid_core::tensor::Tensor;
use faceid_core::{Embedding32, Network32};
use rand::Rng;
use sha2::{Digest, Sha256};

// --- gradient oracle ---

/// Max relative error between analytic gradients and central finite
/// differences, across every weight and bias entry of every layer.
pub fn fd_max_rel_error(cfg: &NetworkConfig, seed: u64) -> f64 {
    let mut net: Network<f64> = build_network(cfg, seed).unwrap();
    let (h, w, c) = cfg.input_dims;
    let batch = 3usize;
    let mut rng = stream_rng(seed, STREAM_INIT, 4242);
    // Fresh networks have all-zero biases, and rectified layers emit exact
    // zeros for dead units, so a unit whose whole receptive field is dead
    // sits precisely on the rectifier kink where finite differences and the
    // subgradient legitimately disagree. Jitter the biases to check at a
    // generic point instead.
    for layer in 0..cfg.layers.len() {
        if let Some(p) = net.params_mut()[layer].as_mut() {
            for v in p.bias.data_mut() {
                *v += rng.random::<f64>() * 0.2 - 0.1;
            }
        }
    }
    let images = Tensor::from_fn(&[batch, c, h, w], |_| rng.random::<f64>());
    let labels: Vec<usize> = (0..batch).map(|b| (b * 7 + 1) % cfg.num_classes).collect();

    let pass = forward(&net, &images).unwrap();
    let grads = backward(&net, &pass, &labels).unwrap();

    let step = 1e-6;
    let mut worst = 0.0f64;
    for layer in 0..cfg.layers.len() {
        let Some(g) = grads.layers[layer].clone() else { continue };
        for part in [0, 1] {
            let count = if part == 0 { g.weights.len() } else { g.bias.len() };
            fn tensor<'a>(net: &'a mut Network<f64>, layer: usize, part: usize) -> &'a mut Tensor<f64> {
                let p = net.params_mut()[layer].as_mut().unwrap();
                if part == 0 {
                    &mut p.weights
                } else {
                    &mut p.bias
                }
            }
            for idx in 0..count {
                let orig = tensor(&mut net, layer, part).data()[idx];
                tensor(&mut net, layer, part).data_mut()[idx] = orig + step;
                let up = batch_loss(&forward(&net, &images).unwrap(), &labels).unwrap();
                tensor(&mut net, layer, part).data_mut()[idx] = orig - step;
                let down = batch_loss(&forward(&net, &images).unwrap(), &labels).unwrap();
                tensor(&mut net, layer, part).data_mut()[idx] = orig;

                let fd = (up - down) / (2.0 * step);
                let an = if part == 0 { g.weights.data()[idx] } else { g.bias.data()[idx] };
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                }
            }
        }
    }
    worst
}

// --- similarity-search oracle ---

fn unit_f32(v: &[f32]) -> Vec<f32> {
    let mut total = 0.0f32;
    for &x in v {
        total += x * x;
    }
    let norm = total.sqrt();
    if norm > 0.0 {
        v.iter().map(|&x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Serial pairwise scan: normalize every weight vector, dot against the seed,
/// sort by similarity descending with ties broken by ascending identity,
/// truncate to `k`.
pub fn brute_force_topk(
    models: &[HyperplaneModel<f32>],
    seed: usize,
    k: usize,
) -> Vec<(usize, f32)> {
    let dirs: Vec<Vec<f32>> = models.iter().map(|m| unit_f32(&m.weights)).collect();
    let sd = &dirs[seed];
    let mut scored: Vec<(usize, f32)> = Vec::new();
    for (i, d) in dirs.iter().enumerate() {
        if i == seed {
            continue;
        }
        let mut s = 0.0f32;
        for (a, b) in d.iter().zip(sd) {
            s += a * b;
        }
        scored.push((i, s));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| models[a.0].identity.cmp(&models[b.0].identity))
    });
    scored.truncate(k);
    scored
}

// --- identification-metric oracles ---

fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Closed-set rank curve by full sort: for each probe, order the gallery by
/// (score descending, identity ascending) and read off the true identity's
/// 1-based position.
pub fn oracle_rank_curve(
    gallery: &[Embedding<f64>],
    probes: &[Embedding<f64>],
    max_rank: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut ranks = Vec::with_capacity(probes.len());
    for p in probes {
        let mut order: Vec<(f64, &str)> = gallery
            .iter()
            .map(|g| (dot_f64(&p.vector, &g.vector), g.identity.as_str()))
            .collect();
        order.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1))
        });
        let pos = order
            .iter()
            .position(|&(_, id)| id == p.identity)
            .expect("probe identity enrolled");
        ranks.push(pos + 1);
    }
    let curve = (1..=max_rank)
        .map(|k| {
            let c = ranks.iter().filter(|&&r| r <= k).count();
            c as f64 * 100.0 / probes.len() as f64
        })
        .collect();
    (curve, ranks)
}

/// Open-set operating points from scratch: top-1 match per probe (ties to the
/// lexicographically smaller identity), conservative threshold per target.
/// Returns `(far_target, threshold, far, dir)` rows.
pub fn oracle_open_points(
    gallery: &[Embedding<f64>],
    probes: &[Embedding<f64>],
    far_targets: &[f64],
) -> Vec<(f64, f64, f64, f64)> {
    let enrolled: std::collections::BTreeSet<&str> =
        gallery.iter().map(|g| g.identity.as_str()).collect();
    let mut known: Vec<(f64, bool)> = Vec::new();
    let mut impostors: Vec<f64> = Vec::new();
    for p in probes {
        let mut best = (dot_f64(&p.vector, &gallery[0].vector), gallery[0].identity.as_str());
        for g in &gallery[1..] {
            let s = dot_f64(&p.vector, &g.vector);
            if s > best.0 || (s == best.0 && g.identity.as_str() < best.1) {
                best = (s, g.identity.as_str());
            }
        }
        if enrolled.contains(p.identity.as_str()) {
            known.push((best.0, best.1 == p.identity));
        } else {
            impostors.push(best.0);
        }
    }

    let mut candidates = impostors.clone();
    candidates.push(f64::NEG_INFINITY);
    candidates.push(f64::INFINITY);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let far_at = |t: f64| -> f64 {
        impostors.iter().filter(|&&s| s >= t).count() as f64 / impostors.len() as f64
    };
    far_targets
        .iter()
        .map(|&target| {
            let threshold = candidates.iter().copied().find(|&t| far_at(t) <= target).unwrap();
            let dir = known.iter().filter(|&&(s, ok)| ok && s >= threshold).count() as f64
                * 100.0
                / known.len() as f64;
            (target, threshold, far_at(threshold), dir)
        })
        .collect()
}

/// Random unit-norm embedding in f64.
pub fn random_unit_embedding(
    rng: &mut impl Rng,
    dim: usize,
    image_id: &str,
    identity: &str,
) -> Embedding<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let norm = dot_f64(&v, &v).sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Embedding {
        image_id: image_id.to_string(),
        identity: identity.to_string(),
        vector: v,
        raw_norm: 1.0,
    }
}

// --- experiment helpers ---

/// Desk-shaped network config for the given input size.
pub fn desk_config(
    height: usize,
    width: usize,
    lc_filters: usize,
    bottleneck: usize,
    classes: usize,
) -> NetworkConfig {
    let mut cfg = NetworkConfig::desk_with_filters(lc_filters, bottleneck, classes);
    cfg.input_dims = (height, width, 1);
    cfg
}

/// Build and train a network on the dataset's own class map.
pub fn train_on(ds: &FaceDataset, cfg: &NetworkConfig, tc: &TrainConfig) -> Network32 {
    let map = ds.class_map();
    assert_eq!(map.len(), cfg.num_classes, "class map must match config");
    let (imgs, labels) = ds.to_tensors::<f32>(&map).unwrap();
    let mut net: Network32 = build_network(cfg, tc.rng_seed).unwrap();
    train(&mut net, &imgs, &labels, tc).unwrap();
    net
}

/// Continue training an existing network on a dataset.
pub fn train_more(net: &mut Network32, ds: &FaceDataset, tc: &TrainConfig) {
    let map = ds.class_map();
    let (imgs, labels) = ds.to_tensors::<f32>(&map).unwrap();
    train(net, &imgs, &labels, tc).unwrap();
}

pub fn embed(net: &Network32, ds: &FaceDataset) -> Vec<Embedding32> {
    let imgs: Tensor<f32> = ds.images_tensor().unwrap();
    extract_embeddings(net, &imgs, &ds.id_pairs()).unwrap()
}

/// Rank-1 accuracy with a gallery of the lexicographically first image per
/// identity drawn from `gallery_source`, probing with every `probes` entry.
pub fn transfer_rank1(gallery_source: &[Embedding32], probes: &[Embedding32]) -> f64 {
    let split = faceid_core::eval::split_probe_gallery(gallery_source).unwrap();
    let gallery: Vec<Embedding32> =
        split.gallery.iter().map(|&i| gallery_source[i].clone()).collect();
    faceid_core::eval::closed_set_eval(&gallery, probes, 1)
        .unwrap()
        .rank_accuracy[0]
}

/// Split every identity's images into the first `keep_first` (by arrival
/// order) and the remainder.
pub fn partition_per_identity(ds: &FaceDataset, keep_first: usize) -> (FaceDataset, FaceDataset) {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut head = Vec::new();
    let mut tail = Vec::new();
    for l in &ds.images {
        let slot = seen.entry(l.identity.as_str()).or_insert(0);
        if *slot < keep_first {
            head.push(l.clone());
        } else {
            tail.push(l.clone());
        }
        *slot += 1;
    }
    (FaceDataset { images: head }, FaceDataset { images: tail })
}

/// Turn each original identity into a cluster of `members` pseudo-identities
/// by dealing its images round-robin. Images of one cluster share a latent
/// pattern and differ only in nuisances, so the pseudo-identities are nearly
/// unseparable within the cluster and easily separated across clusters.
pub fn relabel_into_clusters(ds: &FaceDataset, members: usize) -> FaceDataset {
    let mut counter: BTreeMap<&str, usize> = BTreeMap::new();
    let images = ds
        .images
        .iter()
        .map(|l| {
            let slot = counter.entry(l.identity.as_str()).or_insert(0);
            let member = *slot % members;
            let index = *slot / members;
            *slot += 1;
            let identity = format!("{}m{member}", l.identity);
            LabeledImage {
                image_id: format!("{identity}/img{index:03}"),
                identity,
                image: l.image.clone(),
            }
        })
        .collect();
    FaceDataset { images }
}

/// Relative path -> content digest for every file under `root`.
pub fn tree_digests(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                let digest = format!("{:x}", Sha256::digest(&bytes));
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, digest);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
