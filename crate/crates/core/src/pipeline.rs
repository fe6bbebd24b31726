//! End-to-end run: synthesize data, train the baseline network, retrain a
//! compressed bottleneck, extract embeddings, train per-identity
//! hyperplanes, assemble a bootstrapped hard set, train an expanded network
//! on it, evaluate every representation variant, and run representation
//! diagnostics.
//!
//! Each stage writes its artifacts under the output directory and records a
//! digest in `run_manifest.json`. The digest chains the previous stage's
//! digest with the stage's effective configuration, so a rerun with an
//! unchanged prefix skips those stages and picks up exactly where the
//! configuration diverges. All outputs are deterministic: rerunning a
//! finished pipeline rewrites byte-identical artifacts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bootstrap::{
    build_bootstrap, hardness_report, sample_control, train_hyperplanes, BootstrapPlan,
    BootstrappedDataset, HyperplaneTraining, SimilaritySpace,
};
use crate::data::{
    atomic_write, generate_splits, load_dataset, occlude_dataset, save_dataset, SplitConfig,
    SynthConfig,
};
use crate::diagnostics::{lc_activation_map, norm_entropy_study, taylor_error_curve};
use crate::error::{Error, Result};
use crate::eval::{
    closed_set_eval, open_set_eval, sample_pairs, split_probe_gallery, threshold_accuracy,
    train_verifier, verification_report, ClosedSetReport, OpenSetReport, VerificationReport,
};
use crate::features::{
    binarize, expand_network, extract_embeddings, fuse, hamming_similarity, Embedding,
};
use crate::features::compress_retrain;
use crate::io::{
    load_embeddings, load_models, load_network, save_binary_embeddings, save_embeddings,
    save_models, save_network,
};
use crate::nn::{build_network, train, Network, NetworkConfig, TrainConfig};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed. Stages derive their own seeds from it at fixed offsets,
    /// so one number reproduces the whole run.
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    /// Baseline representation width.
    pub bottleneck: usize,
    /// Representation width of the compression retrain.
    pub compressed_bottleneck: usize,
    /// Channel count of the locally-connected stack.
    pub lc_filters: usize,
    /// Channel multiplier applied when expanding the network.
    pub expansion_multiplier: usize,
    /// SGD settings shared by the baseline, compression, and expansion
    /// trainings (each gets its own derived seed).
    pub train: TrainConfig,
    pub hyperplanes: HyperplaneTraining,
    pub similarity: SimilaritySpace,
    /// Seed count and neighborhood size for the bootstrapped set; both are
    /// clamped to the available model pool.
    pub plan: BootstrapPlan,
    /// Solver settings for the pair verifier.
    pub verifier: HyperplaneTraining,
    pub pairs_max_genuine: usize,
    pub pairs_negative_ratio: usize,
    pub max_rank: usize,
    pub far_targets: Vec<f64>,
    /// Occlusion level for the norm/entropy diagnostic.
    pub occlusion_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            bottleneck: 64,
            compressed_bottleneck: 32,
            lc_filters: 16,
            expansion_multiplier: 2,
            train: TrainConfig::default(),
            hyperplanes: HyperplaneTraining::default(),
            similarity: SimilaritySpace::default(),
            plan: BootstrapPlan { num_seeds: 5, neighbors_per_seed: 10, rng_seed: 1 },
            verifier: HyperplaneTraining::default(),
            pairs_max_genuine: 500,
            pairs_negative_ratio: 10,
            max_rank: 10,
            far_targets: vec![0.01, 0.1, 1.0],
            occlusion_fraction: 0.25,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.bottleneck == 0 || self.compressed_bottleneck == 0 {
            return Err(Error::Config("bottleneck widths must be positive".into()));
        }
        if self.lc_filters == 0 || self.expansion_multiplier == 0 {
            return Err(Error::Config(
                "filter count and expansion multiplier must be positive".into(),
            ));
        }
        if self.pairs_max_genuine == 0 || self.pairs_negative_ratio == 0 {
            return Err(Error::Config("pair budgets must be positive".into()));
        }
        if self.max_rank == 0 {
            return Err(Error::Config("max_rank must be positive".into()));
        }
        if self.far_targets.is_empty() {
            return Err(Error::Config("need at least one far target".into()));
        }
        for &f in &self.far_targets {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("far target {f} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(Error::Config("occlusion_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    // One derived seed per stage that draws randomness.
    pub fn synth_seed(&self) -> u64 {
        self.seed
    }
    pub fn baseline_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
    pub fn compress_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
    pub fn hyperplane_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }
    pub fn plan_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }
    pub fn expand_seed(&self) -> u64 {
        self.seed.wrapping_add(5)
    }
    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(6)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub digest: String,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageStatus {
    pub name: String,
    pub skipped: bool,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub stages: Vec<StageStatus>,
    pub summary: Value,
}

/// Per-variant evaluation results, written to `eval/<variant>/summary.json`.
/// Open-set thresholds may be infinite, which JSON renders as null, so read
/// these files as loose JSON when round-tripping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub verification: VerificationReport,
    pub closed_eval: ClosedSetReport,
    pub closed_target: ClosedSetReport,
    pub open_eval: OpenSetReport,
    pub open_target: OpenSetReport,
    pub binarization: BinarizationSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinarizationSummary {
    /// Pair accuracy thresholding raw cosine scores, percent.
    pub cosine_accuracy: f64,
    /// Pair accuracy thresholding sign-bit agreement, percent.
    pub hamming_accuracy: f64,
}

struct Runner {
    out: PathBuf,
    old: Vec<StageRecord>,
    done: Vec<StageRecord>,
    prev_digest: String,
    statuses: Vec<StageStatus>,
}

impl Runner {
    fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let manifest_path = out.join(MANIFEST_FILE);
        let old = if manifest_path.exists() {
            serde_json::from_slice::<RunManifest>(&fs::read(&manifest_path)?)
                .map(|m| m.stages)
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        Ok(Self {
            out: out.to_path_buf(),
            old,
            done: Vec::new(),
            prev_digest: String::new(),
            statuses: Vec::new(),
        })
    }

    fn digest(&self, name: &str, stage_cfg: &Value) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.prev_digest.as_bytes());
        h.update(name.as_bytes());
        h.update(serde_json::to_string(stage_cfg)?.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }

    fn artifacts_present(&self, artifacts: &[String]) -> bool {
        artifacts.iter().all(|a| self.out.join(a).exists())
    }

    /// Whether the stage about to run can be skipped: same stage at the same
    /// position in the previous run, same digest, artifacts still on disk.
    fn can_skip(&self, name: &str, digest: &str, artifacts: &[String]) -> bool {
        self.old
            .get(self.done.len())
            .is_some_and(|r| r.name == name && r.digest == digest)
            && self.artifacts_present(artifacts)
    }

    fn commit(
        &mut self,
        name: &str,
        digest: String,
        artifacts: Vec<String>,
        skipped: bool,
    ) -> Result<()> {
        if !self.artifacts_present(&artifacts) {
            let missing: Vec<&String> = artifacts
                .iter()
                .filter(|a| !self.out.join(a.as_str()).exists())
                .collect();
            return Err(Error::Invalid(format!(
                "stage {name} finished without writing {missing:?}"
            )));
        }
        self.done.push(StageRecord { name: name.into(), digest: digest.clone(), artifacts });
        self.prev_digest = digest;
        self.statuses.push(StageStatus { name: name.into(), skipped });
        let manifest = RunManifest { stages: self.done.clone() };
        atomic_write(
            &self.out.join(MANIFEST_FILE),
            &serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    atomic_write(path, &serde_json::to_vec_pretty(value)?)
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn staged<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Enrolled-half open-set protocol: the first (sorted) half of the
/// identities enroll one gallery image each; everything else probes, so
/// unenrolled identities act as impostors.
fn open_split(embs: &[Embedding<f32>]) -> Result<(Vec<Embedding<f32>>, BTreeSet<String>)> {
    let ids: Vec<&str> = {
        let set: BTreeSet<&str> = embs.iter().map(|e| e.identity.as_str()).collect();
        set.into_iter().collect()
    };
    if ids.len() < 2 {
        return Err(Error::Data(
            "open-set evaluation needs at least two identities".into(),
        ));
    }
    let enroll = ids.len().div_ceil(2).min(ids.len() - 1);
    let enrolled: BTreeSet<&str> = ids[..enroll].iter().copied().collect();
    let subset: Vec<Embedding<f32>> = embs
        .iter()
        .filter(|e| enrolled.contains(e.identity.as_str()))
        .cloned()
        .collect();
    let split = split_probe_gallery(&subset)?;
    let gallery: Vec<Embedding<f32>> =
        split.gallery.iter().map(|&i| subset[i].clone()).collect();
    let gallery_images: BTreeSet<String> =
        gallery.iter().map(|e| e.image_id.clone()).collect();
    Ok((gallery, gallery_images))
}

fn evaluate_variant(
    cfg: &PipelineConfig,
    train_e: &[Embedding<f32>],
    eval_e: &[Embedding<f32>],
    target_e: &[Embedding<f32>],
) -> Result<VariantSummary> {
    let train_pairs = sample_pairs(
        train_e,
        cfg.pairs_max_genuine,
        cfg.pairs_negative_ratio,
        cfg.eval_seed(),
        0,
    )?;
    let verifier = train_verifier(
        train_e,
        &train_pairs,
        cfg.verifier.epochs,
        cfg.verifier.learning_rate,
    )?;
    let eval_pairs = sample_pairs(
        eval_e,
        cfg.pairs_max_genuine,
        cfg.pairs_negative_ratio,
        cfg.eval_seed(),
        1,
    )?;
    let verification = verification_report(&verifier, eval_e, &eval_pairs)?;

    // Closed set: every identity enrolls its first image; probe the rest,
    // and probe the full shifted-condition set against the same gallery.
    let split = split_probe_gallery(eval_e)?;
    let gallery: Vec<Embedding<f32>> =
        split.gallery.iter().map(|&i| eval_e[i].clone()).collect();
    let probes: Vec<Embedding<f32>> =
        split.probes.iter().map(|&i| eval_e[i].clone()).collect();
    let closed_eval = closed_set_eval(&gallery, &probes, cfg.max_rank)?;
    let closed_target = closed_set_eval(&gallery, target_e, cfg.max_rank)?;

    // Open set: only half the identities enroll.
    let (open_gallery, gallery_images) = open_split(eval_e)?;
    let open_probes: Vec<Embedding<f32>> = eval_e
        .iter()
        .filter(|e| !gallery_images.contains(&e.image_id))
        .cloned()
        .collect();
    let open_eval = open_set_eval(&open_gallery, &open_probes, &cfg.far_targets)?;
    let open_target = open_set_eval(&open_gallery, target_e, &cfg.far_targets)?;

    // Binarization cost on the same evaluation pairs: full-precision cosine
    // vs packed sign bits.
    let bins: Vec<_> = eval_e.iter().map(binarize).collect();
    let mut cos = (Vec::new(), Vec::new());
    let mut ham = (Vec::new(), Vec::new());
    for (&(i, j), &g) in eval_pairs.pairs.iter().zip(&eval_pairs.genuine) {
        let c = eval_e[i].cosine(&eval_e[j]) as f64;
        let h = hamming_similarity(&bins[i], &bins[j])?;
        let (cs, hs) = if g { (&mut cos.0, &mut ham.0) } else { (&mut cos.1, &mut ham.1) };
        cs.push(c);
        hs.push(h);
    }
    let binarization = BinarizationSummary {
        cosine_accuracy: threshold_accuracy(&cos.0, &cos.1)?.0,
        hamming_accuracy: threshold_accuracy(&ham.0, &ham.1)?.0,
    };

    Ok(VariantSummary {
        verification,
        closed_eval,
        closed_target,
        open_eval,
        open_target,
        binarization,
    })
}

const VARIANTS: [&str; 4] = ["baseline", "compressed", "expanded", "fusion"];

pub fn run_pipeline(
    cfg: &PipelineConfig,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let mut runner = Runner::new(out)?;

    let mut stage = |runner: &mut Runner,
                     name: &str,
                     stage_cfg: Value,
                     artifacts: Vec<String>,
                     work: &mut dyn FnMut() -> Result<()>|
     -> Result<()> {
        let digest = runner.digest(name, &stage_cfg)?;
        let skipped = runner.can_skip(name, &digest, &artifacts);
        if skipped {
            progress(&format!("{name}: up to date, skipping"));
        } else {
            progress(&format!("{name}: running"));
            staged(name, work())?;
        }
        runner.commit(name, digest, artifacts, skipped)
    };

    // --- synth ---
    let mut synth_cfg = cfg.synth.clone();
    synth_cfg.rng_seed = cfg.synth_seed();
    stage(
        &mut runner,
        "synth",
        json!({ "synth": synth_cfg, "split": cfg.split }),
        ["train", "eval", "target"]
            .iter()
            .map(|s| format!("dataset/{s}/manifest.json"))
            .collect(),
        &mut || {
            let splits = generate_splits(&synth_cfg, &cfg.split)?;
            save_dataset(&out.join("dataset/train"), &splits.train)?;
            save_dataset(&out.join("dataset/eval"), &splits.eval)?;
            save_dataset(&out.join("dataset/target"), &splits.target)?;
            Ok(())
        },
    )?;
    let train_ds = load_dataset(&out.join("dataset/train"))?;
    let eval_ds = load_dataset(&out.join("dataset/eval"))?;
    let target_ds = load_dataset(&out.join("dataset/target"))?;
    let class_map = train_ds.class_map();
    let num_classes = class_map.len();
    let (train_imgs, train_labels) = train_ds.to_tensors::<f32>(&class_map)?;
    let eval_imgs: Tensor<f32> = eval_ds.images_tensor()?;
    let target_imgs: Tensor<f32> = target_ds.images_tensor()?;

    // --- baseline ---
    let mut network_cfg =
        NetworkConfig::desk_with_filters(cfg.lc_filters, cfg.bottleneck, num_classes);
    network_cfg.input_dims = (cfg.synth.height, cfg.synth.width, 1);
    let mut baseline_tc = cfg.train.clone();
    baseline_tc.rng_seed = cfg.baseline_seed();
    stage(
        &mut runner,
        "baseline",
        json!({ "network": network_cfg, "train": baseline_tc }),
        vec!["checkpoints/baseline.fidc".into(), "checkpoints/baseline_log.json".into()],
        &mut || {
            network_cfg.validate()?;
            let mut net: Network<f32> = build_network(&network_cfg, baseline_tc.rng_seed)?;
            let log = train(&mut net, &train_imgs, &train_labels, &baseline_tc)?;
            save_network(&out.join("checkpoints/baseline.fidc"), &net)?;
            write_json(
                &out.join("checkpoints/baseline_log.json"),
                &serde_json::to_value(&log)?,
            )
        },
    )?;
    let baseline = load_network(&out.join("checkpoints/baseline.fidc"))?;

    // --- compress ---
    let mut compress_tc = cfg.train.clone();
    compress_tc.rng_seed = cfg.compress_seed();
    stage(
        &mut runner,
        "compress",
        json!({ "bottleneck": cfg.compressed_bottleneck, "train": compress_tc }),
        vec!["checkpoints/compressed.fidc".into(), "checkpoints/compressed_log.json".into()],
        &mut || {
            let (net, log) = compress_retrain(
                &baseline,
                &train_imgs,
                &train_labels,
                cfg.compressed_bottleneck,
                &compress_tc,
            )?;
            save_network(&out.join("checkpoints/compressed.fidc"), &net)?;
            write_json(
                &out.join("checkpoints/compressed_log.json"),
                &serde_json::to_value(&log)?,
            )
        },
    )?;
    let compressed = load_network(&out.join("checkpoints/compressed.fidc"))?;

    // --- embed ---
    let embed_paths: Vec<String> = ["baseline", "compressed"]
        .iter()
        .flat_map(|v| {
            ["train", "eval", "target"]
                .iter()
                .map(move |s| format!("embeddings/{v}_{s}.fide"))
        })
        .collect();
    stage(
        &mut runner,
        "embed",
        json!({}),
        embed_paths.clone(),
        &mut || {
            fs::create_dir_all(out.join("embeddings"))?;
            for (net, tag) in [(&baseline, "baseline"), (&compressed, "compressed")] {
                for (imgs, ds, split) in [
                    (&train_imgs, &train_ds, "train"),
                    (&eval_imgs, &eval_ds, "eval"),
                    (&target_imgs, &target_ds, "target"),
                ] {
                    let embs = extract_embeddings(net, imgs, &ds.id_pairs())?;
                    save_embeddings(&out.join(format!("embeddings/{tag}_{split}.fide")), &embs)?;
                }
            }
            Ok(())
        },
    )?;
    let load_embs = |name: &str| load_embeddings(&out.join(format!("embeddings/{name}.fide")));
    let baseline_train_e = load_embs("baseline_train")?;
    let baseline_eval_e = load_embs("baseline_eval")?;
    let baseline_target_e = load_embs("baseline_target")?;
    let compressed_train_e = load_embs("compressed_train")?;
    let compressed_eval_e = load_embs("compressed_eval")?;
    let compressed_target_e = load_embs("compressed_target")?;

    // --- hyperplanes ---
    stage(
        &mut runner,
        "hyperplanes",
        json!({
            "solver": cfg.hyperplanes,
            "similarity": cfg.similarity,
            "seed": cfg.hyperplane_seed(),
        }),
        vec!["models/hyperplanes.fidh".into()],
        &mut || {
            let models = train_hyperplanes(&baseline_train_e, &cfg.hyperplanes)?;
            save_models(&out.join("models/hyperplanes.fidh"), &models)
        },
    )?;
    let models = load_models(&out.join("models/hyperplanes.fidh"))?;

    // --- bootstrap ---
    let mut plan = cfg.plan.clone();
    plan.rng_seed = cfg.plan_seed();
    plan.num_seeds = plan.num_seeds.min(models.len());
    plan.neighbors_per_seed = plan.neighbors_per_seed.min(models.len().saturating_sub(1));
    stage(
        &mut runner,
        "bootstrap",
        json!({ "plan": plan, "similarity": cfg.similarity }),
        vec![
            "bootstrap/bootstrap.json".into(),
            "bootstrap/control.json".into(),
            "bootstrap/hardness.json".into(),
        ],
        &mut || {
            let boot = build_bootstrap(&models, &plan, cfg.similarity)?;
            let control = sample_control(&models, boot.identities.len(), plan.rng_seed)?;
            let hard = hardness_report(&models, &boot.identities, cfg.similarity)?;
            let easy = hardness_report(&models, &control, cfg.similarity)?;
            write_json(&out.join("bootstrap/bootstrap.json"), &serde_json::to_value(&boot)?)?;
            write_json(&out.join("bootstrap/control.json"), &serde_json::to_value(&control)?)?;
            write_json(
                &out.join("bootstrap/hardness.json"),
                &json!({ "bootstrap": hard, "control": easy }),
            )
        },
    )?;
    let boot: BootstrappedDataset =
        serde_json::from_slice(&fs::read(out.join("bootstrap/bootstrap.json"))?)?;

    // --- expand ---
    let mut expand_tc = cfg.train.clone();
    expand_tc.rng_seed = cfg.expand_seed();
    let expand_paths: Vec<String> = std::iter::once("checkpoints/expanded.fidc".to_string())
        .chain(std::iter::once("checkpoints/expanded_log.json".to_string()))
        .chain(
            ["train", "eval", "target"]
                .iter()
                .map(|s| format!("embeddings/expanded_{s}.fide")),
        )
        .collect();
    stage(
        &mut runner,
        "expand",
        json!({ "multiplier": cfg.expansion_multiplier, "train": expand_tc }),
        expand_paths,
        &mut || {
            let chosen: BTreeSet<&str> = boot.identities.iter().map(String::as_str).collect();
            let subset = train_ds.filter_identities(|id| chosen.contains(id));
            if subset.is_empty() {
                return Err(Error::Data("bootstrapped set selects no training images".into()));
            }
            let subset_map = subset.class_map();
            let (subset_imgs, subset_labels) = subset.to_tensors::<f32>(&subset_map)?;
            let mut net = expand_network(
                &baseline,
                cfg.expansion_multiplier,
                subset_map.len(),
                expand_tc.rng_seed,
            )?;
            let log = train(&mut net, &subset_imgs, &subset_labels, &expand_tc)?;
            save_network(&out.join("checkpoints/expanded.fidc"), &net)?;
            write_json(
                &out.join("checkpoints/expanded_log.json"),
                &serde_json::to_value(&log)?,
            )?;
            for (imgs, ds, split) in [
                (&train_imgs, &train_ds, "train"),
                (&eval_imgs, &eval_ds, "eval"),
                (&target_imgs, &target_ds, "target"),
            ] {
                let embs = extract_embeddings(&net, imgs, &ds.id_pairs())?;
                save_embeddings(&out.join(format!("embeddings/expanded_{split}.fide")), &embs)?;
            }
            Ok(())
        },
    )?;
    let expanded_train_e = load_embs("expanded_train")?;
    let expanded_eval_e = load_embs("expanded_eval")?;
    let expanded_target_e = load_embs("expanded_target")?;

    // --- eval ---
    let fuse_sets = |a: &[Embedding<f32>], b: &[Embedding<f32>]| -> Result<Vec<Embedding<f32>>> {
        a.iter().zip(b).map(|(x, y)| fuse(&[x, y])).collect()
    };
    stage(
        &mut runner,
        "eval",
        json!({
            "max_rank": cfg.max_rank,
            "far_targets": cfg.far_targets,
            "verifier": cfg.verifier,
            "pairs": {
                "max_genuine": cfg.pairs_max_genuine,
                "negative_ratio": cfg.pairs_negative_ratio,
                "seed": cfg.eval_seed(),
            },
        }),
        VARIANTS
            .iter()
            .map(|v| format!("eval/{v}/summary.json"))
            .chain(std::iter::once("eval/baseline_eval_bits.fidb".to_string()))
            .collect(),
        &mut || {
            let fusion_train = fuse_sets(&baseline_train_e, &compressed_train_e)?;
            let fusion_eval = fuse_sets(&baseline_eval_e, &compressed_eval_e)?;
            let fusion_target = fuse_sets(&baseline_target_e, &compressed_target_e)?;
            let sets: [(&str, &[Embedding<f32>], &[Embedding<f32>], &[Embedding<f32>]); 4] = [
                ("baseline", &baseline_train_e, &baseline_eval_e, &baseline_target_e),
                ("compressed", &compressed_train_e, &compressed_eval_e, &compressed_target_e),
                ("expanded", &expanded_train_e, &expanded_eval_e, &expanded_target_e),
                ("fusion", &fusion_train, &fusion_eval, &fusion_target),
            ];
            for (name, tr, ev, tg) in sets {
                let summary = evaluate_variant(cfg, tr, ev, tg)?;
                write_json(
                    &out.join(format!("eval/{name}/summary.json")),
                    &serde_json::to_value(&summary)?,
                )?;
            }
            let bits: Vec<_> = baseline_eval_e.iter().map(binarize).collect();
            save_binary_embeddings(&out.join("eval/baseline_eval_bits.fidb"), &bits)
        },
    )?;

    // --- diagnostics ---
    stage(
        &mut runner,
        "diagnostics",
        json!({ "occlusion_fraction": cfg.occlusion_fraction, "seed": cfg.eval_seed() }),
        vec![
            "diagnostics/norm_entropy.json".into(),
            "diagnostics/taylor.json".into(),
            "diagnostics/activation_map.json".into(),
        ],
        &mut || {
            let occluded = occlude_dataset(&eval_ds, cfg.occlusion_fraction, cfg.eval_seed())?;
            let occluded_imgs: Tensor<f32> = occluded.images_tensor()?;
            let study = norm_entropy_study(&baseline, &occluded_imgs, &occluded.id_pairs())?;
            write_json(
                &out.join("diagnostics/norm_entropy.json"),
                &serde_json::to_value(&study)?,
            )?;

            let scales = [0.1, 0.05, 0.025];
            let curve = taylor_error_curve(num_classes.max(10), &scales, 200, cfg.eval_seed())?;
            write_json(
                &out.join("diagnostics/taylor.json"),
                &json!({
                    "num_components": num_classes.max(10),
                    "draws": 200,
                    "curve": curve.iter().map(|&(s, e)| json!([s, e])).collect::<Vec<_>>(),
                }),
            )?;

            let (h, w) = (cfg.synth.height, cfg.synth.width);
            let first = &eval_ds.images[0];
            let image: Tensor<f32> = Tensor::new(
                vec![1, 1, h, w],
                first.image.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
            )?;
            let map = lc_activation_map(&baseline, &image)?;
            write_json(
                &out.join("diagnostics/activation_map.json"),
                &json!({
                    "image_id": first.image_id,
                    "shape": map.shape(),
                    "values": map.data(),
                }),
            )
        },
    )?;

    // --- report ---
    stage(
        &mut runner,
        "report",
        json!({}),
        vec!["summary.json".into()],
        &mut || {
            let mut variants = serde_json::Map::new();
            for v in VARIANTS {
                let s = read_json(&out.join(format!("eval/{v}/summary.json")))?;
                let rank1 = |key: &str| s[key]["rank_accuracy"][0].clone();
                let dirs: Value = s["open_eval"]["operating_points"]
                    .as_array()
                    .map(|pts| {
                        pts.iter()
                            .map(|p| {
                                (
                                    p["far_target"].to_string(),
                                    p["dir"].clone(),
                                )
                            })
                            .collect::<serde_json::Map<String, Value>>()
                    })
                    .map(Value::Object)
                    .unwrap_or(Value::Null);
                variants.insert(
                    v.to_string(),
                    json!({
                        "rank1_eval": rank1("closed_eval"),
                        "rank1_target": rank1("closed_target"),
                        "verification_accuracy": s["verification"]["accuracy"],
                        "binarization": s["binarization"],
                        "dir_at_far": dirs,
                    }),
                );
            }
            let hardness = read_json(&out.join("bootstrap/hardness.json"))?;
            let norm_entropy = read_json(&out.join("diagnostics/norm_entropy.json"))?;
            let summary = json!({
                "dataset": {
                    "train_identities": num_classes,
                    "eval_identities": eval_ds.identities().len(),
                    "train_images": train_ds.len(),
                    "eval_images": eval_ds.len(),
                    "target_images": target_ds.len(),
                },
                "bootstrap": {
                    "set_size": boot.identities.len(),
                    "hardness": hardness,
                    "provenance": boot.provenance,
                },
                "variants": Value::Object(variants),
                "norm_entropy": {
                    "pearson": norm_entropy["pearson"],
                    "spearman": norm_entropy["spearman"],
                },
            });
            write_json(&out.join("summary.json"), &summary)
        },
    )?;

    let summary = read_json(&out.join("summary.json"))?;
    Ok(PipelineOutcome { stages: runner.statuses, summary })
}
