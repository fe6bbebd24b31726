//! Command-line front end. Every subcommand reads the same configuration
//! (defaults, optionally a JSON file, then `--set` overrides) and operates on
//! artifact files, so single stages can be scripted or the whole pipeline run
//! in one go.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use faceid_core::bootstrap::{
    build_bootstrap, hardness_report, sample_control, train_hyperplanes,
};
use faceid_core::data::{generate_splits, load_dataset, occlude_dataset, save_dataset};
use faceid_core::diagnostics::{lc_activation_map, norm_entropy_study, taylor_error_curve};
use faceid_core::eval::{
    closed_set_eval, open_set_eval, sample_pairs, split_probe_gallery, train_verifier,
    verification_report,
};
use faceid_core::features::{compress_retrain, expand_network, extract_embeddings};
use faceid_core::io::{
    load_embeddings, load_models, load_network, save_embeddings, save_models, save_network,
};
use faceid_core::nn::{build_network, train, NetworkConfig};
use faceid_core::pipeline::{run_pipeline, PipelineConfig};
use faceid_core::tensor::Tensor;
use faceid_core::{Embedding32, Error, Network32, Result};

#[derive(Parser)]
#[command(
    name = "faceid",
    about = "Face identification pipeline: synthetic data, locally-connected CNNs, \
             bootstrapped hard sets, and identification benchmarks",
    version
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; missing fields fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set train.epochs=30 or --set seed=7.
    /// Values parse as JSON when possible, otherwise as strings.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/eval/target datasets.
    Synth {
        /// Directory receiving dataset/{train,eval,target}.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline network on a dataset.
    Train {
        /// Dataset directory (as written by synth).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a narrower bottleneck on top of a trained checkpoint.
    Compress {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract embeddings from a dataset with a trained checkpoint.
    Embed {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Embedding file to write (.fide).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one separating hyperplane per identity over embeddings.
    Hyperplanes {
        #[arg(long)]
        embeddings: PathBuf,
        /// Model bank file to write (.fidh).
        #[arg(long)]
        out: PathBuf,
    },
    /// Select seed identities and their model-space neighbors.
    Bootstrap {
        #[arg(long)]
        models: PathBuf,
        /// Directory receiving bootstrap.json, control.json, hardness.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grow the network and train it on the bootstrapped identities.
    Expand {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// bootstrap.json from the bootstrap step.
        #[arg(long)]
        bootstrap: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair verification: train a verifier on one embedding set, report on
    /// another.
    EvalVerify {
        #[arg(long)]
        train_embeddings: PathBuf,
        #[arg(long)]
        test_embeddings: PathBuf,
        /// Report file to write (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-set identification over an embedding file.
    EvalClosed {
        /// Gallery source; each identity enrolls its first image.
        #[arg(long)]
        embeddings: PathBuf,
        /// Optional separate probe set; defaults to the non-gallery
        /// remainder of --embeddings.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Open-set identification at the configured false-accept rates.
    EvalOpen {
        /// Gallery source; the first (sorted) half of its identities enroll.
        #[arg(long)]
        embeddings: PathBuf,
        /// Optional separate probe set; defaults to the non-gallery
        /// remainder of --embeddings.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Representation diagnostics: bottleneck-norm vs entropy under
    /// occlusion, series truncation error, and an activation map.
    Diagnose {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory receiving the diagnostic reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage end to end with resumable artifacts.
    Pipeline {
        /// Output directory for the artifact tree.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_override(raw: &str) -> Result<(Vec<String>, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{raw}' is not KEY=VALUE")))?;
    if key.is_empty() {
        return Err(Error::Config(format!("override '{raw}' has an empty key")));
    }
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key '{key}' has empty segments")));
    }
    let value = serde_json::from_str(value).unwrap_or(Value::String(value.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for seg in &path[..path.len() - 1] {
        if !cur.is_object() {
            return Err(Error::Config(format!(
                "cannot descend into non-object at '{seg}'"
            )));
        }
        cur = cur
            .as_object_mut()
            .expect("checked object")
            .entry(seg.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config("cannot set a key on a non-object".into()))?;
    obj.insert(path.last().expect("non-empty path").clone(), value);
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut value = match &args.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => Value::Object(Default::default()),
    };
    for raw in &args.set {
        let (path, v) = parse_override(raw)?;
        set_path(&mut value, &path, v)?;
    }
    let cfg: PipelineConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("bad configuration: {e}")))?;
    Ok(cfg)
}

fn write_json(path: &std::path::Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn network_for(cfg: &PipelineConfig, num_classes: usize) -> NetworkConfig {
    let mut nc =
        NetworkConfig::desk_with_filters(cfg.lc_filters, cfg.bottleneck, num_classes);
    nc.input_dims = (cfg.synth.height, cfg.synth.width, 1);
    nc
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    cfg.validate()?;
    match cli.command {
        Command::Synth { out } => {
            let mut synth = cfg.synth.clone();
            synth.rng_seed = cfg.synth_seed();
            let splits = generate_splits(&synth, &cfg.split)?;
            save_dataset(&out.join("dataset/train"), &splits.train)?;
            save_dataset(&out.join("dataset/eval"), &splits.eval)?;
            save_dataset(&out.join("dataset/target"), &splits.target)?;
            println!(
                "wrote {} train, {} eval, {} target images under {}",
                splits.train.len(),
                splits.eval.len(),
                splits.target.len(),
                out.display()
            );
        }
        Command::Train { data, out } => {
            let ds = load_dataset(&data)?;
            let map = ds.class_map();
            let (imgs, labels) = ds.to_tensors::<f32>(&map)?;
            let nc = network_for(&cfg, map.len());
            nc.validate()?;
            let mut tc = cfg.train.clone();
            tc.rng_seed = cfg.baseline_seed();
            let mut net: Network32 = build_network(&nc, tc.rng_seed)?;
            let log = train(&mut net, &imgs, &labels, &tc)?;
            save_network(&out, &net)?;
            println!(
                "trained {} classes for {} epochs, final loss {:.4} -> {}",
                map.len(),
                tc.epochs,
                log.epoch_loss.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Compress { base, data, out } => {
            let ds = load_dataset(&data)?;
            let map = ds.class_map();
            let (imgs, labels) = ds.to_tensors::<f32>(&map)?;
            let base_net = load_network(&base)?;
            let mut tc = cfg.train.clone();
            tc.rng_seed = cfg.compress_seed();
            let (net, log) =
                compress_retrain(&base_net, &imgs, &labels, cfg.compressed_bottleneck, &tc)?;
            save_network(&out, &net)?;
            println!(
                "retrained bottleneck {} -> {}, final loss {:.4} -> {}",
                base_net.config().bottleneck_dim,
                cfg.compressed_bottleneck,
                log.epoch_loss.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Embed { net, data, out } => {
            let ds = load_dataset(&data)?;
            let imgs: Tensor<f32> = ds.images_tensor()?;
            let network = load_network(&net)?;
            let embs = extract_embeddings(&network, &imgs, &ds.id_pairs())?;
            save_embeddings(&out, &embs)?;
            println!("wrote {} embeddings of dim {} -> {}",
                embs.len(),
                embs.first().map(|e| e.dim()).unwrap_or(0),
                out.display()
            );
        }
        Command::Hyperplanes { embeddings, out } => {
            let embs = load_embeddings(&embeddings)?;
            let models = train_hyperplanes(&embs, &cfg.hyperplanes)?;
            save_models(&out, &models)?;
            println!("trained {} hyperplane models -> {}", models.len(), out.display());
        }
        Command::Bootstrap { models, out } => {
            let bank = load_models(&models)?;
            let mut plan = cfg.plan.clone();
            plan.rng_seed = cfg.plan_seed();
            plan.num_seeds = plan.num_seeds.min(bank.len());
            plan.neighbors_per_seed =
                plan.neighbors_per_seed.min(bank.len().saturating_sub(1));
            let boot = build_bootstrap(&bank, &plan, cfg.similarity)?;
            let control = sample_control(&bank, boot.identities.len(), plan.rng_seed)?;
            let hard = hardness_report(&bank, &boot.identities, cfg.similarity)?;
            let easy = hardness_report(&bank, &control, cfg.similarity)?;
            write_json(&out.join("bootstrap.json"), &serde_json::to_value(&boot)?)?;
            write_json(&out.join("control.json"), &serde_json::to_value(&control)?)?;
            write_json(
                &out.join("hardness.json"),
                &serde_json::json!({ "bootstrap": hard, "control": easy }),
            )?;
            println!(
                "bootstrapped {} identities (set similarity {:.4} vs pool {:.4}) -> {}",
                boot.identities.len(),
                hard.set_mean_similarity,
                hard.pool_mean_similarity,
                out.display()
            );
        }
        Command::Expand { base, data, bootstrap, out } => {
            let ds = load_dataset(&data)?;
            let boot: Value = serde_json::from_slice(&std::fs::read(&bootstrap)?)?;
            let chosen: std::collections::BTreeSet<String> = boot["identities"]
                .as_array()
                .ok_or_else(|| Error::Format("bootstrap.json lacks identities".into()))?
                .iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect();
            let subset = ds.filter_identities(|id| chosen.contains(id));
            if subset.is_empty() {
                return Err(Error::Data(
                    "bootstrapped identities select no images from this dataset".into(),
                ));
            }
            let map = subset.class_map();
            let (imgs, labels) = subset.to_tensors::<f32>(&map)?;
            let base_net = load_network(&base)?;
            let mut tc = cfg.train.clone();
            tc.rng_seed = cfg.expand_seed();
            let mut net =
                expand_network(&base_net, cfg.expansion_multiplier, map.len(), tc.rng_seed)?;
            let log = train(&mut net, &imgs, &labels, &tc)?;
            save_network(&out, &net)?;
            println!(
                "expanded x{} and trained on {} identities, final loss {:.4} -> {}",
                cfg.expansion_multiplier,
                map.len(),
                log.epoch_loss.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::EvalVerify { train_embeddings, test_embeddings, out } => {
            let train_e = load_embeddings(&train_embeddings)?;
            let test_e = load_embeddings(&test_embeddings)?;
            let train_pairs = sample_pairs(
                &train_e,
                cfg.pairs_max_genuine,
                cfg.pairs_negative_ratio,
                cfg.eval_seed(),
                0,
            )?;
            let verifier = train_verifier(
                &train_e,
                &train_pairs,
                cfg.verifier.epochs,
                cfg.verifier.learning_rate,
            )?;
            let test_pairs = sample_pairs(
                &test_e,
                cfg.pairs_max_genuine,
                cfg.pairs_negative_ratio,
                cfg.eval_seed(),
                1,
            )?;
            let report = verification_report(&verifier, &test_e, &test_pairs)?;
            write_json(&out, &serde_json::to_value(&report)?)?;
            println!(
                "verification accuracy {:.2}% on {} genuine / {} impostor pairs -> {}",
                report.accuracy,
                report.num_genuine,
                report.num_impostor,
                out.display()
            );
        }
        Command::EvalClosed { embeddings, probes, out } => {
            let embs = load_embeddings(&embeddings)?;
            let split = split_probe_gallery(&embs)?;
            let gallery: Vec<Embedding32> =
                split.gallery.iter().map(|&i| embs[i].clone()).collect();
            let probe_set: Vec<Embedding32> = match probes {
                Some(p) => load_embeddings(&p)?,
                None => split.probes.iter().map(|&i| embs[i].clone()).collect(),
            };
            let report = closed_set_eval(&gallery, &probe_set, cfg.max_rank)?;
            write_json(&out, &serde_json::to_value(&report)?)?;
            println!(
                "rank-1 {:.2}% over {} probes against {} identities -> {}",
                report.rank_accuracy.first().copied().unwrap_or(f64::NAN),
                report.num_probes,
                report.num_gallery,
                out.display()
            );
        }
        Command::EvalOpen { embeddings, probes, out } => {
            let embs = load_embeddings(&embeddings)?;
            let ids: Vec<&str> = {
                let set: std::collections::BTreeSet<&str> =
                    embs.iter().map(|e| e.identity.as_str()).collect();
                set.into_iter().collect()
            };
            if ids.len() < 2 {
                return Err(Error::Data("open-set needs at least two identities".into()));
            }
            let enroll = ids.len().div_ceil(2).min(ids.len() - 1);
            let enrolled: std::collections::BTreeSet<&str> =
                ids[..enroll].iter().copied().collect();
            let subset: Vec<Embedding32> = embs
                .iter()
                .filter(|e| enrolled.contains(e.identity.as_str()))
                .cloned()
                .collect();
            let split = split_probe_gallery(&subset)?;
            let gallery: Vec<Embedding32> =
                split.gallery.iter().map(|&i| subset[i].clone()).collect();
            let gallery_images: std::collections::BTreeSet<&str> =
                gallery.iter().map(|e| e.image_id.as_str()).collect();
            let probe_set: Vec<Embedding32> = match probes {
                Some(p) => load_embeddings(&p)?,
                None => embs
                    .iter()
                    .filter(|e| !gallery_images.contains(e.image_id.as_str()))
                    .cloned()
                    .collect(),
            };
            let report = open_set_eval(&gallery, &probe_set, &cfg.far_targets)?;
            write_json(&out, &serde_json::to_value(&report)?)?;
            for p in &report.operating_points {
                println!(
                    "far target {:.4}: threshold {:.4}, detection-and-identification {:.2}%",
                    p.far_target, p.threshold, p.dir
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Diagnose { net, data, out } => {
            let ds = load_dataset(&data)?;
            let network = load_network(&net)?;
            let stressed = occlude_dataset(&ds, cfg.occlusion_fraction, cfg.eval_seed())?;
            let imgs: Tensor<f32> = stressed.images_tensor()?;
            let study = norm_entropy_study(&network, &imgs, &stressed.id_pairs())?;
            write_json(&out.join("norm_entropy.json"), &serde_json::to_value(&study)?)?;

            let components = network.config().num_classes.max(10);
            let curve = taylor_error_curve(components, &[0.1, 0.05, 0.025], 200, cfg.eval_seed())?;
            write_json(
                &out.join("taylor.json"),
                &serde_json::json!({
                    "num_components": components,
                    "draws": 200,
                    "curve": curve,
                }),
            )?;

            let first = &ds.images[0];
            let (h, w) = (first.image.height, first.image.width);
            let image: Tensor<f32> = Tensor::new(
                vec![1, 1, h, w],
                first.image.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
            )?;
            let map = lc_activation_map(&network, &image)?;
            write_json(
                &out.join("activation_map.json"),
                &serde_json::json!({
                    "image_id": first.image_id,
                    "shape": map.shape(),
                    "values": map.data(),
                }),
            )?;
            println!(
                "norm/entropy correlation {:.4} (rank {:.4}) over {} occluded images -> {}",
                study.pearson,
                study.spearman,
                study.records.len(),
                out.display()
            );
        }
        Command::Pipeline { out } => {
            let outcome = run_pipeline(&cfg, &out, &mut |line| println!("{line}"))?;
            let ran = outcome.stages.iter().filter(|s| !s.skipped).count();
            let skipped = outcome.stages.len() - ran;
            println!("pipeline complete: {ran} stages ran, {skipped} up to date");
            println!("summary: {}", out.join("summary.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
