//! Synthetic face-like image generation. Each identity is a random latent
//! vector over a fixed 2-D cosine basis; each image renders that pattern
//! under per-image nuisances (subpixel shift, brightness gain, pixel noise,
//! optional occlusion). Because the basis is analytic, shifts are evaluated
//! exactly instead of by resampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{apply_occlusion, FaceDataset, GrayImage, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::{permutation, stream_rng, STREAM_IMAGE, STREAM_LATENT, STREAM_SHUFFLE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Number of cosine basis coefficients defining an identity.
    pub latent_dim: usize,
    /// Maximum shift magnitude per axis, in pixels.
    pub shift: f64,
    /// Brightness gain half-range: gain is drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Standard deviation of additive pixel noise, in pattern units.
    pub noise: f64,
    /// Area fraction covered by an occluding square, when one is applied.
    pub occlusion_fraction: f64,
    /// Probability that an image gets an occluding square.
    pub occlusion_prob: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 50,
            images_per_identity: 20,
            height: 32,
            width: 32,
            latent_dim: 12,
            shift: 1.5,
            brightness: 0.15,
            noise: 0.05,
            occlusion_fraction: 0.1,
            occlusion_prob: 0.0,
            rng_seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.images_per_identity == 0 {
            return Err(Error::Config("need at least one identity and image".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "images of {}x{} are too small",
                self.height, self.width
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        for (name, v) in [
            ("shift", self.shift),
            ("brightness", self.brightness),
            ("noise", self.noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.brightness >= 1.0 {
            return Err(Error::Config("brightness half-range must stay below 1".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction)
            || !(0.0..=1.0).contains(&self.occlusion_prob)
        {
            return Err(Error::Config("occlusion settings must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Frequencies of the j-th basis function, enumerated along anti-diagonals:
/// (0,0), (0,1), (1,0), (0,2), (1,1), (2,0), ...
fn basis_freq(j: usize) -> (usize, usize) {
    let mut d = 0;
    let mut start = 0;
    while start + d + 1 <= j {
        start += d + 1;
        d += 1;
    }
    let u = j - start;
    (u, d - u)
}

/// Pattern value at continuous coordinates, so shifts need no interpolation.
fn pattern_value(latent: &[f64], x: f64, y: f64, width: f64, height: f64) -> f64 {
    let scale = 1.0 / (latent.len() as f64).sqrt();
    latent
        .iter()
        .enumerate()
        .map(|(j, &z)| {
            let (u, v) = basis_freq(j);
            let fx = (std::f64::consts::PI * (u + 1) as f64 * (x + 0.5) / width).cos();
            let fy = (std::f64::consts::PI * (v + 1) as f64 * (y + 0.5) / height).cos();
            z * fx * fy
        })
        .sum::<f64>()
        * scale
}

fn identity_latent(cfg: &SynthConfig, identity_index: usize) -> Vec<f64> {
    let mut rng = stream_rng(cfg.rng_seed, STREAM_LATENT, identity_index as u64);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    (0..cfg.latent_dim).map(|_| normal.sample(&mut rng)).collect()
}

fn identity_name(k: usize) -> String {
    format!("id{k:04}")
}

/// Render the images of the listed identities. `nuisance_scale` multiplies
/// shift, brightness, noise, and occlusion probability; `stream_offset`
/// shifts the per-image randomness so distinct renders of the same identity
/// never share draws.
fn render_set(
    cfg: &SynthConfig,
    identity_indices: &[usize],
    nuisance_scale: f64,
    stream_offset: u64,
    tag: &str,
) -> Result<FaceDataset> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let shift = cfg.shift * nuisance_scale;
    let brightness = (cfg.brightness * nuisance_scale).min(0.95);
    let noise = cfg.noise * nuisance_scale;
    let occ_prob = (cfg.occlusion_prob * nuisance_scale).min(1.0);

    let mut images = Vec::with_capacity(identity_indices.len() * cfg.images_per_identity);
    for &k in identity_indices {
        let latent = identity_latent(cfg, k);
        let identity = identity_name(k);
        for i in 0..cfg.images_per_identity {
            let global = (k * cfg.images_per_identity + i) as u64 + stream_offset;
            let mut rng = stream_rng(cfg.rng_seed, STREAM_IMAGE, global);
            let dx = rng.random_range(-1.0..1.0) * shift;
            let dy = rng.random_range(-1.0..1.0) * shift;
            let gain = (1.0 + rng.random_range(-1.0..1.0) * brightness).max(0.0);

            let mut pixels = Vec::with_capacity(cfg.width * cfg.height);
            for r in 0..cfg.height {
                for c in 0..cfg.width {
                    let v = gain * pattern_value(&latent, c as f64 - dx, r as f64 - dy, w, h)
                        + noise * normal.sample(&mut rng);
                    pixels.push((128.0 + 96.0 * v).round().clamp(0.0, 255.0) as u8);
                }
            }
            let mut image = GrayImage::from_pixels(cfg.width, cfg.height, pixels)?;
            if occ_prob > 0.0 && rng.random_range(0.0..1.0) < occ_prob {
                image = apply_occlusion(&image, cfg.occlusion_fraction, &mut rng)?;
            }
            images.push(LabeledImage {
                image_id: format!("{identity}/{tag}{i:03}"),
                identity: identity.clone(),
                image,
            });
        }
    }
    Ok(FaceDataset { images })
}

/// Generate the full synthetic dataset described by the config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FaceDataset> {
    cfg.validate()?;
    let all: Vec<usize> = (0..cfg.num_identities).collect();
    render_set(cfg, &all, 1.0, 0, "img")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of identities held out of training.
    pub eval_fraction: f64,
    /// Extra nuisance applied to the target set, as a multiplier minus one:
    /// target nuisances are `(1 + domain_shift)` times the base levels.
    pub domain_shift: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { eval_fraction: 0.3, domain_shift: 0.5 }
    }
}

/// Disjoint-identity datasets: `train` for fitting the network, `eval` for
/// held-out identities under the same conditions, and `target` with the same
/// held-out identities under amplified nuisances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: FaceDataset,
    pub eval: FaceDataset,
    pub target: FaceDataset,
}

pub fn generate_splits(cfg: &SynthConfig, split: &SplitConfig) -> Result<DatasetSplits> {
    cfg.validate()?;
    if cfg.num_identities < 2 {
        return Err(Error::Config("splitting needs at least two identities".into()));
    }
    if !(0.0 < split.eval_fraction && split.eval_fraction < 1.0) {
        return Err(Error::Config(format!(
            "eval_fraction {} outside (0, 1)",
            split.eval_fraction
        )));
    }
    if !split.domain_shift.is_finite() || split.domain_shift < 0.0 {
        return Err(Error::Config(format!(
            "domain_shift must be finite and >= 0, got {}",
            split.domain_shift
        )));
    }

    let n = cfg.num_identities;
    let perm = permutation(&mut stream_rng(cfg.rng_seed, STREAM_SHUFFLE, 0), n);
    let eval_count =
        ((n as f64 * split.eval_fraction).round() as usize).clamp(1, n - 1);
    let mut eval_ids: Vec<usize> = perm[..eval_count].to_vec();
    let mut train_ids: Vec<usize> = perm[eval_count..].to_vec();
    eval_ids.sort_unstable();
    train_ids.sort_unstable();

    let total = (cfg.num_identities * cfg.images_per_identity) as u64;
    Ok(DatasetSplits {
        train: render_set(cfg, &train_ids, 1.0, 0, "img")?,
        eval: render_set(cfg, &eval_ids, 1.0, 0, "img")?,
        target: render_set(cfg, &eval_ids, 1.0 + split.domain_shift, total, "tgt")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::occlusion_side;
    use std::collections::BTreeSet;

    #[test]
    fn basis_enumeration_walks_antidiagonals() {
        let seq: Vec<(usize, usize)> = (0..6).map(basis_freq).collect();
        assert_eq!(seq, vec![(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]);
    }

    fn small() -> SynthConfig {
        SynthConfig {
            num_identities: 6,
            images_per_identity: 5,
            height: 16,
            width: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        let other = generate_synthetic(&SynthConfig { rng_seed: 2, ..small() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn images_of_one_identity_repeat_without_nuisances() {
        let cfg = SynthConfig {
            shift: 0.0,
            brightness: 0.0,
            noise: 0.0,
            occlusion_prob: 0.0,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for pair in ds.images.chunks(cfg.images_per_identity) {
            for l in pair {
                assert_eq!(l.image, pair[0].image, "{} differs", l.image_id);
            }
        }
    }

    #[test]
    fn same_identity_images_are_closer_than_cross_identity() {
        let ds = generate_synthetic(&small()).unwrap();
        let dist = |a: &GrayImage, b: &GrayImage| -> f64 {
            a.pixels
                .iter()
                .zip(&b.pixels)
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum::<f64>()
                / a.pixels.len() as f64
        };
        let mut same = (0.0, 0usize);
        let mut cross = (0.0, 0usize);
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                let d = dist(&ds.images[i].image, &ds.images[j].image);
                if ds.images[i].identity == ds.images[j].identity {
                    same = (same.0 + d, same.1 + 1);
                } else {
                    cross = (cross.0 + d, cross.1 + 1);
                }
            }
        }
        let (same, cross) = (same.0 / same.1 as f64, cross.0 / cross.1 as f64);
        assert!(
            same * 1.4 < cross,
            "same-identity distance {same:.2} should be well under cross {cross:.2}"
        );
    }

    #[test]
    fn occlusion_probability_controls_black_patches() {
        let occluded = generate_synthetic(&SynthConfig {
            occlusion_prob: 1.0,
            occlusion_fraction: 0.15,
            ..small()
        })
        .unwrap();
        let side = occlusion_side(16, 16, 0.15);
        let min_patch = side * side;
        for l in &occluded.images {
            let zeros = l.image.pixels.iter().filter(|&&p| p == 0).count();
            assert!(zeros >= min_patch, "{} has {zeros} zeros < {min_patch}", l.image_id);
        }
    }

    #[test]
    fn splits_are_identity_disjoint_with_matching_target() {
        let cfg = SynthConfig { num_identities: 10, ..small() };
        let split = SplitConfig::default();
        let s = generate_splits(&cfg, &split).unwrap();
        let train: BTreeSet<_> = s.train.identities().into_iter().collect();
        let eval: BTreeSet<_> = s.eval.identities().into_iter().collect();
        let target: BTreeSet<_> = s.target.identities().into_iter().collect();
        assert_eq!(eval.len(), 3, "30% of 10 identities");
        assert_eq!(train.len(), 7);
        assert!(train.is_disjoint(&eval));
        assert_eq!(eval, target);

        // Target images are fresh renders, not copies.
        let eval_ids: BTreeSet<_> = s.eval.images.iter().map(|l| &l.image_id).collect();
        for l in &s.target.images {
            assert!(!eval_ids.contains(&l.image_id));
        }

        let again = generate_splits(&cfg, &split).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn domain_shift_amplifies_image_variation() {
        let cfg = SynthConfig { num_identities: 8, noise: 0.08, ..small() };
        let near = generate_splits(&cfg, &SplitConfig { eval_fraction: 0.3, domain_shift: 0.0 })
            .unwrap();
        let far = generate_splits(&cfg, &SplitConfig { eval_fraction: 0.3, domain_shift: 2.0 })
            .unwrap();
        // Same identities, same latents: compare within-identity spread.
        let spread = |ds: &FaceDataset| -> f64 {
            let mut total = (0.0, 0usize);
            for a in &ds.images {
                for b in &ds.images {
                    if a.identity == b.identity && a.image_id < b.image_id {
                        let d: f64 = a
                            .image
                            .pixels
                            .iter()
                            .zip(&b.image.pixels)
                            .map(|(&x, &y)| (x as f64 - y as f64).abs())
                            .sum();
                        total = (total.0 + d / a.image.pixels.len() as f64, total.1 + 1);
                    }
                }
            }
            total.0 / total.1 as f64
        };
        assert!(spread(&far.target) > spread(&near.target) * 1.3);
    }
}
