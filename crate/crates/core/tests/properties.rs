//! Randomized invariants over the numeric kernels and codecs.

use proptest::prelude::*;
use rand::Rng;

use faceid_core::data::{read_pgm, write_pgm, GrayImage};
use faceid_core::diagnostics::{centered, entropy, pearson, spearman};
use faceid_core::eval::chi2_vector;
use faceid_core::features::{binarize, fuse, hamming_similarity, Embedding};
use faceid_core::io::{load_embeddings, save_embeddings};
use faceid_core::nn::softmax;
use faceid_core::rng::{permutation, sample_without_replacement, stream_rng};

fn embedding_from(values: Vec<f64>) -> Embedding<f64> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    Embedding {
        image_id: "x/000".into(),
        identity: "x".into(),
        vector: values,
        raw_norm: norm,
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_for_any_finite_logits(
        logits in prop::collection::vec(-50.0f64..50.0, 1..40),
    ) {
        let p = softmax(&logits);
        prop_assert_eq!(p.len(), logits.len());
        for &v in &p {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "sum {total}");
    }

    #[test]
    fn softmax_ignores_a_constant_shift(
        logits in prop::collection::vec(-20.0f64..20.0, 1..20),
        shift in -30.0f64..30.0,
    ) {
        let base = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let moved = softmax(&shifted);
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chi2_features_are_symmetric_and_nonnegative(
        pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..30),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = chi2_vector(&a, &b).unwrap();
        let ba = chi2_vector(&b, &a).unwrap();
        prop_assert_eq!(&ab, &ba);
        for &v in &ab {
            prop_assert!(v >= 0.0);
        }
        let self_features = chi2_vector(&a, &a).unwrap();
        for &v in &self_features {
            prop_assert!(v == 0.0);
        }
    }

    #[test]
    fn hamming_similarity_is_reflexive_symmetric_and_bounded(
        signs_a in prop::collection::vec(any::<bool>(), 1..200),
        flips in prop::collection::vec(any::<bool>(), 1..200),
    ) {
        let n = signs_a.len().min(flips.len());
        let to_values = |signs: &[bool]| -> Vec<f64> {
            signs.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect()
        };
        let a = binarize(&embedding_from(to_values(&signs_a[..n])));
        let signs_b: Vec<bool> =
            signs_a[..n].iter().zip(&flips[..n]).map(|(&s, &f)| s ^ f).collect();
        let b = binarize(&embedding_from(to_values(&signs_b)));

        prop_assert_eq!(hamming_similarity(&a, &a).unwrap(), 1.0);
        let ab = hamming_similarity(&a, &b).unwrap();
        let ba = hamming_similarity(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        let matches = flips[..n].iter().filter(|&&f| !f).count();
        prop_assert!((ab - matches as f64 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn binarization_thresholds_strictly_at_zero(
        values in prop::collection::vec(
            prop_oneof![Just(0.0f64), -1.0f64..1.0, Just(-0.0f64)],
            1..130,
        ),
    ) {
        let bits = binarize(&embedding_from(values.clone()));
        prop_assert_eq!(bits.num_bits, values.len());
        prop_assert_eq!(bits.bits.len(), values.len().div_ceil(8));
        for (i, &v) in values.iter().enumerate() {
            prop_assert_eq!(bits.bit(i), v > 0.0, "index {}: value {}", i, v);
        }
        // Padding bits past num_bits stay clear.
        for i in values.len()..bits.bits.len() * 8 {
            prop_assert!(bits.bits[i / 8] >> (i % 8) & 1 == 0);
        }
    }

    #[test]
    fn fusion_concatenates_and_renormalizes(
        left in prop::collection::vec(-1.0f64..1.0, 1..40),
        right in prop::collection::vec(-1.0f64..1.0, 1..40),
    ) {
        let mut left = left;
        left[0] = 1.0; // keep the concatenation away from the zero vector
        let a = embedding_from(left.clone());
        let b = embedding_from(right.clone());
        let fused = fuse(&[&a, &b]).unwrap();
        prop_assert_eq!(fused.dim(), left.len() + right.len());
        let norm: f64 = fused.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        // Direction is preserved: fused components stay proportional to inputs.
        let scale = fused.vector[0] / left[0];
        for (f, &orig) in fused.vector.iter().zip(left.iter().chain(&right)) {
            prop_assert!((f - orig * scale).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_of_any_logits_is_bounded_by_ln_n(
        logits in prop::collection::vec(-30.0f64..30.0, 1..50),
    ) {
        let h = entropy(&logits).unwrap();
        let n = logits.len() as f64;
        prop_assert!(h >= -1e-12, "entropy {h}");
        prop_assert!(h <= n.ln() + 1e-9, "entropy {} over ln {}", h, n.ln());
    }

    #[test]
    fn centering_zeroes_the_mean(
        values in prop::collection::vec(-100.0f64..100.0, 1..60),
    ) {
        let c = centered(&values);
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        prop_assert!(mean.abs() < 1e-9, "mean {mean}");
    }

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps(
        xy in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40),
        gain in 0.1f64..10.0,
        offset in -20.0f64..20.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let spread = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m).powi(2)).sum::<f64>()
        };
        prop_assume!(spread(&x) > 1e-6 && spread(&y) > 1e-6);
        let r = pearson(&x, &y).unwrap();
        prop_assert!(r.abs() <= 1.0 + 1e-9);
        let mapped: Vec<f64> = x.iter().map(|v| gain * v + offset).collect();
        let r2 = pearson(&mapped, &y).unwrap();
        prop_assert!((r - r2).abs() < 1e-6, "{r} vs {r2}");
    }

    #[test]
    fn spearman_is_invariant_under_monotone_maps(
        order_seed in any::<u64>(),
        y in prop::collection::vec(-50.0f64..50.0, 3..40),
    ) {
        let n = y.len();
        let spread = {
            let m = y.iter().sum::<f64>() / n as f64;
            y.iter().map(|a| (a - m).powi(2)).sum::<f64>()
        };
        prop_assume!(spread > 1e-6);
        // x is a shuffled 0..n, so ranks are distinct and cubing is exact.
        let mut rng = stream_rng(order_seed, 1, 0);
        let x: Vec<f64> = permutation(&mut rng, n).into_iter().map(|v| v as f64).collect();
        let rho = spearman(&x, &y).unwrap();
        prop_assert!(rho.abs() <= 1.0 + 1e-9);
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v + 2.0).collect();
        let rho2 = spearman(&cubed, &y).unwrap();
        prop_assert!((rho - rho2).abs() < 1e-12, "{rho} vs {rho2}");
    }

    #[test]
    fn permutations_are_bijections_and_seed_deterministic(
        seed in any::<u64>(),
        n in 0usize..400,
    ) {
        let mut rng = stream_rng(seed, 2, 0);
        let p = permutation(&mut rng, n);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        let identity: Vec<usize> = (0..n).collect();
        prop_assert_eq!(sorted, identity);
        let mut rng2 = stream_rng(seed, 2, 0);
        prop_assert_eq!(p, permutation(&mut rng2, n));
    }

    #[test]
    fn samples_without_replacement_are_distinct_and_in_range(
        seed in any::<u64>(),
        n in 1usize..300,
        k_frac in 0.0f64..=1.0,
    ) {
        let k = ((n as f64 * k_frac) as usize).min(n);
        let mut rng = stream_rng(seed, 3, 0);
        let s = sample_without_replacement(&mut rng, n, k);
        prop_assert_eq!(s.len(), k);
        let unique: std::collections::BTreeSet<usize> = s.iter().copied().collect();
        prop_assert_eq!(unique.len(), k);
        prop_assert!(s.iter().all(|&v| v < n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pgm_files_round_trip_exactly(
        width in 1usize..40,
        height in 1usize..40,
        fill in any::<u64>(),
    ) {
        let mut rng = stream_rng(fill, 4, 0);
        let pixels: Vec<u8> = (0..width * height).map(|_| rng.random()).collect();
        let image = GrayImage::from_pixels(width, height, pixels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        write_pgm(&path, &image).unwrap();
        let back = read_pgm(&path).unwrap();
        prop_assert_eq!(back, image);
    }

    #[test]
    fn embedding_files_round_trip_bit_for_bit(
        rows in prop::collection::vec(
            prop::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO, 4),
            1..12,
        ),
    ) {
        let embs: Vec<Embedding<f32>> = rows
            .iter()
            .enumerate()
            .map(|(i, v)| Embedding {
                image_id: format!("p{i}/000"),
                identity: format!("p{i}"),
                vector: v.clone(),
                raw_norm: i as f32,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.fide");
        save_embeddings(&path, &embs).unwrap();
        let back = load_embeddings(&path).unwrap();
        prop_assert_eq!(back.len(), embs.len());
        for (a, b) in back.iter().zip(&embs) {
            prop_assert_eq!(&a.image_id, &b.image_id);
            prop_assert_eq!(&a.identity, &b.identity);
            prop_assert_eq!(a.raw_norm.to_bits(), b.raw_norm.to_bits());
            let bits_a: Vec<u32> = a.vector.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.vector.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }
}
