//! Grayscale image datasets: in-memory representation, synthetic generation,
//! PGM storage, and conversion to training tensors.

mod pgm;
mod synth;

pub use pgm::{load_dataset, read_pgm, save_dataset, write_pgm};
pub(crate) use pgm::atomic_write;
pub use synth::{generate_splits, generate_synthetic, DatasetSplits, SplitConfig, SynthConfig};

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_IMAGE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{IdentityId, ImageId};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        Ok(Self { width, height, pixels: vec![0; width * height] })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "pixel buffer of {} does not fill {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub image_id: ImageId,
    pub identity: IdentityId,
    pub image: GrayImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FaceDataset {
    pub images: Vec<LabeledImage>,
}

impl FaceDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<IdentityId> {
        let mut ids: Vec<IdentityId> =
            self.images.iter().map(|l| l.identity.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Identity -> class index, in sorted identity order.
    pub fn class_map(&self) -> BTreeMap<IdentityId, usize> {
        self.identities()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect()
    }

    pub fn id_pairs(&self) -> Vec<(ImageId, IdentityId)> {
        self.images
            .iter()
            .map(|l| (l.image_id.clone(), l.identity.clone()))
            .collect()
    }

    /// Pack all images into one `[n, 1, h, w]` tensor with pixels scaled to
    /// `[0, 1]`.
    pub fn images_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Data("empty dataset".into()))?;
        let (h, w) = (first.image.height, first.image.width);
        let mut data = Vec::with_capacity(self.len() * h * w);
        for l in &self.images {
            if l.image.height != h || l.image.width != w {
                return Err(Error::Shape(format!(
                    "image {} is {}x{}, expected {h}x{w}",
                    l.image_id, l.image.height, l.image.width
                )));
            }
            data.extend(l.image.pixels.iter().map(|&p| crate::scalar::s64::<S>(p as f64 / 255.0)));
        }
        Tensor::new(vec![self.len(), 1, h, w], data)
    }

    /// Tensor plus class labels under the given identity -> class mapping.
    /// Every identity in the dataset must be present in the map.
    pub fn to_tensors<S: Scalar>(
        &self,
        class_map: &BTreeMap<IdentityId, usize>,
    ) -> Result<(Tensor<S>, Vec<usize>)> {
        let labels = self
            .images
            .iter()
            .map(|l| {
                class_map.get(&l.identity).copied().ok_or_else(|| {
                    Error::Data(format!("identity {} missing from class map", l.identity))
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok((self.images_tensor()?, labels))
    }

    /// Keep only images whose identity satisfies the predicate.
    pub fn filter_identities(&self, keep: impl Fn(&str) -> bool) -> FaceDataset {
        FaceDataset {
            images: self
                .images
                .iter()
                .filter(|l| keep(&l.identity))
                .cloned()
                .collect(),
        }
    }
}

/// Black out a square patch covering roughly `fraction` of the image area, at
/// a position drawn from `rng`.
pub fn apply_occlusion(image: &GrayImage, fraction: f64, rng: &mut impl Rng) -> Result<GrayImage> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("occlusion fraction {fraction} outside [0, 1]")));
    }
    let mut out = image.clone();
    let side = occlusion_side(image.height, image.width, fraction);
    if side == 0 {
        return Ok(out);
    }
    let row = rng.random_range(0..=image.height - side);
    let col = rng.random_range(0..=image.width - side);
    for r in row..row + side {
        for c in col..col + side {
            out.set(r, c, 0);
        }
    }
    Ok(out)
}

pub(crate) fn occlusion_side(height: usize, width: usize, fraction: f64) -> usize {
    if fraction <= 0.0 {
        return 0;
    }
    let side = (fraction * (height * width) as f64).sqrt().round() as usize;
    side.clamp(1, height.min(width))
}

/// Occlude every image in the dataset, one deterministic patch per image.
pub fn occlude_dataset(ds: &FaceDataset, fraction: f64, rng_seed: u64) -> Result<FaceDataset> {
    let images = ds
        .images
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut rng = stream_rng(rng_seed, STREAM_IMAGE, i as u64);
            Ok(LabeledImage {
                image_id: l.image_id.clone(),
                identity: l.identity.clone(),
                image: apply_occlusion(&l.image, fraction, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FaceDataset { images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(identity: &str, img: &str, fill: u8) -> LabeledImage {
        LabeledImage {
            image_id: format!("{identity}/{img}"),
            identity: identity.into(),
            image: GrayImage::from_pixels(4, 4, vec![fill; 16]).unwrap(),
        }
    }

    #[test]
    fn class_map_and_tensors() {
        let ds = FaceDataset {
            images: vec![tiny("b", "0", 255), tiny("a", "0", 0), tiny("b", "1", 51)],
        };
        let map = ds.class_map();
        assert_eq!(map.len(), 2);
        assert_eq!(map["a"], 0);
        assert_eq!(map["b"], 1);

        let (t, labels) = ds.to_tensors::<f32>(&map).unwrap();
        assert_eq!(t.shape(), &[3, 1, 4, 4]);
        assert_eq!(labels, vec![1, 0, 1]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[16], 0.0);
        assert!((t.data()[32] - 0.2).abs() < 1e-6);

        let empty = BTreeMap::new();
        assert!(ds.to_tensors::<f32>(&empty).is_err());
    }

    #[test]
    fn mismatched_image_sizes_are_rejected() {
        let mut odd = tiny("a", "1", 10);
        odd.image = GrayImage::from_pixels(3, 4, vec![10; 12]).unwrap();
        let ds = FaceDataset { images: vec![tiny("a", "0", 10), odd] };
        assert!(ds.images_tensor::<f32>().is_err());
    }

    #[test]
    fn occlusion_blacks_out_one_square() {
        let img = GrayImage::from_pixels(8, 8, vec![200; 64]).unwrap();
        let mut rng = stream_rng(1, STREAM_IMAGE, 0);
        let out = apply_occlusion(&img, 0.25, &mut rng).unwrap();
        let zeros = out.pixels.iter().filter(|&&p| p == 0).count();
        assert_eq!(zeros, 16, "side sqrt(0.25*64) = 4, so 16 black pixels");
        // The zeros form a contiguous square; everything else is untouched.
        let rows: Vec<usize> = (0..8)
            .filter(|&r| (0..8).any(|c| out.get(r, c) == 0))
            .collect();
        let cols: Vec<usize> = (0..8)
            .filter(|&c| (0..8).any(|r| out.get(r, c) == 0))
            .collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(cols.len(), 4);
        for r in 0..8 {
            for c in 0..8 {
                let inside = rows.contains(&r) && cols.contains(&c);
                assert_eq!(out.get(r, c), if inside { 0 } else { 200 });
            }
        }

        // Zero fraction is the identity.
        let same = apply_occlusion(&img, 0.0, &mut rng).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn occlude_dataset_is_deterministic_and_keeps_ids() {
        let ds = FaceDataset { images: vec![tiny("a", "0", 100), tiny("a", "1", 100)] };
        let a = occlude_dataset(&ds, 0.2, 9).unwrap();
        let b = occlude_dataset(&ds, 0.2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id_pairs(), ds.id_pairs());
        assert_ne!(a.images[0].image, ds.images[0].image);
        // Per-image streams: the two patches need not coincide.
        let c = occlude_dataset(&ds, 0.2, 10).unwrap();
        assert_ne!(a, c);
    }
}
