//! Synthetic segmentation datasets and their on-disk format.
//!
//! Images hold one to three non-overlapping shapes of a single foreground
//! class on a noisy gray background. Each class has its own hue and stripe
//! texture, so every class is linearly separable from the background in
//! color space when the noise is zero.

pub mod netpbm;
mod store;
mod synth;

pub use store::{dataset_digest, load_dataset, save_dataset, Manifest, ManifestImage, Provenance};
pub use synth::{class_color, generate_dataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which foreground ids are held out as novel: the `fold`-th of
/// `num_folds` contiguous id blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub num_folds: usize,
    pub fold: usize,
}

impl SplitSpec {
    /// Returns (base ids, novel ids) for classes `1..=num_classes`.
    pub fn resolve(&self, num_classes: usize) -> Result<(Vec<u8>, Vec<u8>)> {
        if self.num_folds < 2 || self.fold >= self.num_folds || num_classes % self.num_folds != 0 {
            return Err(Error::Config(format!(
                "split fold {} of {} does not partition {num_classes} classes",
                self.fold, self.num_folds
            )));
        }
        let per = num_classes / self.num_folds;
        let novel: Vec<u8> = (self.fold * per + 1..=(self.fold + 1) * per).map(|k| k as u8).collect();
        let base = (1..=num_classes as u8).filter(|k| !novel.contains(k)).collect();
        Ok((base, novel))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_shape_size: usize,
    pub max_shape_size: usize,
    /// Gaussian pixel noise, in units of full intensity.
    pub noise_sigma: f64,
    /// Relative brightness swing of the per-class stripe texture.
    pub texture_amplitude: f64,
    /// Training images per base class. Novel classes get none.
    pub train_images_per_class: usize,
    /// Held-out images per class, base and novel alike.
    pub val_images_per_class: usize,
    pub split: SplitSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 8,
            min_shapes: 1,
            max_shapes: 3,
            min_shape_size: 7,
            max_shape_size: 12,
            noise_sigma: 0.04,
            texture_amplitude: 0.2,
            train_images_per_class: 50,
            val_images_per_class: 24,
            split: SplitSpec { num_folds: 4, fold: 0 },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > 254 {
            return bad(format!("num_classes {} must be in 1..=254", self.num_classes));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad(format!("shape count range {}..={}", self.min_shapes, self.max_shapes));
        }
        if self.min_shape_size < 3 || self.min_shape_size > self.max_shape_size || self.max_shape_size > self.image_size {
            return bad(format!(
                "shape size range {}..={} for image size {}",
                self.min_shape_size, self.max_shape_size, self.image_size
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.texture_amplitude) {
            return bad("noise_sigma must be >= 0 and texture_amplitude in [0, 1)".into());
        }
        if self.val_images_per_class == 0 {
            return bad("val_images_per_class must be positive".into());
        }
        self.split.resolve(self.num_classes)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB bytes, row-major.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    /// One class id per pixel; 0 is background.
    pub data: Vec<u8>,
}

impl Mask {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn contains(&self, id: u8) -> bool {
        self.data.contains(&id)
    }

    /// Sorted foreground ids present in the mask.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        self.data.iter().for_each(|&v| seen[v as usize] = true);
        (1..=255u8).filter(|&k| seen[k as usize]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
}

impl Sample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        image_tensor(&self.image)
    }
}

/// Maps RGB bytes to a `[3, H, W]` tensor with values in `[-1, 1]`.
pub fn image_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let hw = img.width * img.height;
    Tensor::from_fn([3, img.height, img.width], |i| {
        let (c, p) = (i / hw, i % hw);
        T::lit(img.data[p * 3 + c] as f64 / 127.5 - 1.0)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub base_ids: Vec<u8>,
    pub novel_ids: Vec<u8>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn subset(&self, which: Subset) -> &[Sample] {
        match which {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
        }
    }

    /// Indices of `which` images whose mask contains `class_id`.
    pub fn images_with(&self, which: Subset, class_id: u8) -> Vec<usize> {
        self.subset(which)
            .iter()
            .enumerate()
            .filter(|(_, s)| s.mask.contains(class_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Fails if any training mask contains a held-out id.
    pub fn check_train_split(&self) -> Result<()> {
        for (i, s) in self.train.iter().enumerate() {
            if let Some(k) = s.mask.classes().into_iter().find(|k| self.novel_ids.contains(k)) {
                return Err(Error::Label(format!("training image {i} contains novel class {k}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_resolution() {
        let s = SplitSpec { num_folds: 4, fold: 1 };
        let (base, novel) = s.resolve(8).unwrap();
        assert_eq!(novel, vec![3, 4]);
        assert_eq!(base, vec![1, 2, 5, 6, 7, 8]);
        assert!(SplitSpec { num_folds: 3, fold: 0 }.resolve(8).is_err());
        assert!(SplitSpec { num_folds: 4, fold: 4 }.resolve(8).is_err());
    }

    #[test]
    fn image_tensor_range() {
        let img = RgbImage { width: 1, height: 1, data: vec![0, 255, 51] };
        let t: Tensor<f64> = image_tensor(&img);
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
    }
}
