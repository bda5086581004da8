//! Synthetic heterogeneous gray-scale datasets.
//!
//! Each dataset has its own raw resolution and background gray-level
//! distribution. Exactly half the images are positive and carry one to
//! three bright disks; the classification label is disk presence and the
//! segmentation mask is the exact disk support.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nets::{HeadConfig, HeadKind};
use crate::preprocess::{DatasetManifest, ImageRecord, Splits};
use crate::seed::{derive_seed, hash_str, keyed_rng, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSignal {
    pub min_count: usize,
    pub max_count: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Added to every pixel inside a blob, in raw gray levels.
    pub intensity_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dataset_id: String,
    pub n_images: usize,
    /// `(height, width)` of the raw images.
    pub resolution: (usize, usize),
    pub gray_mean: f64,
    pub gray_std: f64,
    /// `None` for unlabelled (pre-training only) datasets.
    pub task: Option<HeadKind>,
    pub signal: BlobSignal,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        let s = &self.signal;
        ensure!(self.gray_std > 0.0, Contract, "`{}`: gray_std must be positive", self.dataset_id);
        ensure!(h >= 8 && w >= 8, Contract, "`{}`: resolution below 8×8", self.dataset_id);
        ensure!(self.n_images >= 1, Contract, "`{}`: no images", self.dataset_id);
        ensure!(
            1 <= s.min_count && s.min_count <= s.max_count,
            Contract,
            "`{}`: blob count range {}..={} invalid",
            self.dataset_id,
            s.min_count,
            s.max_count
        );
        ensure!(
            0.0 < s.min_radius && s.min_radius <= s.max_radius,
            Contract,
            "`{}`: blob radius range invalid",
            self.dataset_id
        );
        ensure!(
            s.max_radius < h.min(w) as f64 / 2.0,
            Contract,
            "`{}`: blob radius {} not below half of {}",
            self.dataset_id,
            s.max_radius,
            h.min(w)
        );
        Ok(())
    }
}

/// Pixels and blob support of one generated image.
fn draw_image(spec: &SynthSpec, index: usize, positive: bool) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = spec.resolution;
    let mut rng = keyed_rng(spec.seed, &[stream::SYNTH, hash_str(&spec.dataset_id), index as u64]);
    let noise = Normal::new(spec.gray_mean, spec.gray_std).expect("validated std");
    let mut pixels: Vec<f64> = (0..h * w).map(|_| noise.sample(&mut rng)).collect();
    let mut mask = vec![0usize; h * w];
    if positive {
        let s = &spec.signal;
        let count = rng.random_range(s.min_count..=s.max_count);
        for _ in 0..count {
            let r = rng.random_range(s.min_radius..=s.max_radius);
            let cy = rng.random_range(r..=(h as f64 - 1.0 - r));
            let cx = rng.random_range(r..=(w as f64 - 1.0 - r));
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    if dy * dy + dx * dx <= r * r {
                        mask[y * w + x] = 1;
                    }
                }
            }
        }
        for (p, &m) in pixels.iter_mut().zip(&mask) {
            if m == 1 {
                *p += s.intensity_offset;
            }
        }
    }
    for p in &mut pixels {
        *p = p.round().clamp(0.0, 255.0);
    }
    (pixels, mask)
}

/// Exactly `n / 2` positives in a keyed random arrangement.
fn balanced_labels(spec: &SynthSpec) -> Vec<bool> {
    let mut rng = keyed_rng(spec.seed, &[stream::SYNTH, hash_str(&spec.dataset_id), u64::MAX]);
    let n = spec.n_images;
    let mut labels: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    labels.shuffle(&mut rng);
    labels
}

/// Mean and population standard deviation of every pixel in `records`.
fn pixel_stats(records: &[ImageRecord]) -> (f64, f64) {
    let n: usize = records.iter().map(|r| r.pixels.numel()).sum();
    let mean = records.iter().flat_map(|r| r.pixels.data()).sum::<f64>() / n as f64;
    let var = records
        .iter()
        .flat_map(|r| r.pixels.data())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    (mean, var.sqrt().max(1e-6))
}

/// Generates the images and a manifest whose gray statistics are measured
/// on the training split.
pub fn gen_dataset(spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let (h, w) = spec.resolution;
    let records = balanced_labels(spec)
        .into_iter()
        .enumerate()
        .map(|(i, positive)| {
            let (pixels, mask) = draw_image(spec, i, positive);
            Ok(ImageRecord {
                pixels: Tensor::new(vec![1, h, w], pixels)?,
                dataset_id: spec.dataset_id.clone(),
                label: spec.task.map(|_| usize::from(positive)),
                mask: (spec.task == Some(HeadKind::Segmentation)).then_some(mask),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = spec.n_images;
    let n_train = (n * 7 / 10).max(1);
    let n_val = n / 10;
    let (gray_mean, gray_std) = pixel_stats(&records[..n_train]);
    let manifest = DatasetManifest {
        dataset_id: spec.dataset_id.clone(),
        gray_mean,
        gray_std,
        task: spec.task.map(|kind| HeadConfig { kind, num_classes: 2 }),
        records,
        splits: Splits {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        },
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Default number of images per dataset in the standard suite.
pub const SUITE_IMAGES: usize = 160;

/// The six suite specs: two classification tasks, two segmentation tasks
/// and two unlabelled pre-training sets, each with distinct raw gray-level
/// statistics and resolution.
pub fn standard_specs(master_seed: u64, n_images: usize) -> Vec<SynthSpec> {
    let seed = derive_seed(master_seed, &[stream::SYNTH]);
    let make = |id: &str, res, mean: f64, std: f64, task, offset_sd: f64, radius: (f64, f64)| SynthSpec {
        dataset_id: id.to_string(),
        n_images,
        resolution: res,
        gray_mean: mean,
        gray_std: std,
        task,
        signal: BlobSignal {
            min_count: 1,
            max_count: 3,
            min_radius: radius.0,
            max_radius: radius.1,
            intensity_offset: offset_sd * std,
        },
        seed,
    };
    use HeadKind::*;
    vec![
        make("chest_cls", (32, 32), 122.8, 18.4, Some(Classification), 0.8, (2.5, 4.5)),
        make("bone_cls", (40, 32), 90.0, 25.0, Some(Classification), 0.8, (2.5, 4.5)),
        make("lung_seg", (32, 48), 160.0, 12.0, Some(Segmentation), 2.0, (6.0, 10.0)),
        make("lesion_seg", (48, 48), 110.0, 30.0, Some(Segmentation), 2.0, (8.0, 13.0)),
        make("hand_ssl", (36, 36), 140.0, 20.0, None, 1.0, (3.0, 6.0)),
        make("skull_ssl", (40, 40), 100.0, 15.0, None, 1.0, (3.0, 6.0)),
    ]
}

pub fn standard_suite(master_seed: u64) -> Result<Vec<DatasetManifest>> {
    standard_suite_sized(master_seed, SUITE_IMAGES)
}

pub fn standard_suite_sized(master_seed: u64, n_images: usize) -> Result<Vec<DatasetManifest>> {
    standard_specs(master_seed, n_images)
        .iter()
        .map(gen_dataset)
        .collect()
}
