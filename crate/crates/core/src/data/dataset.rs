//! On-disk dataset: `slides/slide_<id>.tnsr` (tensors `image` and `mask`)
//! plus `split.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::synth::{generate_valid_slide, SlideParams, SyntheticSlide};
use crate::data::tnsr::{read_tnsr, take_f32, write_tnsr, TnsrMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_slides: usize,
    pub val_slides: usize,
    pub test_slides: usize,
    pub annotation_ratio: f64,
    pub slide: SlideParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_slides: 100,
            val_slides: 5,
            test_slides: 20,
            annotation_ratio: 0.05,
            slide: SlideParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.slide.validate()?;
        let k = labeled_count(self.train_slides, self.annotation_ratio)?;
        if self.train_slides == k {
            return Err(Error::config("annotation_ratio leaves no unlabeled training slides"));
        }
        if self.val_slides == 0 || self.test_slides == 0 {
            return Err(Error::config("val_slides and test_slides must be positive"));
        }
        Ok(())
    }
}

/// Slide-level partition. Ids index `slides/slide_<id>.tnsr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub annotation_ratio: f64,
    pub train_labeled: Vec<u32>,
    pub train_unlabeled: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// `round(ratio · n)`, which must be at least 1.
pub fn labeled_count(n_train: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("annotation_ratio must lie in (0, 1], got {ratio}")));
    }
    let k = (ratio * n_train as f64).round() as usize;
    if k == 0 {
        return Err(Error::config(format!(
            "annotation_ratio {ratio} of {n_train} training slides labels none"
        )));
    }
    Ok(k)
}

const SPLIT_SALT: u64 = 0x5eed_5011;

/// Train ids `0..n_train`, then validation, then test. Labeled training
/// slides are a seeded random subset.
pub fn make_split(seed: u64, n_train: usize, n_val: usize, n_test: usize, ratio: f64) -> Result<DatasetSplit> {
    let k = labeled_count(n_train, ratio)?;
    let mut train: Vec<u32> = (0..n_train as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    train.shuffle(&mut rng);
    let mut labeled = train[..k].to_vec();
    let mut unlabeled = train[k..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    let v0 = n_train as u32;
    let t0 = v0 + n_val as u32;
    Ok(DatasetSplit {
        annotation_ratio: ratio,
        train_labeled: labeled,
        train_unlabeled: unlabeled,
        val: (v0..t0).collect(),
        test: (t0..t0 + n_test as u32).collect(),
    })
}

impl DatasetSplit {
    pub fn all_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.train_labeled
            .iter()
            .chain(&self.train_unlabeled)
            .chain(&self.val)
            .chain(&self.test)
            .copied()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.all_ids().collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::data("split.json subsets overlap"));
        }
        if self.train_labeled.is_empty() {
            return Err(Error::data("split.json has no labeled training slides"));
        }
        Ok(())
    }
}

/// Per-slide seed, decorrelated from neighbouring ids.
pub fn slide_seed(seed: u64, id: u32) -> u64 {
    let mut z = seed ^ (u64::from(id).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn slide_path(dir: &Path, id: u32) -> PathBuf {
    dir.join("slides").join(format!("slide_{id}.tnsr"))
}

pub fn split_path(dir: &Path) -> PathBuf {
    dir.join("split.json")
}

pub fn write_slide(dir: &Path, id: u32, slide: &SyntheticSlide) -> Result<()> {
    let mut m = TnsrMap::new();
    m.insert("image".into(), slide.image.clone().into());
    m.insert("mask".into(), slide.mask.clone().into());
    write_tnsr(slide_path(dir, id), &m)
}

/// `(image [3, H, W], mask [H, W])`.
pub fn load_slide(dir: &Path, id: u32) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let path = slide_path(dir, id);
    let mut m = read_tnsr(&path).map_err(|e| match e {
        Error::Io(io) => Error::data(format!("cannot read {}: {io}", path.display())),
        other => other,
    })?;
    let image = take_f32(&mut m, "image")?;
    let mask = take_f32(&mut m, "mask")?;
    match (image.shape(), mask.shape()) {
        ([3, h, w], [mh, mw]) if h == mh && w == mw => Ok((image, mask)),
        (a, b) => Err(Error::data(format!(
            "{}: image {a:?} and mask {b:?} do not form a slide",
            path.display()
        ))),
    }
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let path = split_path(dir);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let split: DatasetSplit = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    split.validate()?;
    Ok(split)
}

/// Writes every slide and `split.json` under `dir`. Refuses a non-empty
/// directory unless `force`.
pub fn generate_dataset(dir: &Path, seed: u64, cfg: &DatasetConfig, force: bool) -> Result<DatasetSplit> {
    cfg.validate()?;
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::config(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir.join("slides"))?;
    let split = make_split(seed, cfg.train_slides, cfg.val_slides, cfg.test_slides, cfg.annotation_ratio)?;
    let ids: Vec<u32> = split.all_ids().collect();
    ids.par_iter().try_for_each(|&id| {
        let slide = generate_valid_slide(slide_seed(seed, id), &cfg.slide)?;
        write_slide(dir, id, &slide)
    })?;
    fs::write(split_path(dir), serde_json::to_string_pretty(&split)? + "\n")?;
    Ok(split)
}
