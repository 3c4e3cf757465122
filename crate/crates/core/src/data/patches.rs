//! Patch cropping, geometric augmentation and the two-pool batch sampler.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::synth::SyntheticSlide;
use crate::error::{ensure, Error, Result};
use crate::inference::window_grid;
use crate::tensor::Tensor;

/// Patch origins `(y, x)` covering an `h × w` image, row-major.
pub fn patch_origins(h: usize, w: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    ensure!(
        size <= h.min(w),
        "patch size {size} exceeds slide extent {h}x{w}"
    );
    let ys = window_grid(h, size, stride)?;
    let xs = window_grid(w, size, stride)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect())
}

/// `[C, size, size]` window of a `[C, H, W]` tensor (or `[size, size]` of
/// an `[H, W]` one).
pub fn crop(t: &Tensor<f32>, y: usize, x: usize, size: usize) -> Result<Tensor<f32>> {
    let (c, h, w, shape) = match *t.shape() {
        [h, w] => (1, h, w, vec![size, size]),
        [c, h, w] => (c, h, w, vec![c, size, size]),
        _ => return Err(Error::precondition(format!("crop: unsupported shape {:?}", t.shape()))),
    };
    ensure!(y + size <= h && x + size <= w, "crop: window outside {h}x{w}");
    let mut out = Vec::with_capacity(c * size * size);
    for ci in 0..c {
        for r in y..y + size {
            let row = (ci * h + r) * w;
            out.extend_from_slice(&t.data()[row + x..row + x + size]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Every `(image, mask)` patch of a slide on the clamped grid.
pub fn extract_patches(slide: &SyntheticSlide, size: usize, stride: usize) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let [_, h, w] = slide.image.shape() else {
        return Err(Error::precondition("slide image must be [3, H, W]"));
    };
    patch_origins(*h, *w, size, stride)?
        .into_iter()
        .map(|(y, x)| Ok((crop(&slide.image, y, x, size)?, crop(&slide.mask, y, x, size)?)))
        .collect()
}

/// One random geometric transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Geometry {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl Geometry {
    pub fn draw(rng: &mut (impl Rng + ?Sized)) -> Self {
        Geometry {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    /// Applies the flips, then the rotation, to every `s × s` plane.
    pub fn apply(self, t: &Tensor<f32>) -> Tensor<f32> {
        let s = *t.shape().last().expect("non-scalar");
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for (po, pi) in out.chunks_exact_mut(s * s).zip(d.chunks_exact(s * s)) {
            for y in 0..s {
                for x in 0..s {
                    let (mut sy, mut sx) = (y, x);
                    // Output (y, x) of a CCW turn reads input (x, s-1-y).
                    for _ in 0..self.quarter_turns {
                        (sy, sx) = (sx, s - 1 - sy);
                    }
                    if self.flip_v {
                        sy = s - 1 - sy;
                    }
                    if self.flip_h {
                        sx = s - 1 - sx;
                    }
                    po[y * s + x] = pi[sy * s + sx];
                }
            }
        }
        Tensor::from_parts(t.shape().to_vec(), out)
    }
}

/// Standard deviation of the additive image noise.
pub const AUGMENT_NOISE: f64 = 0.01;

/// Random flips, quarter turn and Gaussian pixel noise. The mask gets the
/// same geometry and no noise.
pub fn augment(
    patch: &Tensor<f32>,
    mask: Option<&Tensor<f32>>,
    rng: &mut (impl Rng + ?Sized),
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let s = *patch.shape().last().unwrap_or(&0);
    ensure!(
        patch.ndim() >= 2 && patch.shape()[patch.ndim() - 2] == s,
        "augment: patch must be square, got {:?}",
        patch.shape()
    );
    let geom = Geometry::draw(rng);
    let mut img = geom.apply(patch);
    let noise = Normal::new(0.0, AUGMENT_NOISE).expect("positive sigma");
    for v in img.data_mut() {
        *v += noise.sample(rng) as f32;
    }
    Ok((img, mask.map(|m| geom.apply(m))))
}

/// A patch position inside one of the store's slides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub slide: usize,
    pub y: usize,
    pub x: usize,
}

/// In-memory slides with the labeled and unlabeled patch pools over them.
pub struct PatchStore {
    pub size: usize,
    images: Vec<Tensor<f32>>,
    masks: Vec<Tensor<f32>>,
    pub labeled: Vec<PatchRef>,
    pub unlabeled: Vec<PatchRef>,
}

impl PatchStore {
    /// `labeled` and `unlabeled` are `(image, mask)` slides; unlabeled
    /// masks are dropped.
    pub fn new(
        labeled: Vec<(Tensor<f32>, Tensor<f32>)>,
        unlabeled: Vec<Tensor<f32>>,
        size: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut store = PatchStore {
            size,
            images: Vec::new(),
            masks: Vec::new(),
            labeled: Vec::new(),
            unlabeled: Vec::new(),
        };
        for (img, mask) in labeled {
            let refs = store.add(img, Some(mask), stride)?;
            store.labeled.extend(refs);
        }
        for img in unlabeled {
            let refs = store.add(img, None, stride)?;
            store.unlabeled.extend(refs);
        }
        Ok(store)
    }

    fn add(&mut self, image: Tensor<f32>, mask: Option<Tensor<f32>>, stride: usize) -> Result<Vec<PatchRef>> {
        let [_, h, w] = *image.shape() else {
            return Err(Error::data(format!("slide image must be [3, H, W], got {:?}", image.shape())));
        };
        let slide = self.images.len();
        let refs = patch_origins(h, w, self.size, stride)?
            .into_iter()
            .map(|(y, x)| PatchRef { slide, y, x })
            .collect();
        self.images.push(image);
        self.masks.push(mask.unwrap_or_else(|| Tensor::zeros([0])));
        Ok(refs)
    }

    pub fn image(&self, r: PatchRef) -> Result<Tensor<f32>> {
        crop(&self.images[r.slide], r.y, r.x, self.size)
    }

    pub fn mask(&self, r: PatchRef) -> Result<Tensor<f32>> {
        crop(&self.masks[r.slide], r.y, r.x, self.size)
    }
}

/// Images and masks for one step: `labeled_*` first, then `unlabeled`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[Bl, 3, s, s]`.
    pub labeled_images: Tensor<f32>,
    /// `[Bl, s, s]`.
    pub labeled_masks: Tensor<f32>,
    /// `[Bu, 3, s, s]`, or `None` when no unlabeled data was requested.
    pub unlabeled_images: Option<Tensor<f32>>,
}

/// Endless shuffled pass over `0..n`, reshuffled whenever exhausted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffledCycle {
    order: Vec<usize>,
    pos: usize,
}

impl ShuffledCycle {
    pub fn new(n: usize) -> Self {
        ShuffledCycle {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next(&mut self, rng: &mut (impl Rng + ?Sized)) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Draws labeled and unlabeled sub-batches; the two pools cycle
/// independently.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub augment: bool,
    labeled: ShuffledCycle,
    unlabeled: ShuffledCycle,
}

impl BatchSampler {
    pub fn new(store: &PatchStore, labeled_batch: usize, unlabeled_batch: usize, augment: bool) -> Result<Self> {
        if store.labeled.is_empty() {
            return Err(Error::data("labeled patch pool is empty"));
        }
        if unlabeled_batch > 0 && store.unlabeled.is_empty() {
            return Err(Error::data("unlabeled patch pool is empty"));
        }
        ensure!(labeled_batch > 0, "labeled batch size must be positive");
        Ok(BatchSampler {
            labeled_batch,
            unlabeled_batch,
            augment,
            labeled: ShuffledCycle::new(store.labeled.len()),
            unlabeled: ShuffledCycle::new(store.unlabeled.len()),
        })
    }

    /// Steps that visit every labeled patch once.
    pub fn steps_per_epoch(&self, store: &PatchStore) -> usize {
        store.labeled.len().div_ceil(self.labeled_batch)
    }

    pub fn next_labeled_index(&mut self, rng: &mut (impl Rng + ?Sized)) -> usize {
        self.labeled.next(rng)
    }

    /// The next batch; `with_unlabeled = false` skips the unlabeled pool
    /// without advancing it.
    pub fn sample(&mut self, store: &PatchStore, with_unlabeled: bool, rng: &mut (impl Rng + ?Sized)) -> Result<Batch> {
        let mut imgs = Vec::with_capacity(self.labeled_batch);
        let mut masks = Vec::with_capacity(self.labeled_batch);
        for _ in 0..self.labeled_batch {
            let r = store.labeled[self.labeled.next(rng)];
            let (img, mask) = (store.image(r)?, store.mask(r)?);
            if self.augment {
                let (i, m) = augment(&img, Some(&mask), rng)?;
                imgs.push(i);
                masks.push(m.expect("mask passed"));
            } else {
                imgs.push(img);
                masks.push(mask);
            }
        }
        let unlabeled_images = if with_unlabeled && self.unlabeled_batch > 0 {
            let mut u = Vec::with_capacity(self.unlabeled_batch);
            for _ in 0..self.unlabeled_batch {
                let r = store.unlabeled[self.unlabeled.next(rng)];
                let img = store.image(r)?;
                u.push(if self.augment { augment(&img, None, rng)?.0 } else { img });
            }
            Some(Tensor::stack(&u)?)
        } else {
            None
        };
        Ok(Batch {
            labeled_images: Tensor::stack(&imgs)?,
            labeled_masks: Tensor::stack(&masks)?,
            unlabeled_images,
        })
    }
}
