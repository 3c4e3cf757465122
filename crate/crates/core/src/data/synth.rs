//! Synthetic stained-tissue slides with lesion masks.
//!
//! Background tissue is pale pink with smooth texture, sparse nuclei and
//! occasional pale gaps. Lesions are irregular blobs that are darker, more
//! purple and densely nucleated, with soft edges in the image and hard
//! edges in the mask. Each slide draws its own stain gains, so color alone
//! does not separate lesion from tissue across slides.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlideParams {
    pub height: usize,
    pub width: usize,
    /// Mean lesion count.
    pub lesion_rate: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Lesion color separation from tissue, 0 (none) to 1.
    pub contrast: f64,
    /// Half-width of the per-slide, per-channel stain gain.
    pub stain_jitter: f64,
    pub pixel_noise: f64,
}

impl Default for SlideParams {
    fn default() -> Self {
        SlideParams {
            height: 512,
            width: 512,
            lesion_rate: 3.0,
            radius_min: 20.0,
            radius_max: 64.0,
            contrast: 0.6,
            stain_jitter: 0.2,
            pixel_noise: 0.04,
        }
    }
}

impl SlideParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.height < 64 || self.width < 64 {
            return bad(format!(
                "slide size {}x{} is below the 64x64 minimum",
                self.height, self.width
            ));
        }
        if !(self.lesion_rate >= 0.0 && self.lesion_rate.is_finite()) {
            return bad(format!("lesion_rate must be finite and non-negative, got {}", self.lesion_rate));
        }
        let half = self.height.min(self.width) as f64 / 2.0;
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max < half) {
            return bad(format!(
                "lesion radii must satisfy 0 < min <= max < {half}, got [{}, {}]",
                self.radius_min, self.radius_max
            ));
        }
        for (name, v) in [
            ("contrast", self.contrast),
            ("stain_jitter", self.stain_jitter),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[H, W]` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub seed: u64,
    pub lesions: Vec<Lesion>,
}

impl SyntheticSlide {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.len() as f64
    }
}

/// Bilinear value noise with a lattice every `cell` pixels, in `[0, 1]`.
fn value_noise(rng: &mut impl Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random()).collect();
    let mut out = vec![0.0; h * w];
    let inv = 1.0 / cell as f32;
    for y in 0..h {
        let fy = y as f32 * inv;
        let (iy, ty) = (fy as usize, fy.fract());
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..w {
            let fx = x as f32 * inv;
            let (ix, tx) = (fx as usize, fx.fract());
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let top = at(iy, ix) + (at(iy, ix + 1) - at(iy, ix)) * sx;
            let bot = at(iy + 1, ix) + (at(iy + 1, ix + 1) - at(iy + 1, ix)) * sx;
            out[y * w + x] = top + (bot - top) * sy;
        }
    }
    out
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    /// Boundary radius in direction `theta`.
    fn boundary(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, phi))| a * ((k as f64 + 2.0) * theta + phi).cos())
            .sum();
        self.radius * (1.0 + wobble)
    }

    fn reach(&self) -> f64 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.0).sum::<f64>())
    }
}

const TISSUE: [f32; 3] = [0.93, 0.70, 0.82];
const LESION: [f32; 3] = [0.60, 0.38, 0.68];
const NUCLEUS: [f32; 3] = [0.32, 0.18, 0.46];
const GAP: [f32; 3] = [0.97, 0.95, 0.97];
const EDGE: f64 = 3.0;

/// A slide as a pure function of `(seed, params)`.
pub fn generate_slide(seed: u64, p: &SlideParams) -> Result<SyntheticSlide> {
    p.validate()?;
    let (h, w) = (p.height, p.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let count = if p.lesion_rate > 0.0 {
        Poisson::new(p.lesion_rate)
            .map_err(|e| Error::config(format!("lesion_rate: {e}")))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let radius = rng.random_range(p.radius_min..=p.radius_max);
            let harmonics = [(); 3].map(|_| (rng.random_range(0.0..0.12), rng.random_range(0.0..std::f64::consts::TAU)));
            let margin = radius * 0.5;
            Blob {
                cy: rng.random_range(margin..h as f64 - margin),
                cx: rng.random_range(margin..w as f64 - margin),
                radius,
                harmonics,
            }
        })
        .collect();

    // Lesion membership: hard mask and a soft blend weight.
    let mut mask = vec![0.0f32; h * w];
    let mut blend = vec![0.0f32; h * w];
    for b in &blobs {
        let reach = b.reach() + EDGE;
        let y0 = (b.cy - reach).floor().max(0.0) as usize;
        let y1 = ((b.cy + reach).ceil() as usize).min(h);
        let x0 = (b.cx - reach).floor().max(0.0) as usize;
        let x1 = ((b.cx + reach).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - b.cy;
                let dx = x as f64 + 0.5 - b.cx;
                let d = b.boundary(dy.atan2(dx)) - (dy * dy + dx * dx).sqrt();
                let i = y * w + x;
                if d > 0.0 {
                    mask[i] = 1.0;
                }
                blend[i] = blend[i].max((d / EDGE + 0.5).clamp(0.0, 1.0) as f32);
            }
        }
    }

    // Nuclei: dense inside lesions, sparse elsewhere.
    let mut nuclei = vec![0.0f32; h * w];
    let draws = h * w / 90;
    for _ in 0..draws {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let inside = mask[(cy as usize) * w + cx as usize] > 0.0;
        let keep: f64 = rng.random();
        if !inside && keep > 0.2 {
            continue;
        }
        let r = if inside { rng.random_range(2.0..3.5) } else { rng.random_range(1.2..2.2) };
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let v = (1.0 - (dy * dy + dx * dx).sqrt() / r).clamp(0.0, 1.0);
                let i = y * w + x;
                nuclei[i] = nuclei[i].max((2.0 * v).min(1.0) as f32);
            }
        }
    }

    let coarse = value_noise(&mut rng, h, w, 64);
    let fine = value_noise(&mut rng, h, w, 12);
    let gaps = value_noise(&mut rng, h, w, 40);
    let gains: [f32; 3] = [(); 3].map(|_| 1.0 + rng.random_range(-p.stain_jitter..=p.stain_jitter) as f32);
    let lesion_color: [f32; 3] = [0, 1, 2].map(|c| TISSUE[c] + p.contrast as f32 * (LESION[c] - TISSUE[c]));
    let noise = Normal::new(0.0, p.pixel_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let hw = h * w;
    let mut image = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        let tex = 0.82 + 0.22 * coarse[i] + 0.12 * fine[i];
        let a = blend[i];
        let gap = ((gaps[i] - 0.78) / 0.06).clamp(0.0, 1.0) * (1.0 - a);
        for c in 0..3 {
            let base = TISSUE[c] + a * (lesion_color[c] - TISSUE[c]);
            let mut v = base * tex;
            v += 0.85 * nuclei[i] * (NUCLEUS[c] - v);
            v += gap * (GAP[c] - v);
            v *= gains[c];
            if p.pixel_noise > 0.0 {
                v += noise.sample(&mut rng) as f32;
            }
            image[c * hw + i] = v.clamp(0.0, 1.0);
        }
    }

    Ok(SyntheticSlide {
        image: Tensor::from_parts(vec![3, h, w], image),
        mask: Tensor::from_parts(vec![h, w], mask),
        seed,
        lesions: blobs
            .iter()
            .map(|b| Lesion {
                cy: b.cy,
                cx: b.cx,
                radius: b.radius,
            })
            .collect(),
    })
}

/// Upper bound on the lesion share of a usable slide.
pub const MAX_FOREGROUND: f64 = 0.6;

/// Generates from `seed`, moving to the next seed until the foreground
/// fraction lies in `(0, MAX_FOREGROUND)`.
pub fn generate_valid_slide(seed: u64, p: &SlideParams) -> Result<SyntheticSlide> {
    const ATTEMPTS: u64 = 1000;
    for k in 0..ATTEMPTS {
        let slide = generate_slide(seed.wrapping_add(k), p)?;
        let f = slide.foreground_fraction();
        if f > 0.0 && f < MAX_FOREGROUND {
            return Ok(slide);
        }
    }
    Err(Error::config(format!(
        "no slide with foreground fraction in (0, {MAX_FOREGROUND}) within {ATTEMPTS} seeds; check lesion_rate and radii"
    )))
}
