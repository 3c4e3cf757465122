//! Sliding-window slide segmentation and overlap metrics.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::AttentionKind;
use crate::data::dataset::load_slide;
use crate::data::image::write_ppm;
use crate::error::{ensure, Error, Result};
use crate::mtnet::{predict, ArchConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Window origins along one axis: multiples of `stride` while the window
/// fits, then one final window flush with the far edge if the regular
/// ones stop short of it.
pub fn window_grid(extent: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    ensure!(window >= 1, "window_grid: window must be positive");
    ensure!(stride >= 1, "window_grid: stride must be positive");
    ensure!(window <= extent, "window_grid: window {window} exceeds extent {extent}");
    let mut starts: Vec<usize> = (0..=extent - window).step_by(stride).collect();
    let last = extent - window;
    if *starts.last().expect("0 is always a start") != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Which branch output(s) to read at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchSelector {
    /// First branch of this kind; the last branch if none has it.
    Kind(AttentionKind),
    /// Mean of all branch probabilities.
    Ensemble,
    Index(usize),
}

impl Default for BranchSelector {
    fn default() -> Self {
        BranchSelector::Kind(AttentionKind::Csa)
    }
}

impl BranchSelector {
    pub fn resolve(self, arch: &ArchConfig) -> Result<Vec<usize>> {
        let n = arch.branches();
        match self {
            BranchSelector::Kind(k) => Ok(vec![arch.branch_kinds.iter().position(|&b| b == k).unwrap_or(n - 1)]),
            BranchSelector::Ensemble => Ok((0..n).collect()),
            BranchSelector::Index(i) if i < n => Ok(vec![i]),
            BranchSelector::Index(i) => Err(Error::config(format!("branch {i} does not exist (network has {n})"))),
        }
    }
}

impl fmt::Display for BranchSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchSelector::Kind(k) => f.write_str(k.label()),
            BranchSelector::Ensemble => f.write_str("ensemble"),
            BranchSelector::Index(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for BranchSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("ensemble") {
            return Ok(BranchSelector::Ensemble);
        }
        if let Ok(i) = s.parse::<usize>() {
            return Ok(BranchSelector::Index(i));
        }
        s.parse::<AttentionKind>()
            .map(BranchSelector::Kind)
            .map_err(|_| Error::config(format!("unknown branch `{s}` (expected csa, ca, sa, none, ensemble or an index)")))
    }
}

impl Serialize for BranchSelector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BranchSelector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub window: usize,
    pub stride: usize,
    pub branch: BranchSelector,
    pub threshold: f64,
    /// Windows per forward pass.
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            window: 128,
            stride: 96,
            branch: BranchSelector::default(),
            threshold: 0.5,
            batch: 8,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        let m = arch.size_multiple();
        if self.window == 0 || !self.window.is_multiple_of(m) {
            return Err(Error::config(format!(
                "inference.window {} must be a positive multiple of {m}",
                self.window
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("inference.stride must be positive"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::config(format!(
                "inference.threshold must lie in [0, 1), got {}",
                self.threshold
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("inference.batch must be positive"));
        }
        self.branch.resolve(arch).map(|_| ())
    }
}

/// Overlap-averaged class probabilities of a whole slide.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchedPrediction {
    /// `[C, H, W]`.
    pub prob: Tensor<f32>,
    /// Windows covering each pixel, row-major `H × W`.
    pub coverage: Vec<u32>,
}

/// Eval-mode sliding-window segmentation of a `[3, H, W]` image. Each
/// window contributes the mean probability of `branches`; overlapping
/// contributions are averaged.
pub fn segment_slide(
    arch: &ArchConfig,
    params: &ParamStore<f32>,
    image: &Tensor<f32>,
    cfg: &InferenceConfig,
    branches: &[usize],
) -> Result<StitchedPrediction> {
    let [c_in, h, w] = *image.shape() else {
        return Err(Error::precondition(format!("segment_slide: image must be [3, H, W], got {:?}", image.shape())));
    };
    ensure!(!branches.is_empty(), "segment_slide: no branch selected");
    for (name, t) in params.iter() {
        if !t.all_finite() {
            return Err(Error::Numeric(format!("parameter `{name}` holds non-finite values")));
        }
    }
    let win = cfg.window.min(h).min(w);
    ensure!(
        win % arch.size_multiple() == 0,
        "segment_slide: window {win} not divisible by {}",
        arch.size_multiple()
    );
    let ys = window_grid(h, win, cfg.stride)?;
    let xs = window_grid(w, win, cfg.stride)?;
    let origins: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();

    let classes = arch.classes;
    let hw = h * w;
    let mut sum = vec![0.0f32; classes * hw];
    let mut coverage = vec![0u32; hw];
    let inv_branches = 1.0 / branches.len() as f32;
    let plane = win * win;
    for chunk in origins.chunks(cfg.batch) {
        let mut data = Vec::with_capacity(chunk.len() * c_in * plane);
        for &(y, x) in chunk {
            for c in 0..c_in {
                for r in y..y + win {
                    let row = (c * h + r) * w;
                    data.extend_from_slice(&image.data()[row + x..row + x + win]);
                }
            }
        }
        let batch = Tensor::new([chunk.len(), c_in, win, win], data)?;
        let probs = predict(arch, params, batch, branches)?;
        for (k, &(y, x)) in chunk.iter().enumerate() {
            for r in 0..win {
                for col in 0..win {
                    coverage[(y + r) * w + x + col] += 1;
                }
            }
            for p in &probs {
                let pd = p.data();
                for c in 0..classes {
                    let src = &pd[(k * classes + c) * plane..(k * classes + c + 1) * plane];
                    for r in 0..win {
                        let dst = &mut sum[c * hw + (y + r) * w + x..c * hw + (y + r) * w + x + win];
                        for (d, &s) in dst.iter_mut().zip(&src[r * win..(r + 1) * win]) {
                            *d += s * inv_branches;
                        }
                    }
                }
            }
        }
    }
    for c in 0..classes {
        for (v, &n) in sum[c * hw..(c + 1) * hw].iter_mut().zip(&coverage) {
            *v /= n as f32;
        }
    }
    Ok(StitchedPrediction {
        prob: Tensor::new([classes, h, w], sum)?,
        coverage,
    })
}

/// Foreground where the class-1 probability strictly exceeds `threshold`.
pub fn binarize(pred: &StitchedPrediction, threshold: f64) -> Result<Tensor<f32>> {
    let [c, h, w] = *pred.prob.shape() else {
        return Err(Error::precondition("binarize: prediction must be [C, H, W]"));
    };
    ensure!(c >= 2, "binarize: needs a foreground channel");
    let fg = &pred.prob.data()[h * w..2 * h * w];
    let t = threshold as f32;
    Tensor::new([h, w], fg.iter().map(|&p| if p > t { 1.0 } else { 0.0 }).collect())
}

fn overlap_counts(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(u64, u64, u64)> {
    ensure!(
        pred.shape() == gt.shape(),
        "metric: prediction {:?} and ground truth {:?} differ",
        pred.shape(),
        gt.shape()
    );
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        ensure!((p == 0.0 || p == 1.0) && (g == 0.0 || g == 1.0), "metric: masks must be binary");
        let (p, g) = (p == 1.0, g == 1.0);
        a += p as u64;
        b += g as u64;
        both += (p && g) as u64;
    }
    Ok((a, b, both))
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dsc(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    let (a, b, both) = overlap_counts(pred, gt)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn ji(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    let (a, b, both) = overlap_counts(pred, gt)?;
    let union = a + b - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMetrics {
    pub slide_id: u32,
    pub dsc: f64,
    pub ji: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub per_slide: Vec<SlideMetrics>,
    pub mean_dsc: f64,
    pub std_dsc: f64,
    pub mean_ji: f64,
    pub std_ji: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SplitMetrics {
    pub fn from_slides(per_slide: Vec<SlideMetrics>) -> Result<Self> {
        ensure!(!per_slide.is_empty(), "no slides to aggregate");
        let d: Vec<f64> = per_slide.iter().map(|m| m.dsc).collect();
        let j: Vec<f64> = per_slide.iter().map(|m| m.ji).collect();
        let (mean_dsc, std_dsc) = mean_std(&d);
        let (mean_ji, std_ji) = mean_std(&j);
        Ok(SplitMetrics {
            per_slide,
            mean_dsc,
            std_dsc,
            mean_ji,
            std_ji,
        })
    }

    /// `slide_id,dsc,ji` rows, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slide_id,dsc,ji\n");
        for m in &self.per_slide {
            s += &format!("{},{},{}\n", m.slide_id, m.dsc, m.ji);
        }
        s += &format!("mean,{},{}\n", self.mean_dsc, self.mean_ji);
        s += &format!("std,{},{}\n", self.std_dsc, self.std_ji);
        s
    }
}

/// Image luminance at half strength with the prediction added to red and
/// the ground truth to green.
pub fn overlay(image: &Tensor<f32>, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::precondition("overlay: image must be [3, H, W]"));
    };
    ensure!(
        pred.shape() == [h, w] && gt.shape() == [h, w],
        "overlay: mask shapes must be [{h}, {w}]"
    );
    let hw = h * w;
    let d = image.data();
    let mut out = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        let lum = 0.5 * (d[i] + d[hw + i] + d[2 * hw + i]) / 3.0;
        out[i] = lum + 0.5 * pred.data()[i];
        out[hw + i] = lum + 0.5 * gt.data()[i];
        out[2 * hw + i] = lum;
    }
    Tensor::new([3, h, w], out)
}

/// Segments every slide in `ids` and scores it against its mask. With
/// `overlay_dir`, also writes `slide_<id>.ppm` overlays there.
pub fn evaluate_split(
    arch: &ArchConfig,
    params: &ParamStore<f32>,
    dataset_dir: &Path,
    ids: &[u32],
    cfg: &InferenceConfig,
    overlay_dir: Option<&Path>,
) -> Result<SplitMetrics> {
    let branches = cfg.branch.resolve(arch)?;
    if let Some(dir) = overlay_dir {
        fs::create_dir_all(dir)?;
    }
    let mut per_slide = Vec::with_capacity(ids.len());
    for &id in ids {
        let (image, gt) = load_slide(dataset_dir, id)?;
        let pred = segment_slide(arch, params, &image, cfg, &branches)?;
        let mask = binarize(&pred, cfg.threshold)?;
        per_slide.push(SlideMetrics {
            slide_id: id,
            dsc: dsc(&mask, &gt)?,
            ji: ji(&mask, &gt)?,
        });
        if let Some(dir) = overlay_dir {
            write_ppm(dir.join(format!("slide_{id}.ppm")), &overlay(&image, &mask, &gt)?)?;
        }
    }
    SplitMetrics::from_slides(per_slide)
}
