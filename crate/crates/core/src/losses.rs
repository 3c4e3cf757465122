//! Training objectives: supervised Dice + cross-entropy, cross-branch
//! distillation, and entropy of the branch-averaged prediction.
//!
//! Every function builds nodes in a [`Graph`] and returns the scalar loss
//! variable. Probability maps are `[B, C, H, W]` with the class axis second;
//! "per pixel" means per `(b, h, w)`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::mtnet::BranchOutputs;
use crate::tensor::{Float, Tensor};

/// Lower clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;
/// Smoothing term of the Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Which loss terms a run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Soft cross-branch distillation plus average-prediction entropy.
    #[default]
    Cdma,
    /// Soft distillation only.
    Cdkd,
    /// Distillation towards hard (argmax) pseudo labels.
    Argmax,
    /// Soft distillation at temperature 1.
    T1,
    /// Soft distillation plus per-branch entropy.
    UmPrime,
    /// Average-prediction entropy only.
    NoCdkd,
    /// Labeled data only.
    Sl,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Cdma,
        Variant::Cdkd,
        Variant::Argmax,
        Variant::T1,
        Variant::UmPrime,
        Variant::NoCdkd,
        Variant::Sl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Cdma => "cdma",
            Variant::Cdkd => "cdkd",
            Variant::Argmax => "argmax",
            Variant::T1 => "t1",
            Variant::UmPrime => "um-prime",
            Variant::NoCdkd => "no-cdkd",
            Variant::Sl => "sl",
        }
    }

    pub fn uses_distillation(self) -> bool {
        !matches!(self, Variant::NoCdkd | Variant::Sl)
    }

    pub fn uses_entropy(self) -> bool {
        matches!(self, Variant::Cdma | Variant::UmPrime | Variant::NoCdkd)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.label()).collect();
                Error::config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Argument order of the distillation divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `Σ teacher · ln(teacher / student)`.
    #[default]
    TeacherStudent,
    /// `Σ student · ln(student / teacher)`.
    StudentTeacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub variant: Variant,
    pub kl_direction: KlDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            temperature: 10.0,
            variant: Variant::Cdma,
            kl_direction: KlDirection::TeacherStudent,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "loss.temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Whether any term needs the unlabeled sub-batch.
    pub fn needs_unlabeled(&self) -> bool {
        (self.variant.uses_distillation() && self.lambda1 > 0.0) || (self.variant.uses_entropy() && self.lambda2 > 0.0)
    }
}

fn pixels<T: Float>(g: &Graph<T>, p: Var) -> Result<usize> {
    let [b, _, h, w] = g.value(p).dims4()?;
    Ok(b * h * w)
}

fn one_minus<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    let neg = g.scale(x, -T::one());
    g.add_scalar(neg, T::one())
}

fn mean_of<T: Float>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    ensure!(!xs.is_empty(), "mean of no terms");
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, T::of(1.0 / xs.len() as f64)))
}

fn sum_of<T: Float>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    ensure!(!xs.is_empty(), "sum of no terms");
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

/// Per-pixel softmax of `z / t`. At `t == 1` this is exactly
/// [`Graph::softmax_channel`].
pub fn t_softmax<T: Float>(g: &mut Graph<T>, z: Var, t: f64) -> Result<Var> {
    ensure!(t > 0.0 && t.is_finite(), "t_softmax: temperature {t} must be positive");
    if t == 1.0 {
        return g.softmax_channel(z);
    }
    let zt = g.scale(z, T::of(1.0 / t));
    g.softmax_channel(zt)
}

/// Mean over pixels of `Σ_c target · ln(target / student)`; `target`
/// is detached.
pub fn kl_map<T: Float>(g: &mut Graph<T>, target: Var, student: Var) -> Result<Var> {
    ensure!(
        g.shape(target) == g.shape(student),
        "kl_map: shapes {:?} and {:?} differ",
        g.shape(target),
        g.shape(student)
    );
    let n = pixels(g, student)?;
    let t = g.detach(target);
    let lt = g.log_clamped(t, T::of(LOG_EPS));
    let ls = g.log_clamped(student, T::of(LOG_EPS));
    let d = g.sub(lt, ls)?;
    let td = g.mul(t, d)?;
    let s = g.sum(td);
    Ok(g.scale(s, T::of(1.0 / n as f64)))
}

/// `KL(student ‖ teacher)` with the teacher detached.
fn kl_reversed<T: Float>(g: &mut Graph<T>, teacher: Var, student: Var) -> Result<Var> {
    let n = pixels(g, student)?;
    let t = g.detach(teacher);
    let lt = g.log_clamped(t, T::of(LOG_EPS));
    let ls = g.log_clamped(student, T::of(LOG_EPS));
    let d = g.sub(ls, lt)?;
    let sd = g.mul(student, d)?;
    let s = g.sum(sd);
    Ok(g.scale(s, T::of(1.0 / n as f64)))
}

/// A loss assembled from one term per student branch.
#[derive(Clone, Debug)]
pub struct BranchTerms {
    /// Mean of `per_branch`.
    pub total: Var,
    pub per_branch: Vec<Var>,
}

fn per_student<T: Float>(
    g: &mut Graph<T>,
    n: usize,
    mut pair: impl FnMut(&mut Graph<T>, usize, usize) -> Result<Var>,
) -> Result<BranchTerms> {
    if n < 2 {
        return Err(Error::config(format!(
            "cross-branch distillation needs at least 2 branches, got {n}"
        )));
    }
    let mut per_branch = Vec::with_capacity(n);
    for student in 0..n {
        let mut terms = Vec::with_capacity(n - 1);
        for teacher in (0..n).filter(|&t| t != student) {
            terms.push(pair(g, teacher, student)?);
        }
        per_branch.push(sum_of(g, &terms)?);
    }
    let total = mean_of(g, &per_branch)?;
    Ok(BranchTerms { total, per_branch })
}

/// Every branch learns from the temperature-softened, detached outputs of
/// all other branches.
pub fn cdkd_loss<T: Float>(g: &mut Graph<T>, logits: &[Var], t: f64, direction: KlDirection) -> Result<BranchTerms> {
    let soft = logits
        .iter()
        .map(|&z| t_softmax(g, z, t))
        .collect::<Result<Vec<_>>>()?;
    per_student(g, logits.len(), |g, teacher, student| match direction {
        KlDirection::TeacherStudent => kl_map(g, soft[teacher], soft[student]),
        KlDirection::StudentTeacher => kl_reversed(g, soft[teacher], soft[student]),
    })
}

/// Per-pixel argmax class of a probability map, ties to the lower index.
pub fn argmax_labels<T: Float>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = p.dims4()?;
    let hw = h * w;
    let d = p.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for i in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(bi * c + k) * hw + i] > d[(bi * c + best) * hw + i] {
                    best = k;
                }
            }
            out.push(T::of(best as f64));
        }
    }
    Ok(Tensor::from_parts(vec![b, h, w], out))
}

/// Each branch is trained by cross-entropy against the hard argmax labels
/// of every other branch.
pub fn argmax_pseudo_loss<T: Float>(g: &mut Graph<T>, probs: &[Var]) -> Result<BranchTerms> {
    let targets = probs
        .iter()
        .map(|&p| {
            let c = g.shape(p)[1];
            one_hot(&argmax_labels(g.value(p))?, c)
        })
        .collect::<Result<Vec<_>>>()?;
    per_student(g, probs.len(), |g, teacher, student| {
        let y = g.constant(targets[teacher].clone());
        ce_loss(g, probs[student], y)
    })
}

/// Mean per-pixel entropy of a probability map.
pub fn entropy<T: Float>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let n = pixels(g, p)?;
    let lp = g.log_clamped(p, T::of(LOG_EPS));
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp);
    Ok(g.scale(s, T::of(-1.0 / n as f64)))
}

/// Entropy of the branch-averaged prediction.
pub fn um_loss<T: Float>(g: &mut Graph<T>, probs: &[Var]) -> Result<Var> {
    let avg = mean_of(g, probs)?;
    entropy(g, avg)
}

/// Mean of the per-branch entropies.
pub fn um_prime_loss<T: Float>(g: &mut Graph<T>, probs: &[Var]) -> Result<Var> {
    let terms = probs.iter().map(|&p| entropy(g, p)).collect::<Result<Vec<_>>>()?;
    mean_of(g, &terms)
}

/// `[B, H, W]` class labels to a `[B, C, H, W]` one-hot map.
pub fn one_hot<T: Float>(labels: &Tensor<T>, classes: usize) -> Result<Tensor<T>> {
    ensure!(labels.ndim() == 3, "one_hot: labels must be [B, H, W], got {:?}", labels.shape());
    let (b, h, w) = (labels.shape()[0], labels.shape()[1], labels.shape()[2]);
    let hw = h * w;
    let mut out = vec![T::zero(); b * classes * hw];
    for (i, &v) in labels.data().iter().enumerate() {
        let k = v.as_f64();
        ensure!(
            k >= 0.0 && k < classes as f64 && k.fract() == 0.0,
            "label {k} outside [0, {classes})"
        );
        let (bi, px) = (i / hw, i % hw);
        out[(bi * classes + k as usize) * hw + px] = T::one();
    }
    Ok(Tensor::from_parts(vec![b, classes, h, w], out))
}

fn check_one_hot<T: Float>(y: &Tensor<T>) -> Result<()> {
    let [b, c, h, w] = y.dims4()?;
    let hw = h * w;
    let d = y.data();
    for bi in 0..b {
        for i in 0..hw {
            let mut total = 0.0;
            for k in 0..c {
                let v = d[(bi * c + k) * hw + i].as_f64();
                ensure!(v == 0.0 || v == 1.0, "mask is not one-hot: value {v}");
                total += v;
            }
            ensure!(total == 1.0, "mask is not one-hot: {total} classes set at one pixel");
        }
    }
    Ok(())
}

/// `1 − (2·Σ P·G + s) / (Σ P + Σ G + s)` over the foreground channel.
pub fn dice_loss<T: Float>(g: &mut Graph<T>, p: Var, y: Var) -> Result<Var> {
    ensure!(
        g.shape(p) == g.shape(y),
        "dice_loss: prediction {:?} and mask {:?} differ",
        g.shape(p),
        g.shape(y)
    );
    check_one_hot(g.value(y))?;
    let c = g.shape(p)[1];
    ensure!(c >= 2, "dice_loss: needs a foreground channel");
    let pf = g.slice_channels(p, 1, 1)?;
    let yf = g.slice_channels(y, 1, 1)?;
    let py = g.mul(pf, yf)?;
    let inter = g.sum(py);
    let num = g.scale(inter, T::of(2.0));
    let num = g.add_scalar(num, T::of(DICE_SMOOTH));
    let sum_p = g.sum(pf);
    let sum_y = g.value(yf).sum();
    let den = g.add_scalar(sum_p, sum_y + T::of(DICE_SMOOTH));
    let ratio = g.div(num, den)?;
    Ok(one_minus(g, ratio))
}

/// Mean over pixels of `−ln P_true`.
pub fn ce_loss<T: Float>(g: &mut Graph<T>, p: Var, y: Var) -> Result<Var> {
    ensure!(
        g.shape(p) == g.shape(y),
        "ce_loss: prediction {:?} and mask {:?} differ",
        g.shape(p),
        g.shape(y)
    );
    let n = pixels(g, p)?;
    let lp = g.log_clamped(p, T::of(LOG_EPS));
    let ylp = g.mul(y, lp)?;
    let s = g.sum(ylp);
    Ok(g.scale(s, T::of(-1.0 / n as f64)))
}

/// Mean over branches of Dice + cross-entropy.
pub fn sup_loss<T: Float>(g: &mut Graph<T>, probs: &[Var], y: Var) -> Result<BranchTerms> {
    let mut per_branch = Vec::with_capacity(probs.len());
    for &p in probs {
        let d = dice_loss(g, p, y)?;
        let c = ce_loss(g, p, y)?;
        per_branch.push(g.add(d, c)?);
    }
    let total = mean_of(g, &per_branch)?;
    Ok(BranchTerms { total, per_branch })
}

/// Scalar values of one step's loss terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup: f64,
    pub cdkd: f64,
    pub um: f64,
    pub total: f64,
    pub sup_per_branch: Vec<f64>,
    pub cdkd_per_branch: Vec<f64>,
}

pub struct TotalLoss {
    pub total: Var,
    pub report: LossReport,
}

/// `sup + λ1·cdkd + λ2·um`, with the distillation and entropy terms over
/// `all` (labeled and unlabeled together) and the supervised term over
/// `labeled` alone. `all` may be `None` when the configuration needs no
/// unlabeled terms.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    labeled: &BranchOutputs,
    masks: &Tensor<T>,
    all: Option<&BranchOutputs>,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let classes = g.shape(labeled.probs[0])[1];
    let y = g.constant(one_hot(masks, classes)?);
    let sup = sup_loss(g, &labeled.probs, y)?;
    let value = |g: &Graph<T>, v: Var| g.value(v).item().as_f64();
    let mut report = LossReport {
        sup: value(g, sup.total),
        sup_per_branch: sup.per_branch.iter().map(|&v| value(g, v)).collect(),
        ..LossReport::default()
    };
    let mut total = sup.total;

    let wants_kd = cfg.variant.uses_distillation();
    let wants_um = cfg.variant.uses_entropy();
    if wants_kd || wants_um {
        let all = all.ok_or_else(|| Error::precondition("total_loss: variant needs the combined batch outputs"))?;
        if wants_kd {
            let terms = match cfg.variant {
                Variant::Argmax => argmax_pseudo_loss(g, &all.probs)?,
                Variant::T1 => cdkd_loss(g, &all.logits, 1.0, cfg.kl_direction)?,
                _ => cdkd_loss(g, &all.logits, cfg.temperature, cfg.kl_direction)?,
            };
            report.cdkd = value(g, terms.total);
            report.cdkd_per_branch = terms.per_branch.iter().map(|&v| value(g, v)).collect();
            let weighted = g.scale(terms.total, T::of(cfg.lambda1));
            total = g.add(total, weighted)?;
        }
        if wants_um {
            let um = match cfg.variant {
                Variant::UmPrime => um_prime_loss(g, &all.probs)?,
                _ => um_loss(g, &all.probs)?,
            };
            report.um = value(g, um);
            let weighted = g.scale(um, T::of(cfg.lambda2));
            total = g.add(total, weighted)?;
        }
    }
    report.total = value(g, total);
    Ok(TotalLoss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, grad_check_many, separated_uniform, DEFAULT_STEP};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A `[1, C, 1, n]` map from per-pixel class vectors.
    fn pixels_map(px: &[&[f64]]) -> Tensor<f64> {
        let c = px[0].len();
        let n = px.len();
        let mut d = vec![0.0; c * n];
        for (i, v) in px.iter().enumerate() {
            for k in 0..c {
                d[k * n + i] = v[k];
            }
        }
        Tensor::new([1, c, 1, n], d).unwrap()
    }

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn t_softmax_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(pixels_map(&[&[2.0, 0.0], &[1.0, 1.0]]));
        let p1 = t_softmax(&mut g, z, 1.0).unwrap();
        let p10 = t_softmax(&mut g, z, 10.0).unwrap();
        let d1 = g.value(p1).data().to_vec();
        let d10 = g.value(p10).data().to_vec();
        assert_abs_diff_eq!(d1[0], 0.880797, epsilon = 1e-6);
        assert_abs_diff_eq!(d1[2], 0.119203, epsilon = 1e-6);
        assert_abs_diff_eq!(d10[0], 0.549834, epsilon = 1e-6);
        assert_abs_diff_eq!(d10[2], 0.450166, epsilon = 1e-6);
        assert_eq!(d1[1], 0.5);
        assert_eq!(d10[1], 0.5);
        assert!(t_softmax(&mut g, z, 0.0).is_err());
        assert!(t_softmax(&mut g, z, -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(pixels_map(&[&[0.5, 0.5]]));
        let s = g.constant(pixels_map(&[&[0.75, 0.25]]));
        let kl = kl_map(&mut g, t, s).unwrap();
        assert_abs_diff_eq!(scalar(&g, kl), 0.143841, epsilon = 1e-6);
        let same = kl_map(&mut g, t, t).unwrap();
        assert_eq!(scalar(&g, same), 0.0);
        let bad = g.constant(Tensor::full([1, 2, 1, 2], 0.5));
        assert!(kl_map(&mut g, t, bad).is_err());
    }

    #[test]
    fn um_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(pixels_map(&[&[1.0, 0.0]]));
        let b = g.constant(pixels_map(&[&[0.0, 1.0]]));
        let um = um_loss(&mut g, &[a, b, a]).unwrap();
        assert_abs_diff_eq!(scalar(&g, um), 0.636514, epsilon = 1e-6);
        let prime = um_prime_loss(&mut g, &[a, b, a]).unwrap();
        assert!(scalar(&g, prime) < 1e-6);
        let agree = um_loss(&mut g, &[a, a, a]).unwrap();
        assert!(scalar(&g, agree) < 1e-6);
        let u = g.constant(pixels_map(&[&[0.5, 0.5]]));
        let uu = um_loss(&mut g, &[u, u, u]).unwrap();
        let up = um_prime_loss(&mut g, &[u, u, u]).unwrap();
        assert_abs_diff_eq!(scalar(&g, uu), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(scalar(&g, uu), scalar(&g, up), epsilon = 1e-15);
    }

    #[test]
    fn entropy_gradient_vanishes_at_one_hot() {
        let mut g = Graph::<f64>::new();
        let z = g.param(pixels_map(&[&[30.0, -30.0], &[-30.0, 30.0]]));
        let p = g.softmax_channel(z).unwrap();
        let um = um_loss(&mut g, &[p, p]).unwrap();
        g.backward(um).unwrap();
        assert!(g.grad(z).unwrap().data().iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn dice_and_ce_examples() {
        let mut g = Graph::<f64>::new();
        let y = g.constant(one_hot(&Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(), 2).unwrap());
        let dl = dice_loss(&mut g, y, y).unwrap();
        assert!(scalar(&g, dl) < 1e-6);
        let half = g.constant(Tensor::full([1, 2, 2, 2], 0.5));
        let dh = dice_loss(&mut g, half, y).unwrap();
        assert_abs_diff_eq!(scalar(&g, dh), 0.5, epsilon = 1e-5);
        let ch = ce_loss(&mut g, half, y).unwrap();
        assert_abs_diff_eq!(scalar(&g, ch), std::f64::consts::LN_2, epsilon = 1e-12);
        let cp = ce_loss(&mut g, y, y).unwrap();
        assert_eq!(scalar(&g, cp), 0.0);

        let bg = g.constant(one_hot(&Tensor::zeros([1, 2, 2]), 2).unwrap());
        let pb = g.constant(pixels_map(&[&[1.0, 0.0][..]; 4]).reshape([1, 2, 2, 2]).unwrap());
        let db = dice_loss(&mut g, pb, bg).unwrap();
        assert!(scalar(&g, db) < 1e-6);

        let tiny = g.constant(pixels_map(&[&[0.0, 1.0]]));
        let yt = g.constant(pixels_map(&[&[1.0, 0.0]]));
        let ct = ce_loss(&mut g, tiny, yt).unwrap();
        assert_abs_diff_eq!(scalar(&g, ct), 18.420681, epsilon = 1e-6);

        let not_one_hot = g.constant(Tensor::full([1, 2, 2, 2], 0.5));
        assert!(dice_loss(&mut g, half, not_one_hot).is_err());
        assert!(one_hot(&Tensor::<f64>::full([1, 1, 1], 2.0), 2).is_err());
    }

    #[test]
    fn argmax_labels_break_ties_low() {
        let p = pixels_map(&[&[0.9, 0.1], &[0.5, 0.5], &[0.2, 0.8]]);
        assert_eq!(argmax_labels(&p).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn argmax_loss_vanishes_on_agreeing_one_hot_branches() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(pixels_map(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let l = argmax_pseudo_loss(&mut g, &[a, a, a]).unwrap();
        assert!(scalar(&g, l.total) < 1e-6);
    }

    #[test]
    fn cdkd_requires_two_branches_and_vanishes_on_agreement() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(pixels_map(&[&[1.0, -2.0], &[0.3, 0.1]]));
        assert!(matches!(
            cdkd_loss(&mut g, &[z], 10.0, KlDirection::TeacherStudent),
            Err(Error::Config(_))
        ));
        let l = cdkd_loss(&mut g, &[z, z, z], 10.0, KlDirection::TeacherStudent).unwrap();
        assert_eq!(scalar(&g, l.total), 0.0);
    }

    #[test]
    fn dual_cdkd_is_symmetric_pairwise_distillation() {
        let mut g = Graph::<f64>::new();
        let za = g.constant(pixels_map(&[&[1.0, -2.0], &[0.3, 0.1]]));
        let zb = g.constant(pixels_map(&[&[-0.5, 0.7], &[2.0, 0.0]]));
        let l = cdkd_loss(&mut g, &[za, zb], 2.0, KlDirection::TeacherStudent).unwrap();
        let pa = t_softmax(&mut g, za, 2.0).unwrap();
        let pb = t_softmax(&mut g, zb, 2.0).unwrap();
        let ab = kl_map(&mut g, pa, pb).unwrap();
        let ba = kl_map(&mut g, pb, pa).unwrap();
        assert_abs_diff_eq!(scalar(&g, l.total), 0.5 * (scalar(&g, ab) + scalar(&g, ba)), epsilon = 1e-15);
    }

    #[test]
    fn cdkd_student_terms_only_reach_the_student() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for direction in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
            for student in 0..3 {
                let mut g = Graph::<f64>::new();
                let zs: Vec<Var> = (0..3)
                    .map(|_| g.param(separated_uniform(&[2, 2, 3, 3], -2.0, 2.0, &mut rng)))
                    .collect();
                let l = cdkd_loss(&mut g, &zs, 10.0, direction).unwrap();
                g.backward(l.per_branch[student]).unwrap();
                for (b, &z) in zs.iter().enumerate() {
                    let grad = g.grad(z);
                    if b == student {
                        assert!(grad.unwrap().data().iter().any(|&v| v != 0.0));
                    } else {
                        assert!(grad.is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
                    }
                }
            }
        }
    }

    #[test]
    fn sup_loss_is_branch_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let y = g.constant(one_hot(&Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap(), 2).unwrap());
        let ps: Vec<Var> = (0..3)
            .map(|_| {
                let z = g.constant(separated_uniform(&[1, 2, 2, 2], -2.0, 2.0, &mut rng));
                g.softmax_channel(z).unwrap()
            })
            .collect();
        let a = sup_loss(&mut g, &ps, y).unwrap();
        let b = sup_loss(&mut g, &[ps[2], ps[0], ps[1]], y).unwrap();
        assert_abs_diff_eq!(scalar(&g, a.total), scalar(&g, b.total), epsilon = 1e-15);
        let single = sup_loss(&mut g, &ps[..1], y).unwrap();
        let tripled = sup_loss(&mut g, &[ps[0]; 3], y).unwrap();
        assert_abs_diff_eq!(scalar(&g, single.total), scalar(&g, tripled.total), epsilon = 1e-15);
    }

    #[test]
    fn every_loss_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z3: Vec<Tensor<f64>> = (0..3)
            .map(|_| separated_uniform(&[1, 2, 2, 3], -2.0, 2.0, &mut rng))
            .collect();
        let y = one_hot(&Tensor::new([1, 2, 3], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap(), 2).unwrap();
        type LossFn = fn(&mut Graph<f64>, &[Var], Var) -> Result<Var>;
        let cases: Vec<(&str, LossFn)> = vec![
            ("um", |g, p, _| um_loss(g, p)),
            ("um_prime", |g, p, _| um_prime_loss(g, p)),
            ("dice", |g, p, y| dice_loss(g, p[0], y)),
            ("ce", |g, p, y| ce_loss(g, p[0], y)),
            ("sup", |g, p, y| Ok(sup_loss(g, p, y)?.total)),
        ];
        for (name, f) in cases {
            let err = grad_check_many(
                |g, v| {
                    let ps = v.iter().map(|&z| g.softmax_channel(z)).collect::<Result<Vec<_>>>()?;
                    let yv = g.constant(y.clone());
                    f(g, &ps, yv)
                },
                &z3,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
        // Teachers are detached, so only the student's own term is
        // differentiable end to end; teachers enter as constants.
        let teachers = &z3[1..];
        let with_teachers = |g: &mut Graph<f64>, student: Var| -> Vec<Var> {
            let mut zs = vec![student];
            zs.extend(teachers.iter().map(|t| g.constant(t.clone())));
            zs
        };
        for direction in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
            let err = grad_check(
                |g, z| {
                    let zs = with_teachers(g, z);
                    Ok(cdkd_loss(g, &zs, 10.0, direction)?.per_branch[0])
                },
                &z3[0],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "cdkd {direction:?}: {err}");
        }
        let err = grad_check(
            |g, z| {
                let zs = with_teachers(g, z);
                let ps = zs.iter().map(|&z| g.softmax_channel(z)).collect::<Result<Vec<_>>>()?;
                Ok(argmax_pseudo_loss(g, &ps)?.per_branch[0])
            },
            &z3[0],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "argmax: {err}");
        let err = grad_check(
            |g, z| {
                let t = g.constant(pixels_map(&[&[0.2, 0.8], &[0.6, 0.4], &[0.5, 0.5], &[0.9, 0.1], &[0.3, 0.7], &[0.1, 0.9]]).reshape([1, 2, 2, 3])?);
                let p = g.softmax_channel(z)?;
                kl_map(g, t, p)
            },
            &z3[0],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "kl: {err}");
        let w = separated_uniform(&[1, 2, 2, 3], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, z| {
                let p = t_softmax(g, z, 10.0)?;
                let wv = g.constant(w.clone());
                let pw = g.mul(p, wv)?;
                Ok(g.sum(pw))
            },
            &z3[0],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "t_softmax: {err}");
    }

    #[test]
    fn total_is_the_weighted_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in Variant::ALL {
            let mut g = Graph::<f64>::new();
            let logits: Vec<Var> = (0..3)
                .map(|_| g.param(separated_uniform(&[4, 2, 3, 3], -2.0, 2.0, &mut rng)))
                .collect();
            let probs = logits.iter().map(|&z| g.softmax_channel(z).unwrap()).collect();
            let all = BranchOutputs {
                branches: vec![0, 1, 2],
                logits,
                probs,
            };
            let labeled = all.slice_batch(&mut g, 0, 2).unwrap();
            let masks = Tensor::from_fn([2, 3, 3], |i| (i % 3 == 0) as u8 as f64);
            let cfg = LossConfig {
                variant,
                ..LossConfig::default()
            };
            let t = total_loss(&mut g, &labeled, &masks, Some(&all), &cfg).unwrap();
            let r = &t.report;
            assert!((r.total - (r.sup + 0.1 * r.cdkd + 0.1 * r.um)).abs() < 1e-12, "{variant:?}");
            assert_eq!(r.cdkd == 0.0, !variant.uses_distillation(), "{variant:?}");
            assert_eq!(r.um == 0.0, !variant.uses_entropy(), "{variant:?}");
        }
    }

    #[test]
    fn arithmetic_of_the_combination() {
        let mut g = Graph::<f64>::new();
        let sup = g.constant(Tensor::scalar(0.6));
        let cdkd = g.constant(Tensor::scalar(0.3));
        let um = g.constant(Tensor::scalar(0.5));
        let a = g.scale(cdkd, 0.1);
        let b = g.scale(um, 0.1);
        let s = g.add(sup, a).unwrap();
        let s = g.add(s, b).unwrap();
        assert_abs_diff_eq!(scalar(&g, s), 0.68, epsilon = 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.label()));
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
