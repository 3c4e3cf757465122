//! Run configuration: every hyperparameter, ablation switch and path.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::inference::{BranchSelector, InferenceConfig};
use crate::losses::{LossConfig, Variant};
use crate::mtnet::{ArchConfig, PerturbationConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub size: usize,
    pub stride: usize,
    pub augment: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            size: 64,
            stride: 64,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 150,
            decay_every: 50,
            decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// `lr · decay_factor^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("optimizer.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("optimizer.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("optimizer.epochs must be positive".into());
        }
        if self.decay_every == 0 {
            return bad("optimizer.decay_every must be positive".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("optimizer.decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { labeled: 8, unlabeled: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub data: DatasetConfig,
    pub patch: PatchConfig,
    pub arch: ArchConfig,
    pub perturbation: PerturbationConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch: BatchConfig,
    pub inference: InferenceConfig,
    /// Validate on at most this many validation slides; all when `None`.
    pub val_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            data: DatasetConfig::default(),
            patch: PatchConfig::default(),
            arch: ArchConfig::default(),
            perturbation: PerturbationConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch: BatchConfig::default(),
            inference: InferenceConfig::default(),
            val_limit: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate()?;
        self.perturbation.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.inference.validate(&self.arch)?;
        let m = self.arch.size_multiple();
        let p = &self.patch;
        if p.size == 0 || !p.size.is_multiple_of(m) {
            return Err(Error::config(format!(
                "patch.size {} must be a positive multiple of {m} for {} levels",
                p.size,
                self.arch.levels()
            )));
        }
        if p.stride == 0 {
            return Err(Error::config("patch.stride must be positive"));
        }
        let side = self.data.slide.height.min(self.data.slide.width);
        if p.size > side {
            return Err(Error::config(format!("patch.size {} exceeds the slide side {side}", p.size)));
        }
        if self.batch.labeled == 0 {
            return Err(Error::config("batch.labeled must be positive"));
        }
        if self.loss.needs_unlabeled() && self.batch.unlabeled == 0 {
            return Err(Error::config(format!(
                "loss variant `{}` needs unlabeled data but batch.unlabeled is 0",
                self.loss.variant.label()
            )));
        }
        if self.loss.variant.uses_distillation() && self.loss.lambda1 > 0.0 && self.arch.branches() < 2 {
            return Err(Error::config("distillation needs at least two branches"));
        }
        if self.val_limit == Some(0) {
            return Err(Error::config("val_limit must be positive when set"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Named starting points; `desk` is the default.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        match name {
            "desk" => {}
            "paper" => {
                c.patch = PatchConfig {
                    size: 256,
                    stride: 256,
                    augment: true,
                };
                c.inference.window = 256;
                c.inference.stride = 192;
                c.data.slide.height = 1024;
                c.data.slide.width = 1024;
            }
            "fast" => {
                c.arch.channels = vec![8, 16, 32];
                c.arch.reduction = 2;
                c.optimizer = OptimizerConfig {
                    lr: 0.01,
                    epochs: 10,
                    decay_every: 7,
                    ..OptimizerConfig::default()
                };
                c.val_limit = Some(3);
            }
            "smoke" => {
                c.data = DatasetConfig {
                    train_slides: 10,
                    val_slides: 2,
                    test_slides: 2,
                    annotation_ratio: 0.2,
                    ..DatasetConfig::default()
                };
                c.data.slide.height = 128;
                c.data.slide.width = 128;
                c.data.slide.radius_min = 10.0;
                c.data.slide.radius_max = 24.0;
                c.patch.size = 32;
                c.patch.stride = 32;
                c.arch.channels = vec![4, 8];
                c.arch.reduction = 2;
                c.arch.sa_kernel = 3;
                c.batch = BatchConfig { labeled: 4, unlabeled: 4 };
                c.optimizer.lr = 0.01;
                c.optimizer.epochs = 2;
                c.inference.window = 64;
                c.inference.stride = 48;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (expected desk, paper, fast or smoke)"
                )))
            }
        }
        Ok(c)
    }

    /// The configuration for one ablation arm, derived from `self`.
    pub fn with_arm(&self, arm: Arm) -> RunConfig {
        let mut c = self.clone();
        let kinds = |v: &[AttentionKind]| v.to_vec();
        use AttentionKind::{Ca, Csa, None as NoAtt, Sa};
        match arm {
            Arm::Baseline => c.loss.variant = Variant::Sl,
            Arm::Argmax => c.loss.variant = Variant::Argmax,
            Arm::T1 => c.loss.variant = Variant::T1,
            Arm::Cdkd => c.loss.variant = Variant::Cdkd,
            Arm::CdkdUmPrime => c.loss.variant = Variant::UmPrime,
            Arm::Cdma => c.loss.variant = Variant::Cdma,
            Arm::Dual => c.arch.branch_kinds = kinds(&[Ca, Sa]),
            Arm::Csa3 => c.arch.branch_kinds = kinds(&[Csa, Csa, Csa]),
            Arm::NoAtten => c.arch.branch_kinds = kinds(&[NoAtt, NoAtt, NoAtt]),
            Arm::Ensb => c.inference.branch = BranchSelector::Ensemble,
        }
        if arm.is_network_variant() {
            c.loss.variant = Variant::Cdma;
        }
        c.output_dir = self.output_dir.join(arm.label());
        c
    }
}

/// Ablation arms. Network variants train with the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Baseline,
    Argmax,
    T1,
    Cdkd,
    CdkdUmPrime,
    Cdma,
    Dual,
    Csa3,
    NoAtten,
    Ensb,
}

impl Arm {
    pub const ALL: [Arm; 10] = [
        Arm::Baseline,
        Arm::Argmax,
        Arm::T1,
        Arm::Cdkd,
        Arm::CdkdUmPrime,
        Arm::Cdma,
        Arm::Dual,
        Arm::Csa3,
        Arm::NoAtten,
        Arm::Ensb,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Argmax => "argmax",
            Arm::T1 => "t1",
            Arm::Cdkd => "cdkd",
            Arm::CdkdUmPrime => "cdkd-um-prime",
            Arm::Cdma => "cdma",
            Arm::Dual => "dual",
            Arm::Csa3 => "csa3",
            Arm::NoAtten => "no-atten",
            Arm::Ensb => "ensb",
        }
    }

    pub fn is_network_variant(self) -> bool {
        matches!(self, Arm::Dual | Arm::Csa3 | Arm::NoAtten | Arm::Ensb)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::config(format!("unknown arm `{s}`")))
    }
}
