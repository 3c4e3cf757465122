//! Shared-encoder, multi-decoder segmentation network.
//!
//! Inputs are shifted and scaled by fixed constants. The encoder is a
//! stack of levels, each two `3×3` conv + ReLU layers, separated by `2×2`
//! max-pooling. Every decoder branch receives the
//! bottleneck feature through its own dropout + feature-noise
//! perturbation, then walks back up: nearest ×2 upsampling, concatenation
//! with the encoder skip, a fusion conv, a second conv, and the branch's
//! attention block. A `1×1` head maps to class logits.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionKind, AttentionParams};
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ConvParams, ParamSlot, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Feature width per encoder level, shallowest first.
    pub channels: Vec<usize>,
    pub classes: usize,
    pub branch_kinds: Vec<AttentionKind>,
    pub reduction: usize,
    pub sa_kernel: usize,
    /// Inputs enter the encoder as `(x − input_center) · input_gain`.
    pub input_center: f64,
    pub input_gain: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            channels: vec![16, 32, 64],
            classes: 2,
            branch_kinds: vec![AttentionKind::Ca, AttentionKind::Sa, AttentionKind::Csa],
            reduction: 4,
            sa_kernel: 7,
            input_center: 0.5,
            input_gain: 4.0,
        }
    }
}

impl ArchConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn branches(&self) -> usize {
        self.branch_kinds.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.in_channels == 0 {
            return bad("arch.in_channels must be positive".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!(
                "arch.channels must be a non-empty list of positive widths, got {:?}",
                self.channels
            ));
        }
        if self.classes < 2 {
            return bad(format!("arch.classes must be at least 2, got {}", self.classes));
        }
        if self.branch_kinds.is_empty() {
            return bad("arch.branch_kinds must name at least one branch".into());
        }
        if !(self.input_center.is_finite() && self.input_gain.is_finite() && self.input_gain > 0.0) {
            return bad(format!(
                "arch.input_center must be finite and arch.input_gain positive, got {} and {}",
                self.input_center, self.input_gain
            ));
        }
        if self.sa_kernel.is_multiple_of(2) {
            return bad(format!("arch.sa_kernel must be odd, got {}", self.sa_kernel));
        }
        let needs_ca = self
            .branch_kinds
            .iter()
            .any(|k| matches!(k, AttentionKind::Ca | AttentionKind::Csa));
        if needs_ca {
            for &c in &self.channels[..self.levels() - 1] {
                if self.reduction == 0 || c % self.reduction != 0 {
                    return bad(format!(
                        "arch.reduction {} must divide every decoder width (found {c})",
                        self.reduction
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Dropout and feature noise applied to the bottleneck entering each decoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    pub dropout_rate: f64,
    pub noise_amplitude: f64,
    /// Set by the caller: training forwards only.
    #[serde(skip)]
    pub enabled: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            dropout_rate: 0.5,
            noise_amplitude: 0.3,
            enabled: false,
        }
    }
}

impl PerturbationConfig {
    pub fn off() -> Self {
        PerturbationConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn training(self) -> Self {
        PerturbationConfig { enabled: true, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "perturbation.dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(Error::config(format!(
                "perturbation.noise_amplitude must be finite and non-negative, got {}",
                self.noise_amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel<P> {
    pub conv1: ConvParams<P>,
    pub conv2: ConvParams<P>,
}

#[derive(Clone, Debug)]
pub struct DecoderLevel<P> {
    pub fuse: ConvParams<P>,
    pub conv: ConvParams<P>,
    pub attention: AttentionParams<P>,
}

#[derive(Clone, Debug)]
pub struct BranchLayout<P> {
    pub kind: AttentionKind,
    /// Deepest decoder level first.
    pub levels: Vec<DecoderLevel<P>>,
    pub head: ConvParams<P>,
}

/// Every parameter of the network, as whatever `P` the builder produced
/// (slots, initialized tensors or graph variables).
#[derive(Clone, Debug)]
pub struct MtNetLayout<P> {
    pub encoder: Vec<EncoderLevel<P>>,
    pub branches: Vec<BranchLayout<P>>,
}

pub fn encoder_prefix() -> &'static str {
    "encoder."
}

pub fn branch_prefix(branch: usize) -> String {
    format!("branch{branch}.")
}

impl<P> MtNetLayout<P> {
    pub fn build(arch: &ArchConfig, make: &mut impl FnMut(ParamSlot) -> Result<P>) -> Result<Self> {
        arch.validate()?;
        let ch = &arch.channels;
        let mut encoder = Vec::with_capacity(ch.len());
        let mut cin = arch.in_channels;
        for (l, &c) in ch.iter().enumerate() {
            encoder.push(EncoderLevel {
                conv1: ConvParams::build(&format!("encoder.{l}.conv1"), c, cin, 3, make)?,
                conv2: ConvParams::build(&format!("encoder.{l}.conv2"), c, c, 3, make)?,
            });
            cin = c;
        }
        let mut branches = Vec::with_capacity(arch.branches());
        for (b, &kind) in arch.branch_kinds.iter().enumerate() {
            let mut levels = Vec::new();
            for l in (0..ch.len() - 1).rev() {
                let p = format!("branch{b}.{l}");
                levels.push(DecoderLevel {
                    fuse: ConvParams::build(&format!("{p}.fuse"), ch[l], ch[l + 1] + ch[l], 3, make)?,
                    conv: ConvParams::build(&format!("{p}.conv"), ch[l], ch[l], 3, make)?,
                    attention: AttentionParams::build(kind, &p, ch[l], arch.reduction, arch.sa_kernel, make)?,
                });
            }
            let head = ConvParams::build(&format!("branch{b}.head"), arch.classes, ch[0], 1, make)?;
            branches.push(BranchLayout { kind, levels, head });
        }
        Ok(MtNetLayout { encoder, branches })
    }
}

/// Parameter slots in build order.
pub fn parameter_slots(arch: &ArchConfig) -> Result<Vec<ParamSlot>> {
    let mut slots = Vec::new();
    MtNetLayout::build(arch, &mut |s| {
        slots.push(s);
        Ok(())
    })?;
    Ok(slots)
}

/// Fresh parameters, a pure function of `(arch, seed)`.
pub fn init_mtnet<T: Float>(arch: &ArchConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for slot in parameter_slots(arch)? {
        let t = slot.init(&mut rng);
        store.insert(slot.name, t);
    }
    Ok(store)
}

/// Checks that `store` holds exactly the tensors `arch` describes.
pub fn check_params<T: Float>(arch: &ArchConfig, store: &ParamStore<T>) -> Result<()> {
    let slots = parameter_slots(arch)?;
    if slots.len() != store.len() {
        return Err(Error::config(format!(
            "architecture expects {} parameter tensors, found {}",
            slots.len(),
            store.len()
        )));
    }
    for s in slots {
        match store.get(&s.name) {
            None => return Err(Error::config(format!("missing parameter `{}`", s.name))),
            Some(t) if t.shape() != s.shape.as_slice() => {
                return Err(Error::config(format!(
                    "parameter `{}` has shape {:?}, architecture expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Names of one branch's decoder and head parameters.
pub fn branch_parameters<T: Float>(arch: &ArchConfig, store: &ParamStore<T>, branch: usize) -> Result<Vec<String>> {
    if branch >= arch.branches() {
        return Err(Error::config(format!(
            "branch {branch} does not exist (network has {})",
            arch.branches()
        )));
    }
    let prefix = branch_prefix(branch);
    Ok(store.names().filter(|n| n.starts_with(&prefix)).map(String::from).collect())
}

pub fn encoder_parameters<T: Float>(store: &ParamStore<T>) -> Vec<String> {
    store
        .names()
        .filter(|n| n.starts_with(encoder_prefix()))
        .map(String::from)
        .collect()
}

/// Logits and standard-softmax probabilities for the evaluated branches.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    /// Branch index of each entry.
    pub branches: Vec<usize>,
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

impl BranchOutputs {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Restricts every entry to a batch range.
    pub fn slice_batch<T: Float>(&self, g: &mut Graph<T>, start: usize, len: usize) -> Result<BranchOutputs> {
        let mut out = BranchOutputs {
            branches: self.branches.clone(),
            logits: Vec::new(),
            probs: Vec::new(),
        };
        for (&z, &p) in self.logits.iter().zip(&self.probs) {
            out.logits.push(g.slice_batch(z, start, len)?);
            out.probs.push(g.slice_batch(p, start, len)?);
        }
        Ok(out)
    }
}

fn conv_relu<T: Float>(g: &mut Graph<T>, x: Var, p: &ConvParams<Var>) -> Result<Var> {
    let y = g.conv2d(x, p.weight, p.bias, 1, 1)?;
    Ok(g.relu(y))
}

/// One forward pass: the encoder once, then each requested branch.
pub fn mtnet_forward<T: Float, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    bound: &Bound,
    x: Var,
    branches: &[usize],
    perturb: &PerturbationConfig,
    rng: &mut R,
) -> Result<BranchOutputs> {
    let net = MtNetLayout::build(arch, &mut |s| bound.var(&s.name))?;
    let [_, cin, h, w] = g.value(x).dims4()?;
    ensure!(
        cin == arch.in_channels,
        "mtnet_forward: input has {cin} channels, network expects {}",
        arch.in_channels
    );
    let m = arch.size_multiple();
    ensure!(
        h % m == 0 && w % m == 0,
        "mtnet_forward: input {h}x{w} is not divisible by {m}"
    );
    for &b in branches {
        ensure!(b < arch.branches(), "mtnet_forward: branch {b} does not exist");
    }

    let mut skips = Vec::with_capacity(arch.levels());
    let shifted = g.add_scalar(x, T::of(-arch.input_center));
    let mut hcur = g.scale(shifted, T::of(arch.input_gain));
    for (l, level) in net.encoder.iter().enumerate() {
        if l > 0 {
            hcur = g.max_pool2d(hcur, 2, 2)?;
        }
        hcur = conv_relu(g, hcur, &level.conv1)?;
        hcur = conv_relu(g, hcur, &level.conv2)?;
        skips.push(hcur);
    }
    let bottleneck = hcur;

    let mut out = BranchOutputs {
        branches: branches.to_vec(),
        logits: Vec::with_capacity(branches.len()),
        probs: Vec::with_capacity(branches.len()),
    };
    for &b in branches {
        let branch = &net.branches[b];
        let mut d = g.dropout(bottleneck, perturb.dropout_rate, rng, perturb.enabled)?;
        d = g.feature_noise(d, perturb.noise_amplitude, rng, perturb.enabled)?;
        for (level, skip) in branch.levels.iter().zip(skips.iter().rev().skip(1)) {
            let up = g.upsample_nearest(d, 2)?;
            let cat = g.concat_channels(up, *skip)?;
            d = conv_relu(g, cat, &level.fuse)?;
            d = conv_relu(g, d, &level.conv)?;
            d = attention_forward(g, d, &level.attention)?;
        }
        let z = g.conv2d(d, branch.head.weight, branch.head.bias, 0, 1)?;
        let p = g.softmax_channel(z)?;
        out.logits.push(z);
        out.probs.push(p);
    }
    Ok(out)
}

/// Eval-mode forward of frozen parameters on a batch of images; returns
/// the probability maps of `branches`.
pub fn predict<T: Float>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    images: Tensor<T>,
    branches: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(images);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = mtnet_forward(&mut g, arch, &bound, x, branches, &PerturbationConfig::off(), &mut rng)?;
    Ok(out.probs.iter().map(|&p| g.value(p).clone()).collect())
}
