//! Channel (CA), spatial (SA) and sequential channel-then-spatial (CSA)
//! feature calibration.
//!
//! * CA: `F · σ(MLP(avgpoolₛ(F)) + MLP(maxpoolₛ(F)))`, one MLP shared by
//!   both pooled descriptors, gate broadcast over height and width.
//! * SA: `F · σ(Conv(avgpool_c(F) ⊕ maxpool_c(F)))`, a single-channel gate
//!   broadcast over channels.
//! * CSA: SA applied to the output of CA.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, PoolMode, Var};
use crate::params::{ConvParams, ParamSlot};
use crate::tensor::Float;

/// Which calibrator a decoder branch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Ca,
    Sa,
    Csa,
    None,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::Ca => "ca",
            AttentionKind::Sa => "sa",
            AttentionKind::Csa => "csa",
            AttentionKind::None => "none",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(AttentionKind::Ca),
            "sa" => Ok(AttentionKind::Sa),
            "csa" => Ok(AttentionKind::Csa),
            "none" => Ok(AttentionKind::None),
            other => Err(Error::config(format!(
                "unknown attention kind `{other}` (expected ca, sa, csa or none)"
            ))),
        }
    }
}

/// Shared two-layer MLP of the channel gate: `C → C/r → C` with ReLU.
#[derive(Clone, Debug)]
pub struct CaParams<P> {
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

impl<P> CaParams<P> {
    pub fn build(
        prefix: &str,
        channels: usize,
        reduction: usize,
        make: &mut impl FnMut(ParamSlot) -> Result<P>,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::config(format!(
                "channel attention: reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let slot = |name: &str, shape: Vec<usize>, fan_in: usize, is_bias: bool| ParamSlot {
            name: format!("{prefix}.{name}"),
            shape,
            fan_in,
            is_bias,
        };
        Ok(CaParams {
            mlp_w1: make(slot("mlp_w1", vec![hidden, channels], channels, false))?,
            mlp_b1: make(slot("mlp_b1", vec![hidden], channels, true))?,
            mlp_w2: make(slot("mlp_w2", vec![channels, hidden], hidden, false))?,
            mlp_b2: make(slot("mlp_b2", vec![channels], hidden, true))?,
        })
    }
}

/// `k×k` convolution from the two pooled maps to one gate channel.
#[derive(Clone, Debug)]
pub struct SaParams<P> {
    pub conv: ConvParams<P>,
}

impl<P> SaParams<P> {
    pub fn build(prefix: &str, kernel: usize, make: &mut impl FnMut(ParamSlot) -> Result<P>) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "spatial attention: kernel {kernel} must be odd"
            )));
        }
        Ok(SaParams {
            conv: ConvParams::build(&format!("{prefix}.conv"), 1, 2, kernel, make)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CsaParams<P> {
    pub ca: CaParams<P>,
    pub sa: SaParams<P>,
}

#[derive(Clone, Debug)]
pub enum AttentionParams<P> {
    Ca(CaParams<P>),
    Sa(SaParams<P>),
    Csa(CsaParams<P>),
    None,
}

impl<P> AttentionParams<P> {
    pub fn build(
        kind: AttentionKind,
        prefix: &str,
        channels: usize,
        reduction: usize,
        sa_kernel: usize,
        make: &mut impl FnMut(ParamSlot) -> Result<P>,
    ) -> Result<Self> {
        Ok(match kind {
            AttentionKind::Ca => AttentionParams::Ca(CaParams::build(&format!("{prefix}.ca"), channels, reduction, make)?),
            AttentionKind::Sa => AttentionParams::Sa(SaParams::build(&format!("{prefix}.sa"), sa_kernel, make)?),
            AttentionKind::Csa => AttentionParams::Csa(CsaParams {
                ca: CaParams::build(&format!("{prefix}.ca"), channels, reduction, make)?,
                sa: SaParams::build(&format!("{prefix}.sa"), sa_kernel, make)?,
            }),
            AttentionKind::None => AttentionParams::None,
        })
    }
}

/// The CA gate `σ(MLP(avg) + MLP(max))`, shape `[B,C,1,1]`.
pub fn ca_gate<T: Float>(g: &mut Graph<T>, f: Var, p: &CaParams<Var>) -> Result<Var> {
    let [b, c, _, _] = g.value(f).dims4()?;
    let hidden_in = g.shape(p.mlp_w1)[1];
    ensure!(
        hidden_in == c,
        "ca_forward: feature map has {c} channels but the MLP expects {hidden_in}"
    );
    let mlp = |g: &mut Graph<T>, pooled: Var| -> Result<Var> {
        let flat = g.reshape(pooled, [b, c])?;
        let h = g.linear(flat, p.mlp_w1, p.mlp_b1)?;
        let h = g.relu(h);
        g.linear(h, p.mlp_w2, p.mlp_b2)
    };
    let avg = g.spatial_pool(f, PoolMode::Avg)?;
    let max = g.spatial_pool(f, PoolMode::Max)?;
    let za = mlp(g, avg)?;
    let zm = mlp(g, max)?;
    let z = g.add(za, zm)?;
    let gate = g.sigmoid(z);
    g.reshape(gate, [b, c, 1, 1])
}

pub fn ca_forward<T: Float>(g: &mut Graph<T>, f: Var, p: &CaParams<Var>) -> Result<Var> {
    let gate = ca_gate(g, f, p)?;
    g.mul_broadcast(f, gate)
}

/// The SA gate `σ(Conv(avg_c ⊕ max_c))`, shape `[B,1,H,W]`.
pub fn sa_gate<T: Float>(g: &mut Graph<T>, f: Var, p: &SaParams<Var>) -> Result<Var> {
    let k = g.shape(p.conv.weight)[2];
    let avg = g.channel_pool(f, PoolMode::Avg)?;
    let max = g.channel_pool(f, PoolMode::Max)?;
    let both = g.concat_channels(avg, max)?;
    let z = g.conv2d(both, p.conv.weight, p.conv.bias, (k - 1) / 2, 1)?;
    Ok(g.sigmoid(z))
}

pub fn sa_forward<T: Float>(g: &mut Graph<T>, f: Var, p: &SaParams<Var>) -> Result<Var> {
    let gate = sa_gate(g, f, p)?;
    g.mul_broadcast(f, gate)
}

pub fn csa_forward<T: Float>(g: &mut Graph<T>, f: Var, p: &CsaParams<Var>) -> Result<Var> {
    let fc = ca_forward(g, f, &p.ca)?;
    sa_forward(g, fc, &p.sa)
}

pub fn attention_forward<T: Float>(g: &mut Graph<T>, f: Var, p: &AttentionParams<Var>) -> Result<Var> {
    match p {
        AttentionParams::Ca(p) => ca_forward(g, f, p),
        AttentionParams::Sa(p) => sa_forward(g, f, p),
        AttentionParams::Csa(p) => csa_forward(g, f, p),
        AttentionParams::None => Ok(f),
    }
}
