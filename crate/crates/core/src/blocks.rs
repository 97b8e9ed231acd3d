//! Hybrid state-space block (HSB), squeeze-excitation gates and the
//! cross-stage state-space group (CSG), plus closed-form MAC counts.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cross_scan::{Ss2d, Ss2dConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamBuilder, ParamId, Real, Var};

/// How the channel gates combine with the depthwise shortcut when both
/// attention and residual are on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `gates(F_up) ⊙ DWConv(F)`: `F_up` contributes only through the gates.
    #[default]
    Gate,
    /// `F_up + gates(F_up) ⊙ DWConv(F)`.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsbConfig {
    /// `Conv_down` maps `C → C / reduction`.
    pub reduction: usize,
    pub dw_kernel: usize,
    pub local_conv: bool,
    pub residual: bool,
    pub attention: bool,
    pub attention_mode: AttentionMode,
    /// Hidden width of the gate network is `max(C / se_reduction, 1)`.
    pub se_reduction: usize,
    pub ln_eps: f64,
}

impl Default for HsbConfig {
    fn default() -> Self {
        Self {
            reduction: 2,
            dw_kernel: 3,
            local_conv: true,
            residual: true,
            attention: true,
            attention_mode: AttentionMode::Gate,
            se_reduction: 4,
            ln_eps: 1e-5,
        }
    }
}

impl HsbConfig {
    /// The four ablation rows: none, LC, LC+Res, LC+Res+Attn.
    pub fn ablation_rows() -> [HsbConfig; 4] {
        let base = HsbConfig::default();
        let row = |lc, res, attn| HsbConfig {
            local_conv: lc,
            residual: res,
            attention: attn,
            ..base.clone()
        };
        [
            row(false, false, false),
            row(true, false, false),
            row(true, true, false),
            row(true, true, true),
        ]
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 || !channels.is_multiple_of(self.reduction) || channels < self.reduction {
            return Err(Error::Config(format!(
                "hsb channels {channels} not divisible by reduction {}",
                self.reduction
            )));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hsb dw_kernel must be odd, got {}",
                self.dw_kernel
            )));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("hsb se_reduction must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("hsb ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsgConfig {
    /// When off, the HSB stack runs on all channels without a split.
    pub enabled: bool,
    /// Fraction of channels routed through the HSB stack.
    pub split: f64,
    pub hsb_layers: usize,
}

impl Default for CsgConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            split: 0.5,
            hsb_layers: 2,
        }
    }
}

impl CsgConfig {
    /// Channels of the HSB branch.
    pub fn branch_channels(&self, channels: usize) -> Result<usize> {
        let b = channels as f64 * self.split;
        if !(self.split > 0.0 && self.split <= 1.0) || (b - b.round()).abs() > 1e-9 || b < 1.0 {
            return Err(Error::Config(format!(
                "csg split {} of {channels} channels is not a positive integer count",
                self.split
            )));
        }
        Ok(b.round() as usize)
    }
}

/// Squeeze-excitation gates: `sigmoid(W2 · silu(W1 · GAP(F) + b1) + b2)`.
/// SiLU keeps a narrow hidden layer from dying, which would cut every
/// upstream parameter off from the gradient.
#[derive(Clone, Debug)]
pub struct SeAttention {
    pub channels: usize,
    pub hidden: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SeAttention {
    pub fn build(pb: &mut ParamBuilder, channels: usize, se_reduction: usize) -> Self {
        let hidden = (channels / se_reduction).max(1);
        Self {
            channels,
            hidden,
            w1: pb.add("fc1.weight", &[hidden, channels], Init::He(channels)),
            b1: pb.add("fc1.bias", &[hidden], Init::Zeros),
            w2: pb.add("fc2.weight", &[channels, hidden], Init::FanIn(hidden)),
            b2: pb.add("fc2.bias", &[channels], Init::Zeros),
        }
    }

    /// Gates `[1, C]` in `(0, 1)` for a map `[1, C, H, W]`.
    pub fn gates<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let pooled = g.global_average_pool(x)?;
        let h = g.linear(pooled, g.param(self.w1), Some(g.param(self.b1)))?;
        let h = g.silu(h);
        let z = g.linear(h, g.param(self.w2), Some(g.param(self.b2)))?;
        Ok(g.sigmoid(z))
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    padding: usize,
    groups: usize,
}

impl Conv {
    fn pointwise(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        pb.scoped(name, |pb| Self {
            w: pb.add("weight", &[cout, cin, 1, 1], Init::FanIn(cin)),
            b: pb.add("bias", &[cout], Init::Zeros),
            padding: 0,
            groups: 1,
        })
    }

    fn depthwise(pb: &mut ParamBuilder, name: &str, c: usize, k: usize) -> Self {
        pb.scoped(name, |pb| Self {
            w: pb.add("weight", &[c, 1, k, k], Init::FanIn(k * k)),
            b: pb.add("bias", &[c], Init::Zeros),
            padding: k / 2,
            groups: c,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, g.param(self.w), Some(g.param(self.b)), 1, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn build(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        pb.scoped(name, |pb| Self {
            gamma: pb.add("gamma", &[c], Init::Const(1.0)),
            beta: pb.add("beta", &[c], Init::Zeros),
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta), T::c(eps))
    }
}

/// Hybrid state-space block on `C` channels.
#[derive(Clone, Debug)]
pub struct Hsb {
    pub channels: usize,
    pub cfg: HsbConfig,
    down: Conv,
    norm_scan: Norm,
    pub ss2d: Ss2d,
    local: Option<(Norm, Conv)>,
    up: Conv,
    shortcut: Option<Conv>,
    pub se: Option<SeAttention>,
}

impl Hsb {
    pub fn build(pb: &mut ParamBuilder, channels: usize, cfg: &HsbConfig, ssm: &Ss2dConfig) -> Result<Self> {
        cfg.validate(channels)?;
        ssm.validate()?;
        let inner = channels / cfg.reduction;
        let down = Conv::pointwise(pb, "conv_down", channels, inner);
        let norm_scan = Norm::build(pb, "norm_scan", inner);
        let ss2d = pb.scoped("ss2d", |pb| Ss2d::build(pb, inner, ssm));
        let local = cfg.local_conv.then(|| {
            (
                Norm::build(pb, "norm_local", inner),
                Conv::depthwise(pb, "local_conv", inner, cfg.dw_kernel),
            )
        });
        let up = Conv::pointwise(pb, "conv_up", inner, channels);
        let shortcut = cfg
            .residual
            .then(|| Conv::depthwise(pb, "shortcut", channels, cfg.dw_kernel));
        let se = cfg
            .attention
            .then(|| pb.scoped("se", |pb| SeAttention::build(pb, channels, cfg.se_reduction)));
        Ok(Self {
            channels,
            cfg: cfg.clone(),
            down,
            norm_scan,
            ss2d,
            local,
            up,
            shortcut,
            se,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let [_, c, _, _] = g.value(f).nchw()?;
        if c != self.channels {
            return Err(Error::contract(
                "hsb",
                format!("expected {} input channels, got {c}", self.channels),
            ));
        }
        let eps = self.cfg.ln_eps;
        let fd = self.down.forward(g, f)?;
        let n = self.norm_scan.forward(g, fd, eps)?;
        let s = self.ss2d.forward(g, n)?;
        let mut fd = g.add(s, fd)?;
        if let Some((norm, conv)) = &self.local {
            let n = norm.forward(g, fd, eps)?;
            let l = conv.forward(g, n)?;
            fd = g.add(l, fd)?;
        }
        let fu = self.up.forward(g, fd)?;
        let gates = match &self.se {
            Some(se) => Some(se.gates(g, fu)?),
            None => None,
        };
        match (gates, &self.shortcut) {
            (Some(gates), Some(sc)) => {
                let d = sc.forward(g, f)?;
                let gated = g.mul_channel(d, gates)?;
                match self.cfg.attention_mode {
                    AttentionMode::Gate => Ok(gated),
                    AttentionMode::Additive => g.add(fu, gated),
                }
            }
            (None, Some(sc)) => {
                let d = sc.forward(g, f)?;
                g.add(fu, d)
            }
            (Some(gates), None) => g.mul_channel(fu, gates),
            (None, None) => Ok(fu),
        }
    }
}

/// Cross-stage state-space group. With CSG enabled, a 1×1 conv is followed
/// by a channel split; only the first part traverses the HSB stack before
/// concatenation and a closing 1×1 conv. Disabled, it is a plain HSB stack
/// on all channels.
#[derive(Clone, Debug)]
pub struct Csg {
    pub channels: usize,
    pub cfg: CsgConfig,
    split: Option<(Conv, Conv, usize)>,
    pub hsbs: Vec<Hsb>,
}

impl Csg {
    pub fn build(
        pb: &mut ParamBuilder,
        channels: usize,
        cfg: &CsgConfig,
        hsb: &HsbConfig,
        ssm: &Ss2dConfig,
    ) -> Result<Self> {
        let (split, inner) = if cfg.enabled {
            let branch = cfg.branch_channels(channels)?;
            let down = Conv::pointwise(pb, "conv_down", channels, channels);
            (Some((down, Conv::pointwise(pb, "conv_up", channels, channels), branch)), branch)
        } else {
            (None, channels)
        };
        let hsbs = (0..cfg.hsb_layers)
            .map(|i| pb.scoped(&format!("hsb{i}"), |pb| Hsb::build(pb, inner, hsb, ssm)))
            .collect::<Result<_>>()?;
        Ok(Self {
            channels,
            cfg: cfg.clone(),
            split,
            hsbs,
        })
    }

    /// Channels seen by each HSB.
    pub fn branch_channels(&self) -> usize {
        self.split.as_ref().map_or(self.channels, |s| s.2)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let [_, c, _, _] = g.value(f).nchw()?;
        if c != self.channels {
            return Err(Error::contract(
                "csg",
                format!("expected {} input channels, got {c}", self.channels),
            ));
        }
        let Some((down, up, branch)) = &self.split else {
            return self.hsbs.iter().try_fold(f, |x, h| h.forward(g, x));
        };
        let d = down.forward(g, f)?;
        let parts = g.split_channels(d, &[*branch, c - branch])?;
        let mut x = parts[0];
        for h in &self.hsbs {
            x = h.forward(g, x)?;
        }
        let cat = if c > *branch { g.concat_channels(&[x, parts[1]])? } else { x };
        up.forward(g, cat)
    }
}

/// Multiply-accumulate counts split by operator family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub conv: u64,
    pub scan: u64,
    /// Normalization, pooling, gate network and elementwise products.
    pub other: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.conv + self.scan + self.other
    }
}

impl std::ops::Add for FlopCount {
    type Output = FlopCount;

    fn add(self, o: FlopCount) -> FlopCount {
        FlopCount {
            conv: self.conv + o.conv,
            scan: self.scan + o.scan,
            other: self.other + o.other,
        }
    }
}

impl std::ops::Mul<u64> for FlopCount {
    type Output = FlopCount;

    fn mul(self, k: u64) -> FlopCount {
        FlopCount {
            conv: self.conv * k,
            scan: self.scan * k,
            other: self.other * k,
        }
    }
}

/// Blocks understood by [`count_flops`].
#[derive(Clone, Debug, PartialEq)]
pub enum BlockSpec {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    },
    Ss2d(Ss2dConfig),
    Hsb(HsbConfig, Ss2dConfig),
    Csg(CsgConfig, HsbConfig, Ss2dConfig),
}

impl FromStr for BlockSpec {
    type Err = Error;

    /// Default-configured block by name: `conv1x1`, `ss2d`, `hsb`, `csg` or
    /// `hsb_stack` (CSG disabled). Channel counts come from the input shape.
    fn from_str(s: &str) -> Result<Self> {
        let csg = |enabled| {
            BlockSpec::Csg(
                CsgConfig {
                    enabled,
                    ..Default::default()
                },
                HsbConfig::default(),
                Ss2dConfig::default(),
            )
        };
        Ok(match s {
            "conv1x1" => BlockSpec::Conv {
                cin: 0,
                cout: 0,
                kernel: 1,
                stride: 1,
                groups: 1,
            },
            "ss2d" => BlockSpec::Ss2d(Ss2dConfig::default()),
            "hsb" => BlockSpec::Hsb(HsbConfig::default(), Ss2dConfig::default()),
            "csg" => csg(true),
            "hsb_stack" => csg(false),
            other => {
                return Err(Error::contract(
                    "count_flops",
                    format!("unsupported block {other:?}; known: conv1x1, ss2d, hsb, csg, hsb_stack"),
                ))
            }
        })
    }
}

fn conv_macs(cin: usize, cout: usize, k: usize, groups: usize, area: usize) -> u64 {
    (cout * (cin / groups) * k * k * area) as u64
}

fn ss2d_flops(c: usize, cfg: &Ss2dConfig, area: usize) -> FlopCount {
    let (c64, m, a) = (c as u64, cfg.state_dim as u64, area as u64);
    // per token: B, C and Δ projections, discretization, update, readout
    let per_token = 2 * c64 * m + c64 * c64 + 3 * c64 * m;
    FlopCount {
        conv: 2 * conv_macs(c, c, 1, 1, area),
        scan: cfg.directions.len() as u64 * per_token * a,
        other: 2 * c64 * a,
    }
}

fn hsb_flops(c: usize, cfg: &HsbConfig, ssm: &Ss2dConfig, area: usize) -> Result<FlopCount> {
    cfg.validate(c)?;
    let (inner, k, a) = (c / cfg.reduction, cfg.dw_kernel, area as u64);
    let mut f = FlopCount {
        conv: conv_macs(c, inner, 1, 1, area) + conv_macs(inner, c, 1, 1, area),
        scan: 0,
        other: 2 * inner as u64 * a,
    } + ss2d_flops(inner, ssm, area);
    if cfg.local_conv {
        f.conv += conv_macs(inner, inner, k, inner, area);
        f.other += 2 * inner as u64 * a;
    }
    if cfg.residual {
        f.conv += conv_macs(c, c, k, c, area);
        f.other += c as u64 * a;
    }
    if cfg.attention {
        let h = (c / cfg.se_reduction).max(1) as u64;
        f.other += c as u64 * a + 2 * c as u64 * h + c as u64 * a;
    }
    Ok(f)
}

/// Closed-form multiply-accumulate count of `block` applied to an input of
/// `channels × x × y`. For `Conv`, zero `cin`/`cout` take `channels`.
pub fn count_flops(block: &BlockSpec, channels: usize, x: usize, y: usize) -> Result<FlopCount> {
    let area = x * y;
    match block {
        BlockSpec::Conv {
            cin,
            cout,
            kernel,
            stride,
            groups,
        } => {
            let cin = if *cin == 0 { channels } else { *cin };
            let cout = if *cout == 0 { channels } else { *cout };
            if *stride == 0 || *groups == 0 || cin % groups != 0 || cout % groups != 0 {
                return Err(Error::contract("count_flops", "invalid convolution geometry"));
            }
            let out_area = x.div_ceil(*stride) * y.div_ceil(*stride);
            Ok(FlopCount {
                conv: conv_macs(cin, cout, *kernel, *groups, out_area),
                ..Default::default()
            })
        }
        BlockSpec::Ss2d(cfg) => Ok(ss2d_flops(channels, cfg, area)),
        BlockSpec::Hsb(cfg, ssm) => hsb_flops(channels, cfg, ssm, area),
        BlockSpec::Csg(csg, hsb, ssm) => {
            if !csg.enabled {
                return Ok(hsb_flops(channels, hsb, ssm, area)? * csg.hsb_layers as u64);
            }
            let branch = csg.branch_channels(channels)?;
            Ok(FlopCount {
                conv: 2 * conv_macs(channels, channels, 1, 1, area),
                ..Default::default()
            } + hsb_flops(branch, hsb, ssm, area)? * csg.hsb_layers as u64)
        }
    }
}
