//! Multi-scale BEV backbone: a CSG at full resolution, stride-2 stages each
//! followed by a CSG, alignment of the coarse stages to half resolution,
//! channel fusion and a final upsample back to the input grid.

use serde::{Deserialize, Serialize};

use crate::blocks::{count_flops, BlockSpec, Csg, CsgConfig, FlopCount, HsbConfig};
use crate::cross_scan::Ss2dConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamBuilder, ParamId, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: usize,
    /// Number of CSG stages `F1..F_stages`; all but the first halve the grid.
    pub stages: usize,
    pub csg: CsgConfig,
    pub hsb: HsbConfig,
    pub ssm: Ss2dConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            stages: 4,
            csg: CsgConfig::default(),
            hsb: HsbConfig::default(),
            ssm: Ss2dConfig::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, x: usize, y: usize) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::Config(format!("backbone needs at least 2 stages, got {}", self.stages)));
        }
        if self.channels == 0 {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        let div = 1usize << (self.stages - 1);
        if !x.is_multiple_of(div) || !y.is_multiple_of(div) || x == 0 || y == 0 {
            return Err(Error::Config(format!(
                "grid {x}×{y} is not divisible by {div} for {} stages",
                self.stages
            )));
        }
        Ok(())
    }
}

/// Closed-form multiply-accumulate count of the whole backbone on an
/// `x × y` grid.
pub fn backbone_flops(cfg: &BackboneConfig, x: usize, y: usize) -> Result<FlopCount> {
    cfg.validate(x, y)?;
    let c = cfg.channels;
    let conv = |cin, kernel, stride| BlockSpec::Conv {
        cin,
        cout: c,
        kernel,
        stride,
        groups: 1,
    };
    let csg = BlockSpec::Csg(cfg.csg.clone(), cfg.hsb.clone(), cfg.ssm.clone());
    let mut total = FlopCount::default();
    for s in 0..cfg.stages {
        let (sx, sy) = (x >> s, y >> s);
        if s > 0 {
            total = total + count_flops(&conv(c, 3, 2), c, sx * 2, sy * 2)?;
        }
        total = total + count_flops(&csg, c, sx, sy)?;
    }
    let (hx, hy) = (x / 2, y / 2);
    for _ in 2..cfg.stages {
        total = total + count_flops(&conv(c, 1, 1), c, hx, hy)?;
    }
    total = total + count_flops(&conv((cfg.stages - 1) * c, 1, 1), c, hx, hy)?;
    Ok(total + count_flops(&conv(c, 1, 1), c, x, y)?)
}

#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

impl ConvParams {
    fn build(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize, init: fn(usize) -> Init) -> Self {
        pb.scoped(name, |pb| Self {
            w: pb.add("weight", &[cout, cin, k, k], init(cin * k * k)),
            b: pb.add("bias", &[cout], Init::Zeros),
        })
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var, stride: usize, padding: usize) -> Result<Var> {
        g.conv2d(x, g.param(self.w), Some(g.param(self.b)), stride, padding, 1)
    }
}

/// `F1..F_S` at resolutions `X / 2^(s-1)` and the fused full-resolution `F5`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub grid: (usize, usize),
    stages: Vec<Csg>,
    downs: Vec<ConvParams>,
    /// 1×1 convs after upsampling `F3..F_S` to half resolution.
    aligns: Vec<ConvParams>,
    fuse: ConvParams,
    up: ConvParams,
}

impl Backbone {
    pub fn build(pb: &mut ParamBuilder, cfg: &BackboneConfig, x: usize, y: usize) -> Result<Self> {
        cfg.validate(x, y)?;
        let c = cfg.channels;
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut downs = Vec::with_capacity(cfg.stages - 1);
        for s in 0..cfg.stages {
            if s > 0 {
                downs.push(ConvParams::build(pb, &format!("down{}", s + 1), c, c, 3, Init::He));
            }
            let csg = pb.scoped(&format!("stage{}", s + 1), |pb| {
                Csg::build(pb, c, &cfg.csg, &cfg.hsb, &cfg.ssm)
            })?;
            stages.push(csg);
        }
        let aligns = (2..cfg.stages)
            .map(|s| ConvParams::build(pb, &format!("align{}", s + 1), c, c, 1, Init::FanIn))
            .collect();
        let fuse = ConvParams::build(pb, "fuse", (cfg.stages - 1) * c, c, 1, Init::FanIn);
        let up = ConvParams::build(pb, "up", c, c, 1, Init::FanIn);
        Ok(Self {
            cfg: cfg.clone(),
            grid: (x, y),
            stages,
            downs,
            aligns,
            fuse,
            up,
        })
    }

    pub fn stages(&self) -> &[Csg] {
        &self.stages
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, f0: Var) -> Result<FeaturePyramid> {
        let want = [1, self.cfg.channels, self.grid.0, self.grid.1];
        if g.value(f0).nchw()? != want {
            return Err(Error::shape("backbone input", &want, g.shape(f0)));
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut f = self.stages[0].forward(g, f0)?;
        levels.push(f);
        for (down, csg) in self.downs.iter().zip(&self.stages[1..]) {
            let d = down.apply(g, f, 2, 1)?;
            let d = g.silu(d);
            f = csg.forward(g, d)?;
            levels.push(f);
        }
        let mut aligned = vec![levels[1]];
        for (k, conv) in self.aligns.iter().enumerate() {
            let mut u = levels[k + 2];
            for _ in 0..=k {
                u = g.upsample_nearest_2x(u)?;
            }
            aligned.push(conv.apply(g, u, 1, 0)?);
        }
        let cat = g.concat_channels(&aligned)?;
        let fused = self.fuse.apply(g, cat, 1, 0)?;
        let u = g.upsample_nearest_2x(fused)?;
        let fused = self.up.apply(g, u, 1, 0)?;
        Ok(FeaturePyramid { levels, fused })
    }
}
