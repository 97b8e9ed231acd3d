//! Center-based detection head: heatmap and box regression maps, training
//! targets, loss and peak decoding.
//!
//! Raw maps are `[1, K + 8, X, Y]`: `K` heatmap logits followed by the
//! regression channels in [`REG_CHANNELS`] order. The offset is the
//! fractional center position inside its cell in pillar units, so
//! `x = x_min + (ix + offset_x) · pillar`.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pillar::GridSpec;
use crate::tensor::{Graph, Init, ParamBuilder, ParamId, Real, Tensor, Var};

/// Regression channel names, in map order.
pub const REG_CHANNELS: [&str; 8] = [
    "offset_x", "offset_y", "z", "log_l", "log_w", "log_h", "sin_yaw", "cos_yaw",
];
pub const NUM_REG: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [
        ObjectClass::Vehicle,
        ObjectClass::Pedestrian,
        ObjectClass::Cyclist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownClass {
                name: s.to_string(),
                known: Self::ALL.map(|c| c.name()).join(", "),
            })
    }
}

/// Wraps an angle to `[-π, π)`.
pub fn normalize_yaw(theta: f64) -> f64 {
    let t = theta - TAU * ((theta + PI) / TAU).floor();
    // rounding can land exactly on π
    if t >= PI {
        t - TAU
    } else {
        t
    }
}

/// Oriented box: center, size `(l, w, h)` with `l` along the heading, yaw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
}

impl Box3D {
    pub fn new(class: ObjectClass, center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class,
        }
    }

    /// BEV corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let [x, y, _] = self.center;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(a, b)| [x + a * c - b * s, y + a * s + b * c])
    }

    /// Whether `(px, py, pz)` lies inside the box (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
        u.abs() <= self.size[0] / 2.0
            && v.abs() <= self.size[1] / 2.0
            && (p[2] - self.center[2]).abs() <= self.size[2] / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    /// In `(0, 1)`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Initial heatmap bias, the logit of a 0.1 prior.
    pub heatmap_bias: f64,
    pub min_overlap: f64,
    /// Lower bound on the Gaussian radius in cells.
    pub min_radius: usize,
    pub top_k: usize,
    pub score_threshold: f64,
    /// Weight of the masked L1 regression term.
    pub reg_weight: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            heatmap_bias: -2.19,
            min_overlap: 0.7,
            min_radius: 2,
            top_k: 100,
            score_threshold: 0.1,
            reg_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Pointwise {
    w: ParamId,
    b: ParamId,
}

/// Shared 3×3 stem with SiLU and per-task 1×1 heads.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub channels: usize,
    pub classes: usize,
    stem_w: ParamId,
    stem_b: ParamId,
    heatmap: Pointwise,
    tasks: Vec<Pointwise>,
}

impl DetectionHead {
    pub fn build(pb: &mut ParamBuilder, channels: usize, cfg: &HeadConfig) -> Self {
        let c = channels;
        let k = ObjectClass::ALL.len();
        let pw = |pb: &mut ParamBuilder, name: &str, out: usize, bias: Init| {
            pb.scoped(name, |pb| Pointwise {
                w: pb.add("weight", &[out, c, 1, 1], Init::FanIn(c)),
                b: pb.add("bias", &[out], bias),
            })
        };
        let stem_w = pb.add("stem.weight", &[c, c, 3, 3], Init::He(9 * c));
        let stem_b = pb.add("stem.bias", &[c], Init::Zeros);
        let heatmap = pw(pb, "heatmap", k, Init::Const(cfg.heatmap_bias));
        let tasks = [("offset", 2), ("z", 1), ("dims", 3), ("rot", 2)]
            .into_iter()
            .map(|(name, out)| pw(pb, name, out, Init::Zeros))
            .collect();
        Self {
            channels,
            classes: k,
            stem_w,
            stem_b,
            heatmap,
            tasks,
        }
    }

    /// Raw maps `[1, K + 8, X, Y]` from `F5 [1, C, X, Y]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, f5: Var) -> Result<Var> {
        let [_, c, _, _] = g.value(f5).nchw()?;
        if c != self.channels {
            return Err(Error::contract(
                "head",
                format!("expected {} input channels, got {c}", self.channels),
            ));
        }
        let s = g.conv2d(f5, g.param(self.stem_w), Some(g.param(self.stem_b)), 1, 1, 1)?;
        let s = g.silu(s);
        let mut outs = Vec::with_capacity(1 + self.tasks.len());
        for p in std::iter::once(&self.heatmap).chain(&self.tasks) {
            outs.push(g.conv2d(s, g.param(p.w), Some(g.param(p.b)), 1, 0, 1)?);
        }
        g.concat_channels(&outs)
    }
}

/// Training targets on the BEV grid.
#[derive(Clone, Debug)]
pub struct HeadTargets {
    /// `[K, X, Y]` in `[0, 1]`.
    pub heatmap: Tensor<f64>,
    /// `[8, X, Y]`, meaningful where `mask` is set.
    pub regression: Tensor<f64>,
    /// `[X, Y]`, 1 at GT center cells.
    pub mask: Tensor<f64>,
    pub num_pos: usize,
    /// Boxes whose center lies outside the grid.
    pub skipped: usize,
}

/// Radius at which a box shifted by it still overlaps the original by
/// `min_overlap`, from the three corner-displacement cases.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

fn splat_gaussian(map: &mut [f64], ny: usize, nx: usize, cx: usize, cy: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for dx in -r..=r {
        for dy in -r..=r {
            let (x, y) = (cx as isize + dx, cy as isize + dy);
            if x < 0 || y < 0 || x >= nx as isize || y >= ny as isize {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            if v < f64::EPSILON {
                continue;
            }
            let cell = &mut map[x as usize * ny + y as usize];
            *cell = cell.max(v);
        }
    }
}

pub fn build_targets(boxes: &[Box3D], grid: &GridSpec, cfg: &HeadConfig) -> Result<HeadTargets> {
    let (nx, ny) = grid.extents()?;
    let k = ObjectClass::ALL.len();
    let area = nx * ny;
    let mut heatmap = vec![0.0; k * area];
    let mut reg = vec![0.0; NUM_REG * area];
    let mut mask = vec![0.0; area];
    let mut skipped = 0;
    let mut centers = Vec::new();
    for b in boxes {
        let Some((ix, iy)) = grid.cell_of(b.center[0], b.center[1]) else {
            skipped += 1;
            continue;
        };
        let (l, w) = (b.size[0] / grid.pillar_size, b.size[1] / grid.pillar_size);
        let radius = (gaussian_radius(l, w, cfg.min_overlap).floor().max(0.0) as usize).max(cfg.min_radius);
        let class_map = &mut heatmap[b.class.index() * area..][..area];
        splat_gaussian(class_map, ny, nx, ix, iy, radius);
        let cell = ix * ny + iy;
        let fx = (b.center[0] - grid.x_range[0]) / grid.pillar_size - ix as f64;
        let fy = (b.center[1] - grid.y_range[0]) / grid.pillar_size - iy as f64;
        let values = [
            fx,
            fy,
            b.center[2],
            b.size[0].ln(),
            b.size[1].ln(),
            b.size[2].ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (ch, v) in values.into_iter().enumerate() {
            reg[ch * area + cell] = v;
        }
        mask[cell] = 1.0;
        centers.push(cell);
    }
    centers.sort_unstable();
    centers.dedup();
    Ok(HeadTargets {
        heatmap: Tensor::new(&[k, nx, ny], heatmap)?,
        regression: Tensor::new(&[NUM_REG, nx, ny], reg)?,
        mask: Tensor::new(&[nx, ny], mask)?,
        num_pos: centers.len(),
        skipped,
    })
}

/// Graph handles of the loss and its terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub heatmap: Var,
    pub regression: Var,
}

/// Quality focal loss on the heatmap plus weighted masked L1 on the
/// regression channels, both normalized by `max(num_pos, 1)`.
///
/// The heatmap term `|y − σ(z)|² · (softplus(z) − y·z)` is nonnegative and
/// vanishes exactly when the predicted probability equals the soft target.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    targets: &HeadTargets,
    cfg: &HeadConfig,
) -> Result<LossVars> {
    let [_, ch, nx, ny] = g.value(raw).nchw()?;
    let k = targets.heatmap.shape()[0];
    if ch != k + NUM_REG || targets.mask.shape() != [nx, ny] {
        return Err(Error::shape("detection_loss", &[1, k + NUM_REG, nx, ny], g.shape(raw)));
    }
    let norm = T::c(1.0 / targets.num_pos.max(1) as f64);
    let parts = g.split_channels(raw, &[k, NUM_REG])?;
    let (z, reg) = (parts[0], parts[1]);
    let y: Tensor<T> = targets.heatmap.cast::<T>().reshape(&[1, k, nx, ny])?;

    let p = g.sigmoid(z);
    let d = g.add_const(p, &y.map(|v| -v))?;
    let d2 = g.mul(d, d)?;
    let sp = g.softplus(z);
    let yz = g.mul_const(z, y)?;
    let bce = g.neg(yz);
    let bce = g.add(sp, bce)?;
    let focal = g.mul(d2, bce)?;
    let focal = g.sum(focal);
    let heatmap = g.scale(focal, norm);

    let t: Tensor<T> = targets.regression.cast::<T>().reshape(&[1, NUM_REG, nx, ny])?;
    let area = nx * ny;
    let m = targets.mask.data();
    let mask = Tensor::from_fn(&[1, NUM_REG, nx, ny], |i| T::c(m[i % area]));
    let diff = g.add_const(reg, &t.map(|v| -v))?;
    let a = g.abs(diff);
    let masked = g.mul_const(a, mask)?;
    let l1 = g.sum(masked);
    let regression = g.scale(l1, norm * T::c(cfg.reg_weight));

    let total = g.add(heatmap, regression)?;
    Ok(LossVars {
        total,
        heatmap,
        regression,
    })
}

/// Raw maps whose decoded heatmap equals the targets, with logits clamped to
/// `±20`, and whose regression channels equal the regression targets.
pub fn perfect_raw_maps(targets: &HeadTargets) -> Result<Tensor<f64>> {
    let [k, nx, ny] = *targets.heatmap.shape() else {
        return Err(Error::contract("perfect_raw_maps", "heatmap must be [K, X, Y]"));
    };
    let mut data: Vec<f64> = targets
        .heatmap
        .data()
        .iter()
        .map(|&y| (y.ln() - (1.0 - y).ln()).clamp(-20.0, 20.0))
        .collect();
    data.extend_from_slice(targets.regression.data());
    Tensor::new(&[1, k + NUM_REG, nx, ny], data)
}

fn sigmoid(v: f64) -> f64 {
    crate::tensor::sigmoid(v)
}

/// Peaks of the sigmoid heatmap that are the maximum of their 3×3 window,
/// ties going to the lowest flat index, as `(score, class, cell)` sorted by
/// descending score.
fn peaks(raw: &[f64], k: usize, nx: usize, ny: usize) -> Vec<(f64, usize, usize)> {
    let area = nx * ny;
    let mut out = Vec::new();
    for cls in 0..k {
        let map = &raw[cls * area..][..area];
        for ix in 0..nx {
            for iy in 0..ny {
                let i = ix * ny + iy;
                let v = map[i];
                let mut keep = true;
                'win: for jx in ix.saturating_sub(1)..=(ix + 1).min(nx - 1) {
                    for jy in iy.saturating_sub(1)..=(iy + 1).min(ny - 1) {
                        let j = jx * ny + jy;
                        if j != i && (map[j] > v || (map[j] == v && j < i)) {
                            keep = false;
                            break 'win;
                        }
                    }
                }
                if keep {
                    out.push((sigmoid(v), cls, i));
                }
            }
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    out
}

/// Decodes raw maps into at most `top_k` detections scoring at least
/// `score_threshold`, sorted by descending score.
pub fn decode<T: Real>(raw: &Tensor<T>, grid: &GridSpec, top_k: usize, score_threshold: f64) -> Result<Vec<Detection>> {
    let [_, ch, nx, ny] = raw.nchw()?;
    let (gx, gy) = grid.extents()?;
    let k = ObjectClass::ALL.len();
    if ch != k + NUM_REG || (nx, ny) != (gx, gy) {
        return Err(Error::shape("decode", &[1, k + NUM_REG, gx, gy], raw.shape()));
    }
    let data: Vec<f64> = raw.data().iter().map(|v| v.as_f64()).collect();
    let area = nx * ny;
    let reg = |c: usize, cell: usize| data[(k + c) * area + cell];
    let mut out = Vec::new();
    for (score, cls, cell) in peaks(&data, k, nx, ny).into_iter().take(top_k) {
        if score < score_threshold {
            break;
        }
        let (ix, iy) = (cell / ny, cell % ny);
        let bbox = Box3D::new(
            ObjectClass::from_index(cls).expect("class index below K"),
            [
                grid.x_range[0] + (ix as f64 + reg(0, cell)) * grid.pillar_size,
                grid.y_range[0] + (iy as f64 + reg(1, cell)) * grid.pillar_size,
                reg(2, cell),
            ],
            [reg(3, cell).exp(), reg(4, cell).exp(), reg(5, cell).exp()],
            reg(6, cell).atan2(reg(7, cell)),
        );
        out.push(Detection {
            bbox,
            score: score.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0),
        });
    }
    Ok(out)
}
