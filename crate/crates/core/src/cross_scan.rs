//! Cross-scan: four directional flattenings of a BEV grid, per-direction
//! selective scans and the merge back to the grid.
//!
//! A grid of `X × Y` cells is addressed by the flat cell index `ix * Y + iy`.
//! Every direction is a permutation `order[t] = cell` of those indices.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::selective::{SelectiveScan, ZohRule};
use crate::tensor::{Graph, Init, ParamBuilder, ParamId, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanDirection {
    RowForward,
    ColForward,
    RowReverse,
    ColReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::ColForward,
        ScanDirection::RowReverse,
        ScanDirection::ColReverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScanDirection::RowForward => "row_forward",
            ScanDirection::ColForward => "col_forward",
            ScanDirection::RowReverse => "row_reverse",
            ScanDirection::ColReverse => "col_reverse",
        }
    }

    /// Visiting order: `order[t]` is the flat cell read at step `t`.
    pub fn order(self, x: usize, y: usize) -> Vec<usize> {
        let row_major = || (0..x * y).collect::<Vec<_>>();
        let col_major = || {
            (0..y)
                .flat_map(|iy| (0..x).map(move |ix| ix * y + iy))
                .collect::<Vec<_>>()
        };
        match self {
            ScanDirection::RowForward => row_major(),
            ScanDirection::ColForward => col_major(),
            ScanDirection::RowReverse => row_major().into_iter().rev().collect(),
            ScanDirection::ColReverse => col_major().into_iter().rev().collect(),
        }
    }

    /// Sequence position of every cell, the inverse of [`Self::order`].
    pub fn positions(self, x: usize, y: usize) -> Vec<usize> {
        let order = self.order(x, y);
        let mut pos = vec![0; order.len()];
        for (t, &cell) in order.iter().enumerate() {
            pos[cell] = t;
        }
        pos
    }
}

/// Directional token sequences of one grid, each `[X·Y, C]`.
#[derive(Clone, Debug)]
pub struct DirectionalSequences<T: Real> {
    pub grid: (usize, usize),
    pub sequences: Vec<(ScanDirection, Tensor<T>)>,
}

fn grid_dims<T: Real>(bev: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *bev.shape() {
        [c, x, y] | [1, c, x, y] => Ok((c, x, y)),
        _ => Err(Error::contract(
            "cross_scan",
            format!("expected a [C, X, Y] map, got shape {:?}", bev.shape()),
        )),
    }
}

/// Reads a `[C, X, Y]` map as tokens in `direction` order.
pub fn flatten<T: Real>(bev: &Tensor<T>, direction: ScanDirection) -> Result<Tensor<T>> {
    let (c, x, y) = grid_dims(bev)?;
    let order = direction.order(x, y);
    let d = bev.data();
    let xy = x * y;
    let mut out = Vec::with_capacity(xy * c);
    for &cell in &order {
        out.extend((0..c).map(|ch| d[ch * xy + cell]));
    }
    Tensor::new(&[xy, c], out)
}

/// Writes `[X·Y, C]` tokens in `direction` order back to a `[C, X, Y]` map.
pub fn unflatten<T: Real>(
    seq: &Tensor<T>,
    direction: ScanDirection,
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    let (x, y) = grid;
    let &[len, c] = seq.shape() else {
        return Err(Error::contract("unflatten", format!("expected [tokens, C], got {:?}", seq.shape())));
    };
    if len != x * y {
        return Err(Error::shape("unflatten", &[x * y, c], seq.shape()));
    }
    let order = direction.order(x, y);
    let s = seq.data();
    let mut out = Tensor::zeros(&[c, x, y]);
    let o = out.data_mut();
    for (t, &cell) in order.iter().enumerate() {
        for ch in 0..c {
            o[ch * len + cell] = s[t * c + ch];
        }
    }
    Ok(out)
}

pub fn cross_scan_flatten<T: Real>(bev: &Tensor<T>) -> Result<DirectionalSequences<T>> {
    let (_, x, y) = grid_dims(bev)?;
    Ok(DirectionalSequences {
        grid: (x, y),
        sequences: ScanDirection::ALL
            .iter()
            .map(|&d| Ok((d, flatten(bev, d)?)))
            .collect::<Result<_>>()?,
    })
}

/// Unflattens every directional output and sums the grids in list order.
pub fn cross_merge<T: Real>(outputs: &DirectionalSequences<T>) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for (d, seq) in &outputs.sequences {
        let g = unflatten(seq, *d, outputs.grid)?;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                if a.shape() != g.shape() {
                    return Err(Error::shape("cross_merge", a.shape(), g.shape()));
                }
                a.data_mut().iter_mut().zip(g.data()).for_each(|(p, q)| *p += *q);
            }
        }
    }
    acc.ok_or_else(|| Error::contract("cross_merge", "no directional outputs"))
}

/// Gather indices moving a `[1, C, X, Y]` map to `[X·Y, C]` tokens.
fn flatten_index(direction: ScanDirection, c: usize, x: usize, y: usize) -> Vec<usize> {
    let xy = x * y;
    direction
        .order(x, y)
        .into_iter()
        .flat_map(|cell| (0..c).map(move |ch| ch * xy + cell))
        .collect()
}

/// Gather indices moving `[X·Y, C]` tokens back to a `[1, C, X, Y]` map.
fn unflatten_index(direction: ScanDirection, c: usize, x: usize, y: usize) -> Vec<usize> {
    let pos = direction.positions(x, y);
    (0..c)
        .flat_map(|ch| pos.iter().map(move |&t| t * c + ch))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ss2dConfig {
    pub state_dim: usize,
    pub directions: Vec<ScanDirection>,
    pub zoh: ZohRule,
    pub ln_eps: f64,
}

impl Default for Ss2dConfig {
    fn default() -> Self {
        Self {
            state_dim: 4,
            directions: ScanDirection::ALL.to_vec(),
            zoh: ZohRule::Exact,
            ln_eps: 1e-5,
        }
    }
}

impl Ss2dConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::Config("ssm state_dim must be positive".into()));
        }
        if self.directions.is_empty() {
            return Err(Error::Config("ssm directions must not be empty".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }
}

/// 2D selective scan block: 1×1 projection with SiLU, directional selective
/// scans with independent parameters, merge, per-site LayerNorm and a 1×1
/// output projection. Shape preserving.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub channels: usize,
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub scans: Vec<(ScanDirection, SelectiveScan)>,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln_eps: f64,
}

impl Ss2d {
    pub fn build(pb: &mut ParamBuilder, channels: usize, cfg: &Ss2dConfig) -> Self {
        let c = channels;
        let in_w = pb.add("in_proj.weight", &[c, c, 1, 1], Init::He(c));
        let in_b = pb.add("in_proj.bias", &[c], Init::Zeros);
        let scans = cfg
            .directions
            .iter()
            .map(|&d| {
                let s = pb.scoped(d.name(), |pb| SelectiveScan::build(pb, c, cfg.state_dim, cfg.zoh));
                (d, s)
            })
            .collect();
        Self {
            channels,
            in_w,
            in_b,
            scans,
            ln_gamma: pb.add("norm.gamma", &[c], Init::Const(1.0)),
            ln_beta: pb.add("norm.beta", &[c], Init::Zeros),
            out_w: pb.add("out_proj.weight", &[c, c, 1, 1], Init::FanIn(c)),
            out_b: pb.add("out_proj.bias", &[c], Init::Zeros),
            ln_eps: cfg.ln_eps,
        }
    }

    /// Directional scans of `h [1, C, X, Y]` merged by summation.
    pub fn scan_merge<T: Real>(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let [_, c, x, y] = g.value(h).nchw()?;
        let mut merged: Option<Var> = None;
        for (d, scan) in &self.scans {
            let seq = g.gather(h, Arc::new(flatten_index(*d, c, x, y)), &[x * y, c])?;
            let out = scan.forward(g, seq)?;
            let grid = g.gather(out, Arc::new(unflatten_index(*d, c, x, y)), &[1, c, x, y])?;
            merged = Some(match merged {
                None => grid,
                Some(m) => g.add(m, grid)?,
            });
        }
        merged.ok_or_else(|| Error::contract("ss2d", "no scan directions configured"))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let [_, c, _, _] = g.value(x).nchw()?;
        if c != self.channels {
            return Err(Error::contract(
                "ss2d",
                format!("expected {} input channels, got {c}", self.channels),
            ));
        }
        let h = g.conv2d(x, g.param(self.in_w), Some(g.param(self.in_b)), 1, 0, 1)?;
        let h = g.silu(h);
        let m = self.scan_merge(g, h)?;
        let n = g.layer_norm(m, g.param(self.ln_gamma), g.param(self.ln_beta), T::c(self.ln_eps))?;
        g.conv2d(n, g.param(self.out_w), Some(g.param(self.out_b)), 1, 0, 1)
    }

    /// Multiply-accumulates for an `x × y` grid, split as (conv, scan).
    pub fn macs(&self, x: usize, y: usize) -> (u64, u64) {
        let (c, area) = (self.channels as u64, (x * y) as u64);
        let conv = 2 * c * c * area;
        let scan = self.scans.iter().map(|(_, s)| s.macs_per_token()).sum::<u64>() * area;
        (conv, scan)
    }
}

/// Sequence-locality statistics of one scan direction over a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanDiagnostics {
    pub direction: ScanDirection,
    /// Pairs of 4-connected occupied cells.
    pub neighbor_pairs: usize,
    /// Sequence distance → number of neighbor pairs at that distance.
    pub distance_histogram: BTreeMap<usize, usize>,
    pub max_distance: usize,
    pub mean_distance: f64,
    /// Maximal runs of consecutive empty cells along the sequence.
    pub empty_runs: usize,
    pub longest_empty_run: usize,
    pub mean_empty_run: f64,
    pub occupied_cells: usize,
}

/// Measures how far apart spatial neighbors end up in the scan sequence and
/// how long the empty stretches between occupied tokens are. `occupied` is
/// indexed by flat cell; `None` means every cell is occupied.
pub fn diagnose_scan(
    direction: ScanDirection,
    x: usize,
    y: usize,
    occupied: Option<&[bool]>,
) -> Result<ScanDiagnostics> {
    if x == 0 || y == 0 {
        return Err(Error::contract("diagnose_scan", "grid must be nonempty"));
    }
    if let Some(o) = occupied {
        if o.len() != x * y {
            return Err(Error::shape("diagnose_scan occupancy", &[x * y], &[o.len()]));
        }
    }
    let occ = |cell: usize| occupied.is_none_or(|o| o[cell]);
    let pos = direction.positions(x, y);
    let mut hist = BTreeMap::new();
    let (mut pairs, mut total, mut max) = (0usize, 0usize, 0usize);
    for ix in 0..x {
        for iy in 0..y {
            let a = ix * y + iy;
            let right = (iy + 1 < y).then(|| a + 1);
            let down = (ix + 1 < x).then(|| a + y);
            for b in [right, down].into_iter().flatten() {
                if occ(a) && occ(b) {
                    let dist = pos[a].abs_diff(pos[b]);
                    *hist.entry(dist).or_insert(0) += 1;
                    pairs += 1;
                    total += dist;
                    max = max.max(dist);
                }
            }
        }
    }
    let mut runs = Vec::new();
    let mut current = 0;
    for cell in direction.order(x, y) {
        if occ(cell) {
            if current > 0 {
                runs.push(current);
            }
            current = 0;
        } else {
            current += 1;
        }
    }
    if current > 0 {
        runs.push(current);
    }
    let mean = |sum: usize, n: usize| if n == 0 { 0.0 } else { sum as f64 / n as f64 };
    Ok(ScanDiagnostics {
        direction,
        neighbor_pairs: pairs,
        distance_histogram: hist,
        max_distance: max,
        mean_distance: mean(total, pairs),
        empty_runs: runs.len(),
        longest_empty_run: runs.iter().copied().max().unwrap_or(0),
        mean_empty_run: mean(runs.iter().sum(), runs.len()),
        occupied_cells: (0..x * y).filter(|&c| occ(c)).count(),
    })
}
