//! Pillarization of a point cloud into a dense BEV feature map.
//!
//! Points are binned into vertical columns on a regular x/y grid, each point
//! is augmented to 9 features `(x, y, z, r, xc, yc, zc, xp, yp)` (offsets to
//! the pillar's point mean and to the cell center), embedded by a shared
//! linear layer with ReLU, max-pooled per pillar and scattered to the grid.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::{Graph, Init, ParamBuilder, ParamId, ParamStore, Real, Segment, Tensor, Var};

/// Number of per-point features after augmentation.
pub const POINT_FEATURES: usize = 9;

/// One lidar return: `(x, y, z, reflectance)`.
pub type Point = [f32; 4];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Extent and resolution of the BEV grid. Cells are half-open
/// `[min, max)` along every axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub pillar_size: f64,
}

impl Default for GridSpec {
    /// 64×64 cells of 0.2 m in front of the sensor.
    fn default() -> Self {
        Self {
            x_range: [0.0, 12.8],
            y_range: [-6.4, 6.4],
            z_range: [-5.0, 5.0],
            pillar_size: 0.2,
        }
    }
}

impl GridSpec {
    /// The full roadside range: 512×512 cells over 102.4 m.
    pub fn full_range() -> Self {
        Self {
            x_range: [0.0, 102.4],
            y_range: [-51.2, 51.2],
            z_range: [-5.0, 5.0],
            pillar_size: 0.2,
        }
    }

    fn cells_along(&self, axis: &str, range: [f64; 2]) -> Result<usize> {
        let span = range[1] - range[0];
        if !(span > 0.0) || !range[0].is_finite() || !range[1].is_finite() {
            return Err(Error::Config(format!("grid {axis}_range {range:?} is empty")));
        }
        let cells = span / self.pillar_size;
        let rounded = cells.round();
        if (cells - rounded).abs() * self.pillar_size > 1e-9 || rounded < 1.0 {
            return Err(Error::Config(format!(
                "grid {axis}_range span {span} is not a multiple of pillar size {}",
                self.pillar_size
            )));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pillar_size > 0.0) {
            return Err(Error::Config(format!(
                "pillar size must be positive, got {}",
                self.pillar_size
            )));
        }
        self.cells_along("x", self.x_range)?;
        self.cells_along("y", self.y_range)?;
        if !(self.z_range[1] > self.z_range[0]) {
            return Err(Error::Config(format!("grid z_range {:?} is empty", self.z_range)));
        }
        Ok(())
    }

    /// Grid extents `(X, Y)`.
    pub fn extents(&self) -> Result<(usize, usize)> {
        self.validate()?;
        Ok((
            self.cells_along("x", self.x_range)?,
            self.cells_along("y", self.y_range)?,
        ))
    }

    /// Cell of `(x, y)`, or `None` outside the half-open x/y ranges.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (nx, ny) = self.extents().ok()?;
        let inside = |v: f64, r: [f64; 2]| v >= r[0] && v < r[1];
        if !inside(x, self.x_range) || !inside(y, self.y_range) {
            return None;
        }
        let ix = ((x - self.x_range[0]) / self.pillar_size).floor() as usize;
        let iy = ((y - self.y_range[0]) / self.pillar_size).floor() as usize;
        Some((ix.min(nx - 1), iy.min(ny - 1)))
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        self.cell_of(x, y).is_some() && z >= self.z_range[0] && z < self.z_range[1]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_range[0] + (ix as f64 + 0.5) * self.pillar_size,
            self.y_range[0] + (iy as f64 + 0.5) * self.pillar_size,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pillar {
    pub ix: usize,
    pub iy: usize,
    /// Member points, at most `max_points_per_pillar`.
    pub points: Vec<Point>,
    /// Points that fell in the cell before capping.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PillarSet {
    pub grid: GridSpec,
    pub pillars: Vec<Pillar>,
    pub dropped_points: usize,
    /// Pillars discarded because `max_pillars` was exceeded.
    pub dropped_pillars: usize,
}

impl PillarSet {
    pub fn is_empty(&self) -> bool {
        self.pillars.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.pillars.iter().map(|p| p.points.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelizeOptions {
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
    /// Shuffle points with this seed before first-come capping.
    pub shuffle_seed: Option<u64>,
}

impl Default for VoxelizeOptions {
    fn default() -> Self {
        Self {
            max_points_per_pillar: 32,
            max_pillars: 20_000,
            shuffle_seed: None,
        }
    }
}

/// Bins points into pillars. Points outside the grid are dropped; each
/// pillar keeps its first `max_points_per_pillar` points; when more than
/// `max_pillars` cells are occupied the least-populated ones are dropped.
/// Pillars are listed in order of first occupancy.
pub fn voxelize(cloud: &PointCloud, grid: &GridSpec, opts: &VoxelizeOptions) -> Result<PillarSet> {
    grid.validate()?;
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    if let Some(seed) = opts.shuffle_seed {
        Rng64::new(seed).shuffle(&mut order);
    }
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pillars: Vec<Pillar> = Vec::new();
    let mut dropped_points = 0;
    for i in order {
        let p = cloud.points[i];
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        if !grid.contains(x, y, z) {
            dropped_points += 1;
            continue;
        }
        let (ix, iy) = grid.cell_of(x, y).expect("contains checked the cell");
        let k = *index.entry((ix, iy)).or_insert_with(|| {
            pillars.push(Pillar {
                ix,
                iy,
                points: Vec::new(),
                count: 0,
            });
            pillars.len() - 1
        });
        let pillar = &mut pillars[k];
        pillar.count += 1;
        if pillar.points.len() < opts.max_points_per_pillar {
            pillar.points.push(p);
        } else {
            dropped_points += 1;
        }
    }
    let mut dropped_pillars = 0;
    if pillars.len() > opts.max_pillars {
        // keep the most populated, earlier pillars winning ties
        let mut rank: Vec<usize> = (0..pillars.len()).collect();
        rank.sort_by(|&a, &b| pillars[b].count.cmp(&pillars[a].count).then(a.cmp(&b)));
        let mut keep = vec![false; pillars.len()];
        for &k in &rank[..opts.max_pillars] {
            keep[k] = true;
        }
        dropped_pillars = pillars.len() - opts.max_pillars;
        let mut it = keep.iter();
        pillars.retain(|p| {
            let k = *it.next().expect("one flag per pillar");
            if !k {
                dropped_points += p.points.len();
            }
            k
        });
    }
    Ok(PillarSet {
        grid: *grid,
        pillars,
        dropped_points,
        dropped_pillars,
    })
}

/// Augmented per-point features of a pillar set, stacked pillar by pillar.
#[derive(Clone, Debug)]
pub struct PointFeatures {
    /// `[points, 9]` in `(x, y, z, r, xc, yc, zc, xp, yp)` order.
    pub features: Tensor<f64>,
    /// Row range and flat cell `ix * Y + iy` of every pillar.
    pub segments: Vec<Segment>,
}

pub fn augment_features(pillars: &PillarSet) -> Result<PointFeatures> {
    let (_, ny) = pillars.grid.extents()?;
    let mut data = Vec::with_capacity(pillars.num_points() * POINT_FEATURES);
    let mut segments = Vec::with_capacity(pillars.pillars.len());
    let mut row = 0;
    for pillar in &pillars.pillars {
        let n = pillar.points.len();
        if n == 0 {
            return Err(Error::contract(
                "augment_features",
                format!("pillar ({}, {}) has no points", pillar.ix, pillar.iy),
            ));
        }
        let mut mean = [0.0f64; 3];
        for p in &pillar.points {
            for k in 0..3 {
                mean[k] += p[k] as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let (cx, cy) = pillars.grid.cell_center(pillar.ix, pillar.iy);
        for p in &pillar.points {
            let (x, y, z, r) = (p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64);
            data.extend_from_slice(&[
                x,
                y,
                z,
                r,
                x - mean[0],
                y - mean[1],
                z - mean[2],
                x - cx,
                y - cy,
            ]);
        }
        segments.push(Segment {
            start: row,
            end: row + n,
            cell: pillar.ix * ny + pillar.iy,
        });
        row += n;
    }
    Ok(PointFeatures {
        features: Tensor::new(&[row, POINT_FEATURES], data)?,
        segments,
    })
}

/// A dense `channels × X × Y` feature map over a grid.
#[derive(Clone, Debug)]
pub struct BevMap<T: Real> {
    pub tensor: Tensor<T>,
    pub grid: GridSpec,
}

impl<T: Real> BevMap<T> {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// Shared per-point embedding `9 → C` followed by ReLU and a per-pillar max.
#[derive(Clone, Debug)]
pub struct PillarEncoder {
    pub channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PillarEncoder {
    pub fn build(pb: &mut ParamBuilder, channels: usize) -> Self {
        Self {
            channels,
            weight: pb.add("weight", &[channels, POINT_FEATURES], Init::He(POINT_FEATURES)),
            bias: pb.add("bias", &[channels], Init::Zeros),
        }
    }

    /// Embeds and scatters to a `[1, C, X, Y]` map. Cells without a pillar
    /// are exactly zero.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        feats: &PointFeatures,
        grid: &GridSpec,
    ) -> Result<Var> {
        let (nx, ny) = grid.extents()?;
        let rows = feats.features.shape()[0];
        if rows == 0 {
            return Ok(g.leaf(Tensor::zeros(&[1, self.channels, nx, ny])));
        }
        let x = g.leaf(feats.features.cast());
        let e = g.linear(x, g.param(self.weight), Some(g.param(self.bias)))?;
        let a = g.relu(e);
        g.segment_max_scatter(a, &feats.segments, nx, ny)
    }
}

/// Embeds and scatters outside of any training graph.
pub fn encode_scatter<T: Real>(
    feats: &PointFeatures,
    encoder: &PillarEncoder,
    store: &ParamStore<T>,
    grid: &GridSpec,
) -> Result<BevMap<T>> {
    let mut g = Graph::with_params(store);
    let v = encoder.forward(&mut g, feats, grid)?;
    let t = g.value(v).clone();
    let [_, c, h, w] = t.nchw()?;
    Ok(BevMap {
        tensor: t.reshape(&[c, h, w])?,
        grid: *grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full() -> GridSpec {
        GridSpec::full_range()
    }

    #[test]
    fn empty_cloud_gives_empty_set() {
        let s = voxelize(&PointCloud::default(), &full(), &VoxelizeOptions::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn hand_index_example() {
        let cloud = PointCloud::new(vec![[10.05, 3.31, -1.0, 0.5]]);
        let s = voxelize(&cloud, &full(), &VoxelizeOptions::default()).unwrap();
        assert_eq!(s.pillars.len(), 1);
        assert_eq!((s.pillars[0].ix, s.pillars[0].iy), (50, 272));
    }

    #[test]
    fn upper_bound_is_excluded() {
        let cloud = PointCloud::new(vec![[102.4, 0.0, 0.0, 0.1], [0.0, 0.0, 5.0, 0.1]]);
        let s = voxelize(&cloud, &full(), &VoxelizeOptions::default()).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.dropped_points, 2);
    }

    #[test]
    fn membership_is_capped_in_insertion_order() {
        let pts: Vec<Point> = (0..5).map(|i| [1.01, 1.01, 0.0, i as f32 / 10.0]).collect();
        let opts = VoxelizeOptions {
            max_points_per_pillar: 3,
            ..Default::default()
        };
        let s = voxelize(&PointCloud::new(pts), &full(), &opts).unwrap();
        let r: Vec<f32> = s.pillars[0].points.iter().map(|p| p[3]).collect();
        assert_eq!(r, vec![0.0, 0.1, 0.2]);
        assert_eq!(s.pillars[0].count, 5);
        assert_eq!(s.dropped_points, 2);
    }

    #[test]
    fn overflow_drops_least_populated_pillars() {
        let mut pts = vec![[0.1, 0.1, 0.0, 0.0]];
        pts.extend(vec![[0.5, 0.1, 0.0, 0.0]; 3]);
        pts.extend(vec![[0.9, 0.1, 0.0, 0.0]; 2]);
        let opts = VoxelizeOptions {
            max_pillars: 2,
            ..Default::default()
        };
        let s = voxelize(&PointCloud::new(pts), &GridSpec::default(), &opts).unwrap();
        let cells: Vec<usize> = s.pillars.iter().map(|p| p.ix).collect();
        assert_eq!(cells, vec![2, 4]);
        assert_eq!(s.dropped_pillars, 1);
    }

    #[test]
    fn seeded_shuffle_changes_capped_members_deterministically() {
        let pts: Vec<Point> = (0..20).map(|i| [1.01, 1.01, 0.0, i as f32]).collect();
        let opts = VoxelizeOptions {
            max_points_per_pillar: 4,
            shuffle_seed: Some(3),
            ..Default::default()
        };
        let a = voxelize(&PointCloud::new(pts.clone()), &full(), &opts).unwrap();
        let b = voxelize(&PointCloud::new(pts), &full(), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_validation() {
        let mut g = GridSpec::default();
        assert_eq!(g.extents().unwrap(), (64, 64));
        assert_eq!(full().extents().unwrap(), (512, 512));
        g.x_range = [0.0, 12.7];
        assert!(g.validate().is_err());
        g.x_range = [1.0, 1.0];
        assert!(g.validate().is_err());
    }

    #[test]
    fn cell_center_offsets() {
        let cloud = PointCloud::new(vec![[10.05, 3.31, -1.0, 0.5]]);
        let s = voxelize(&cloud, &full(), &VoxelizeOptions::default()).unwrap();
        let f = augment_features(&s).unwrap();
        let row = f.features.data();
        assert_eq!(&row[4..7], &[0.0, 0.0, 0.0]);
        assert!((row[7] + 0.05).abs() < 1e-6, "{}", row[7]);
        assert!((row[8] - 0.01).abs() < 1e-6, "{}", row[8]);
    }

    #[test]
    fn symmetric_points_have_opposite_mean_offsets() {
        let cloud = PointCloud::new(vec![[1.05, 1.02, 0.5, 0.1], [1.15, 1.18, -0.5, 0.3]]);
        let s = voxelize(&cloud, &GridSpec::default(), &VoxelizeOptions::default()).unwrap();
        let f = augment_features(&s).unwrap();
        let d = f.features.data();
        for k in 4..7 {
            assert!((d[k] + d[POINT_FEATURES + k]).abs() < 1e-12);
        }
    }
}
