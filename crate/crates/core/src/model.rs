//! The full detector: pillar encoder, multi-scale backbone and center head.

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::error::Result;
use crate::head::{decode, Detection, DetectionHead};
use crate::pillar::{augment_features, voxelize, GridSpec, PillarEncoder, PointCloud, PointFeatures};
use crate::rng::Rng64;
use crate::tensor::{Graph, ParamBuilder, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PillarMamba {
    pub cfg: RunConfig,
    pub grid: GridSpec,
    pub encoder: PillarEncoder,
    pub backbone: Backbone,
    pub head: DetectionHead,
}

impl PillarMamba {
    /// Declares every parameter under the scopes `encoder`, `backbone` and
    /// `head`.
    pub fn build(cfg: &RunConfig) -> Result<(Self, ParamBuilder)> {
        cfg.validate()?;
        let (x, y) = cfg.grid.extents()?;
        let c = cfg.model.channels;
        let mut pb = ParamBuilder::new();
        let encoder = pb.scoped("encoder", |pb| PillarEncoder::build(pb, c));
        let backbone = pb.scoped("backbone", |pb| Backbone::build(pb, &cfg.model.backbone(), x, y))?;
        let head = pb.scoped("head", |pb| DetectionHead::build(pb, c, &cfg.head));
        let model = Self {
            cfg: cfg.clone(),
            grid: cfg.grid,
            encoder,
            backbone,
            head,
        };
        Ok((model, pb))
    }

    /// Builds and initializes parameters from `seed`.
    pub fn init<T: Real>(cfg: &RunConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let (m, pb) = Self::build(cfg)?;
        let store = pb.materialize(&mut Rng64::new(seed));
        Ok((m, store))
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<PointFeatures> {
        let set = voxelize(cloud, &self.grid, &self.cfg.model.pillar)?;
        augment_features(&set)
    }

    /// Raw head maps `[1, K + 8, X, Y]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, feats: &PointFeatures) -> Result<Var> {
        let f0 = self.encoder.forward(g, feats, &self.grid)?;
        let pyramid = self.backbone.forward(g, f0)?;
        self.head.forward(g, pyramid.fused)
    }

    pub fn infer<T: Real>(&self, store: &ParamStore<T>, cloud: &PointCloud) -> Result<Tensor<T>> {
        let feats = self.prepare(cloud)?;
        let mut g = Graph::with_params(store);
        let raw = self.forward(&mut g, &feats)?;
        Ok(g.value(raw).clone())
    }

    pub fn detect<T: Real>(&self, store: &ParamStore<T>, cloud: &PointCloud) -> Result<Vec<Detection>> {
        let raw = self.infer(store, cloud)?;
        decode(&raw, &self.grid, self.cfg.head.top_k, self.cfg.head.score_threshold)
    }
}
