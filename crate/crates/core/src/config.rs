//! Strict JSON run configuration. Every section except `grid` is optional
//! and falls back to the documented defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::blocks::{CsgConfig, HsbConfig};
use crate::cross_scan::Ss2dConfig;
use crate::data_io::SceneConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::head::HeadConfig;
use crate::pillar::{GridSpec, VoxelizeOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width `C` shared by the encoder, backbone and head stem.
    pub channels: usize,
    pub stages: usize,
    pub csg: CsgConfig,
    pub hsb: HsbConfig,
    pub ssm: Ss2dConfig,
    pub pillar: VoxelizeOptions,
    /// Chunk length for the parallel scan; fixing it keeps results
    /// bit-stable across thread counts.
    pub scan_partition: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            channels: b.channels,
            stages: b.stages,
            csg: b.csg,
            hsb: b.hsb,
            ssm: b.ssm,
            pillar: VoxelizeOptions::default(),
            scan_partition: 16,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.channels,
            stages: self.stages,
            csg: self.csg.clone(),
            hsb: self.hsb.clone(),
            ssm: self.ssm.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Default step count of `train-toy`.
    pub steps: usize,
    pub learning_rate: f64,
    /// The step size follows a cosine from `learning_rate` down to
    /// `learning_rate * final_lr_fraction` at the last step.
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.1,
            final_lr_fraction: 0.1,
            grad_clip: Some(5.0),
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    /// Master seed for scene generation and parameter initialization.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scene: SceneConfig,
}

fn default_seed() -> u64 {
    42
}

impl RunConfig {
    pub fn with_grid(grid: GridSpec) -> Self {
        Self {
            grid,
            seed: default_seed(),
            model: ModelConfig::default(),
            head: HeadConfig::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let (x, y) = self.grid.extents()?;
        self.model.backbone().validate(x, y)?;
        self.model.ssm.validate()?;
        self.model.hsb.validate(self.model.channels)?;
        if self.model.scan_partition == 0 {
            return Err(Error::Config("model.scan_partition must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.final_lr_fraction) {
            return Err(Error::Config("train.final_lr_fraction must lie in [0, 1]".into()));
        }
        if self.train.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        self.scene.validate()
    }

    /// Parses and validates; errors carry the JSON path of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical compact JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#""grid": {"x_range": [0, 12.8], "y_range": [-6.4, 6.4], "z_range": [-5, 5], "pillar_size": 0.2}"#;

    #[test]
    fn grid_only_gives_documented_defaults() {
        let cfg = RunConfig::from_json(&format!("{{{GRID}}}")).unwrap();
        assert_eq!(cfg, RunConfig::with_grid(GridSpec::default()));
        let echoed = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(echoed.to_json(), cfg.to_json());
        assert_eq!(cfg.model.channels, 64);
        assert_eq!(cfg.scene.points_per_box, 64);
    }

    #[test]
    fn grid_is_required() {
        let e = RunConfig::from_json("{}").unwrap_err().to_string();
        assert!(e.contains("grid"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(&format!(r#"{{{GRID}, "model": {{"chanels": 8}}}}"#))
            .unwrap_err()
            .to_string();
        assert!(e.contains("chanels"), "{e}");
        assert!(RunConfig::from_json(&format!(r#"{{{GRID}, "extra": 1}}"#)).is_err());
    }

    #[test]
    fn malformed_number_reports_path() {
        let e = RunConfig::from_json(&format!(r#"{{{GRID}, "model": {{"hsb": {{"reduction": "two"}}}}}}"#))
            .unwrap_err()
            .to_string();
        assert!(e.contains("model.hsb.reduction"), "{e}");
        let e = RunConfig::from_json(&format!(r#"{{{GRID}, "train": {{"steps": 1.5}}}}"#))
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.steps"), "{e}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = RunConfig::from_json(&format!(r#"{{{GRID}, "model": {{"stages": 8}}}}"#)).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::with_grid(GridSpec::default());
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed += 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
