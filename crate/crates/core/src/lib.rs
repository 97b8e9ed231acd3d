//! Roadside lidar 3D detection with pillar BEV encoding and selective
//! state-space scans.

pub mod backbone;
pub mod blocks;
pub mod config;
pub mod cross_scan;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod pillar;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
