//! Weakly-supervised point-level scene flow for LiDAR-like point clouds:
//! joint foreground/background segmentation, ego-motion by differentiable
//! weighted Kabsch alignment, and coarse-to-fine non-rigid flow.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod train;

pub use config::{Config, LossConfig, ModelConfig, Profile, Toggles, TrainConfig};
pub use error::{Error, Result};
pub use geometry::{IndexTable, Point, PointCloud, RigidTransform};
pub use model::{ForwardOutput, Model};
