//! Invariance co-training for visuomotor policies.
//!
//! A small tabletop world is rendered from many viewpoints, lighting
//! conditions and clutter configurations. A vision encoder and diffusion
//! policy are trained with behavior cloning plus contrastive alignment,
//! extrinsics regression and bounding-box regression, and evaluated
//! closed-loop under viewpoint, lighting and distractor perturbations.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod rng;
pub mod training;
pub mod world;

pub use error::{Error, Result};
pub use data::{Dataset, TrainingBatch};
pub use geometry::{Camera, PerturbationRegime, Pose, PoseTarget};
pub use losses::{LossReport, LossWeights};
pub use model::{ModelConfig, ModelParams};
pub use rng::RandomStream;
pub use world::{Action, Goal, Image, ObservationConfig, SceneState};
