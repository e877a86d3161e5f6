//! Capture planning, geometry seeding, bundle adjustment and splat fitting.

mod bundle;
mod plan;
mod seed;
mod train;

pub use bundle::{bundle_adjust, BundleConfig, BundleResult};
pub use plan::{default_rings, plan_capture, CapturePlan, Ring};
pub use seed::{seed_scene, triangulate, Observation, PosedImage, Ray, SeedConfig};
pub use train::{
    gaussian_from_params, gaussian_params, loss_gradient, psnr, train_splats, view_loss, GaussianParams, LearningRates,
    TrainConfig, TrainResult, N_PARAMS,
};

use crate::splat::{SplatError, SplatScene};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ReconError {
    #[error("ring {ring} has a non-positive radius, zero count or non-finite height")]
    InvalidRing { ring: usize },
    #[error("ring {ring} places a camera on the look-at point's vertical")]
    DegenerateRing { ring: usize },
    #[error("capture plan line {line}: {reason}")]
    BadPlan { line: usize, reason: String },
    #[error("rays are parallel")]
    ParallelRays,
    #[error("need at least 2 views, got {0}")]
    InsufficientViews(usize),
    #[error("image and camera dimensions disagree")]
    DimensionMismatch,
    #[error("observation index out of range")]
    IndexOutOfRange,
    #[error("views produced no 3D points")]
    NoGeometry,
    #[error("camera {0} observes no points")]
    UnobservedCamera(usize),
    #[error("observation {0} lies behind its camera")]
    PointBehindCamera(usize),
    #[error("normal equations singular at iteration {iteration}")]
    SingularNormalEquations { iteration: usize },
    #[error("training needs a non-empty scene and at least one target")]
    EmptyTraining,
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        /// Last iterate whose loss was finite.
        last_scene: Box<SplatScene>,
        losses: Vec<f64>,
    },
    #[error(transparent)]
    Splat(#[from] SplatError),
}
