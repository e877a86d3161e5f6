//! CPU Gaussian rasterizer.
//!
//! Gaussians are projected to 2D ellipses with the local affine
//! approximation of the pinhole map, globally depth sorted, binned into
//! 16×16 tiles and alpha-composited front to back. [`render_reference`]
//! composites every pixel against every splat and exists to check the tiled
//! path.

mod camera;
mod project;
mod render;

pub use camera::{look_at, DepthImage, Image, Intrinsics, PinholeCamera};
pub use project::{project_gaussian, projection_jacobian, Splat2D, COV_DILATION, NEAR_PLANE};
pub use render::{
    render, render_depth, render_depth_reference, render_reference, render_with, RenderOptions, RenderOutput,
    RenderStats, ALPHA_MAX, ALPHA_MIN, TILE_SIZE, TRANSMITTANCE_MIN,
};

pub(crate) use render::{prepare, splat_alpha, tile_lists};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("look-at eye coincides with target or forward is parallel to up")]
    DegenerateLookAt,
    #[error("expected {expected} pixel bytes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("bad PPM: {0}")]
    BadPpm(String),
}
