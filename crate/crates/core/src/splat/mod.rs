//! Gaussian splat primitives, scenes and their on-disk encodings.

mod binary;
mod ply;

pub use binary::{decode_quaternion, encode_quaternion, encode_splat_binary, load_splat_binary, RECORD_SIZE};
pub use ply::{load_ply, save_ply, SH_C0};

use nalgebra::{Matrix3, Point3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Quaternions further than this from unit norm are renormalized on load.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

/// Frame name given to scenes that do not carry one of their own.
pub const DEFAULT_FRAME: &str = "world";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SplatError {
    #[error("input length {0} is not a multiple of the 32-byte record size")]
    TruncatedRecord(usize),
    #[error("record {index}: non-finite {field}")]
    NonFiniteValue { index: usize, field: &'static str },
    #[error("record {0}: quaternion decodes to zero")]
    ZeroQuaternion(usize),
    #[error("PLY header is missing vertex property `{0}`")]
    MissingProperty(String),
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("scene frame id must be non-empty")]
    EmptyFrameId,
}

/// One anisotropic Gaussian primitive.
///
/// The covariance is stored factored as a rotation and per-axis standard
/// deviations; use [`covariance_of`] to expand it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    /// Per-axis standard deviation in meters (linear, not log).
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    /// Builds a Gaussian from a raw `(w, x, y, z)` quaternion, normalizing it.
    pub fn new(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        rotation_wxyz: [f64; 4],
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self, SplatError> {
        let q = Quaternion::new(rotation_wxyz[0], rotation_wxyz[1], rotation_wxyz[2], rotation_wxyz[3]);
        if !(q.norm() > 0.0) {
            return Err(SplatError::ZeroQuaternion(0));
        }
        let g = Self {
            mean,
            scale,
            rotation: UnitQuaternion::from_quaternion(q),
            opacity,
            color,
        };
        g.validate().map_err(|reason| SplatError::InvalidGaussian { index: 0, reason })?;
        Ok(g)
    }

    /// Isotropic, unrotated Gaussian.
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mean,
            scale: Vector3::repeat(sigma),
            rotation: UnitQuaternion::identity(),
            opacity,
            color,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err("non-finite mean".into());
        }
        if !self.scale.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(format!("scale must be finite and positive, got {:?}", self.scale.as_slice()));
        }
        if (self.rotation.quaternion().norm() - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err("rotation is not a unit quaternion".into());
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(format!("color {:?} outside [0, 1]", self.color));
        }
        Ok(())
    }

    /// Rotation as `[w, x, y, z]`.
    pub fn rotation_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

/// `R · S · Sᵀ · Rᵀ` for the Gaussian's rotation `R` and `S = diag(scale)`.
pub fn covariance_of(g: &Gaussian3D) -> Matrix3<f64> {
    let r = g.rotation.to_rotation_matrix().into_inner();
    let s = Matrix3::from_diagonal(&g.scale);
    let m = r * s;
    m * m.transpose()
}

/// Applies a rotation about the origin to a Gaussian's mean and orientation.
pub fn rotate(g: &Gaussian3D, q: &UnitQuaternion<f64>) -> Gaussian3D {
    Gaussian3D {
        mean: q * g.mean,
        rotation: q * g.rotation,
        ..g.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }
}

/// An ordered set of Gaussians in a named coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatScene {
    gaussians: Vec<Gaussian3D>,
    frame_id: String,
    bounds: Option<Aabb>,
}

impl SplatScene {
    pub fn new(gaussians: Vec<Gaussian3D>, frame_id: impl Into<String>) -> Result<Self, SplatError> {
        let frame_id = frame_id.into();
        if frame_id.is_empty() {
            return Err(SplatError::EmptyFrameId);
        }
        for (index, g) in gaussians.iter().enumerate() {
            g.validate().map_err(|reason| SplatError::InvalidGaussian { index, reason })?;
        }
        let bounds = compute_bounds(&gaussians);
        Ok(Self { gaussians, frame_id, bounds })
    }

    pub fn empty(frame_id: impl Into<String>) -> Self {
        Self::new(Vec::new(), frame_id).expect("empty scene with a frame id is valid")
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn into_gaussians(self) -> Vec<Gaussian3D> {
        self.gaussians
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    /// Axis-aligned box over all means; `None` for an empty scene.
    pub fn bounds(&self) -> Option<Aabb> {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Same Gaussians expressed in another frame: `x' = transform · x`.
    pub fn transformed(&self, transform: &crate::Pose, frame_id: impl Into<String>) -> Result<Self, SplatError> {
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| Gaussian3D {
                mean: transform.transform_point(&Point3::from(g.mean)).coords,
                rotation: transform.rotation * g.rotation,
                ..g.clone()
            })
            .collect();
        Self::new(gaussians, frame_id)
    }
}

fn compute_bounds(gaussians: &[Gaussian3D]) -> Option<Aabb> {
    let first = gaussians.first()?;
    let mut min = Point3::from(first.mean);
    let mut max = min;
    for g in &gaussians[1..] {
        for i in 0..3 {
            min[i] = min[i].min(g.mean[i]);
            max[i] = max[i].max(g.mean[i]);
        }
    }
    Some(Aabb { min, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn gaussian(scale: [f64; 3], rot: UnitQuaternion<f64>) -> Gaussian3D {
        Gaussian3D {
            mean: Vector3::zeros(),
            scale: Vector3::from(scale),
            rotation: rot,
            opacity: 1.0,
            color: [0.5; 3],
        }
    }

    #[test]
    fn covariance_identity() {
        let c = covariance_of(&gaussian([1.0, 1.0, 1.0], UnitQuaternion::identity()));
        assert_eq!(c, Matrix3::identity());
    }

    #[test]
    fn covariance_diagonal() {
        let c = covariance_of(&gaussian([2.0, 1.0, 1.0], UnitQuaternion::identity()));
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        // R = [[0,-1,0],[1,0,0],[0,0,1]]; R·diag(4,1,1)·Rᵀ = diag(1,4,1).
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let c = covariance_of(&gaussian([2.0, 1.0, 1.0], rot));
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((c - expected).abs().max() < 1e-12, "{c}");
    }

    #[test]
    fn new_rejects_bad_fields() {
        let m = Vector3::zeros();
        assert!(Gaussian3D::new(m, Vector3::new(0.0, 1.0, 1.0), [1.0, 0.0, 0.0, 0.0], 0.5, [0.0; 3]).is_err());
        assert!(Gaussian3D::new(m, Vector3::repeat(1.0), [0.0; 4], 0.5, [0.0; 3]).is_err());
        assert!(Gaussian3D::new(m, Vector3::repeat(1.0), [1.0, 0.0, 0.0, 0.0], 1.5, [0.0; 3]).is_err());
        assert!(Gaussian3D::new(m, Vector3::repeat(1.0), [1.0, 0.0, 0.0, 0.0], 0.5, [0.0, 2.0, 0.0]).is_err());
        let g = Gaussian3D::new(m, Vector3::repeat(1.0), [2.0, 0.0, 0.0, 0.0], 0.5, [0.0; 3]).unwrap();
        assert_eq!(g.rotation_wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn scene_bounds_and_frame() {
        assert_eq!(SplatScene::new(vec![], ""), Err(SplatError::EmptyFrameId));
        let gs = vec![
            Gaussian3D::isotropic(Vector3::new(1.0, -2.0, 0.5), 0.1, 1.0, [1.0; 3]),
            Gaussian3D::isotropic(Vector3::new(-1.0, 3.0, 0.0), 0.1, 1.0, [1.0; 3]),
        ];
        let scene = SplatScene::new(gs, "world").unwrap();
        let b = scene.bounds().unwrap();
        assert_eq!(b.min, Point3::new(-1.0, -2.0, 0.0));
        assert_eq!(b.max, Point3::new(1.0, 3.0, 0.5));
        assert!(SplatScene::empty("world").bounds().is_none());
    }

    fn arb_gaussian() -> impl Strategy<Value = Gaussian3D> {
        (
            prop::array::uniform3(-5.0..5.0f64),
            prop::array::uniform3(0.01..2.0f64),
            prop::array::uniform4(-1.0..1.0f64),
        )
            .prop_filter_map("non-zero quaternion", |(m, s, q)| {
                Gaussian3D::new(Vector3::from(m), Vector3::from(s), q, 0.5, [0.5; 3]).ok()
            })
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_positive_definite(g in arb_gaussian()) {
            let c = covariance_of(&g);
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let min_eig = c.symmetric_eigenvalues().min();
            prop_assert!(min_eig > 0.0, "smallest eigenvalue {}", min_eig);
        }

        #[test]
        fn covariance_is_rotation_equivariant(g in arb_gaussian(), axis in prop::array::uniform3(-1.0..1.0f64), angle in -3.0..3.0f64) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let rotated = covariance_of(&rotate(&g, &q));
            let r = q.to_rotation_matrix().into_inner();
            let expected = r * covariance_of(&g) * r.transpose();
            prop_assert!((rotated - expected).abs().max() < 1e-9);
        }
    }
}
