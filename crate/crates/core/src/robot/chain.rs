use nalgebra::{DMatrix, Quaternion, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::RobotError;
use crate::Pose;

/// Slack allowed when checking joint values against limits.
pub const LIMIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointType,
    pub axis: Unit<Vector3<f64>>,
    /// parent → joint frame at zero displacement.
    pub origin: Pose,
    pub lower: f64,
    pub upper: f64,
}

impl Joint {
    fn motion(&self, q: f64) -> Pose {
        match self.kind {
            JointType::Revolute => Pose::from_parts(Translation3::identity(), UnitQuaternion::from_axis_angle(&self.axis, q)),
            JointType::Prismatic => Pose::from_parts(Translation3::from(self.axis.into_inner() * q), UnitQuaternion::identity()),
        }
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.lower, self.upper)
    }
}

/// A serial chain rooted at the mobile base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub joints: Vec<Joint>,
    /// last joint → end-effector.
    pub ee_offset: Pose,
}

/// On-disk description of a rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default = "identity_wxyz")]
    pub quat_wxyz: [f64; 4],
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self { xyz: [0.0; 3], quat_wxyz: identity_wxyz() }
    }
}

impl TransformSpec {
    pub fn to_pose(&self) -> Result<Pose, RobotError> {
        let [w, x, y, z] = self.quat_wxyz;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-12) {
            return Err(RobotError::InvalidChain("zero quaternion in transform".into()));
        }
        Ok(Pose::from_parts(Translation3::from(Vector3::from(self.xyz)), UnitQuaternion::from_quaternion(q)))
    }

    pub fn from_pose(p: &Pose) -> Self {
        let q = p.rotation.quaternion();
        Self { xyz: p.translation.vector.into(), quat_wxyz: [q.w, q.i, q.j, q.k] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JointSpec {
    name: String,
    #[serde(rename = "type")]
    kind: JointType,
    axis: [f64; 3],
    #[serde(default)]
    origin: TransformSpec,
    limits: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainSpec {
    #[serde(rename = "joint")]
    joints: Vec<JointSpec>,
    #[serde(default)]
    ee_offset: TransformSpec,
}

/// TOML text of the bundled seven-joint arm.
pub const BUNDLED_ARM: &str = include_str!("../../assets/arm7.toml");

impl KinematicChain {
    pub fn new(joints: Vec<Joint>, ee_offset: Pose) -> Result<Self, RobotError> {
        for j in &joints {
            if !(j.lower < j.upper) {
                return Err(RobotError::InvalidChain(format!("joint `{}`: lower limit must be below upper", j.name)));
            }
        }
        Ok(Self { joints, ee_offset })
    }

    /// Parses the chain description format:
    ///
    /// ```toml
    /// [[joint]]
    /// name = "shoulder"
    /// type = "revolute"            # or "prismatic"
    /// axis = [0.0, 0.0, 1.0]       # normalized on load
    /// origin = { xyz = [0.0, 0.0, 0.3], quat_wxyz = [1.0, 0.0, 0.0, 0.0] }
    /// limits = [-2.9, 2.9]         # rad or m
    ///
    /// [ee_offset]
    /// xyz = [0.0, 0.0, 0.1]
    /// ```
    pub fn from_toml(text: &str) -> Result<Self, RobotError> {
        let spec: ChainSpec = toml::from_str(text).map_err(|e| RobotError::InvalidChain(e.to_string()))?;
        let mut joints = Vec::with_capacity(spec.joints.len());
        for j in spec.joints {
            let axis = Vector3::from(j.axis);
            if !(axis.norm() > 1e-12) {
                return Err(RobotError::InvalidChain(format!("joint `{}`: zero axis", j.name)));
            }
            joints.push(Joint {
                axis: Unit::new_normalize(axis),
                origin: j.origin.to_pose()?,
                lower: j.limits[0],
                upper: j.limits[1],
                kind: j.kind,
                name: j.name,
            });
        }
        Self::new(joints, spec.ee_offset.to_pose()?)
    }

    pub fn to_toml(&self) -> String {
        let spec = ChainSpec {
            joints: self
                .joints
                .iter()
                .map(|j| JointSpec {
                    name: j.name.clone(),
                    kind: j.kind,
                    axis: j.axis.into_inner().into(),
                    origin: TransformSpec::from_pose(&j.origin),
                    limits: [j.lower, j.upper],
                })
                .collect(),
            ee_offset: TransformSpec::from_pose(&self.ee_offset),
        };
        toml::to_string(&spec).expect("chain spec serializes")
    }

    /// The seven-joint arm shipped with the crate.
    pub fn bundled_arm() -> Self {
        Self::from_toml(BUNDLED_ARM).expect("bundled arm description is valid")
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Midpoint of every joint range.
    pub fn mid_configuration(&self) -> Vec<f64> {
        self.joints.iter().map(|j| 0.5 * (j.lower + j.upper)).collect()
    }

    pub fn check_limits(&self, q: &[f64]) -> Result<(), RobotError> {
        if q.len() != self.dof() {
            return Err(RobotError::DofMismatch { expected: self.dof(), actual: q.len() });
        }
        for (i, (j, &v)) in self.joints.iter().zip(q).enumerate() {
            if !(v >= j.lower - LIMIT_EPS && v <= j.upper + LIMIT_EPS) {
                return Err(RobotError::JointLimitViolation { joint: i, value: v, lower: j.lower, upper: j.upper });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (j, v) in self.joints.iter().zip(q.iter_mut()) {
            *v = j.clamp(*v);
        }
    }

    /// base → end-effector transform.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Pose, RobotError> {
        self.check_limits(q)?;
        Ok(self.fk_unchecked(q))
    }

    pub(crate) fn fk_unchecked(&self, q: &[f64]) -> Pose {
        let mut t = Pose::identity();
        for (j, &v) in self.joints.iter().zip(q) {
            t = t * j.origin * j.motion(v);
        }
        t * self.ee_offset
    }

    /// End-effector pose and the 6×n geometric Jacobian in the base frame;
    /// rows 0..3 are linear velocity, rows 3..6 angular.
    pub fn jacobian(&self, q: &[f64]) -> (Pose, DMatrix<f64>) {
        let n = self.dof();
        let mut frames = Vec::with_capacity(n);
        let mut t = Pose::identity();
        for (j, &v) in self.joints.iter().zip(q) {
            let joint_frame = t * j.origin;
            frames.push((joint_frame.translation.vector, joint_frame.rotation * j.axis.into_inner()));
            t = joint_frame * j.motion(v);
        }
        let ee = t * self.ee_offset;
        let p_ee = ee.translation.vector;
        let mut jac = DMatrix::zeros(6, n);
        for (i, ((p, z), joint)) in frames.iter().zip(&self.joints).enumerate() {
            match joint.kind {
                JointType::Revolute => {
                    let lin = z.cross(&(p_ee - p));
                    jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
                    jac.fixed_view_mut::<3, 1>(3, i).copy_from(z);
                }
                JointType::Prismatic => {
                    jac.fixed_view_mut::<3, 1>(0, i).copy_from(z);
                }
            }
        }
        (ee, jac)
    }
}
