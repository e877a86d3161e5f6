//! Simulated mobile manipulator: planar base, serial arm and mounted cameras.

mod chain;
mod ik;

pub use chain::{Joint, JointType, KinematicChain, TransformSpec, BUNDLED_ARM, LIMIT_EPS};
pub use ik::{ik_solve, IkConfig, IkSolution};

use nalgebra::{Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::raster::{render, render_depth, DepthImage, Image, Intrinsics, PinholeCamera};
use crate::splat::SplatScene;
use crate::Pose;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RobotError {
    #[error("expected {expected} joint values, got {actual}")]
    DofMismatch { expected: usize, actual: usize },
    #[error("joint {joint} value {value} outside [{lower}, {upper}]")]
    JointLimitViolation { joint: usize, value: f64, lower: f64, upper: f64 },
    #[error("IK did not converge (position error {position_error:.3e} m, rotation error {rotation_error:.3e} rad)")]
    Unconverged { best: Vec<f64>, position_error: f64, rotation_error: f64 },
    #[error("invalid chain description: {0}")]
    InvalidChain(String),
}

/// Base pose in the world plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    /// Wrapped to (−π, π].
    pub yaw: f64,
}

impl BasePose {
    /// base → world.
    pub fn to_pose(&self) -> Pose {
        Pose::from_parts(
            Translation3::new(self.x, self.y, 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base: BasePose,
    pub joints: Vec<f64>,
    /// Seconds since session start.
    pub timestamp: f64,
}

impl RobotState {
    pub fn new(joints: Vec<f64>) -> Self {
        Self { base: BasePose::default(), joints, timestamp: 0.0 }
    }
}

/// Body-frame base velocity.
///
/// The yaw rate is an extension over a pure `(vx, vy)` command so the
/// base can reorient; it defaults to zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseCommand {
    /// m/s forward.
    pub vx: f64,
    /// m/s left.
    pub vy: f64,
    /// rad/s counter-clockwise.
    #[serde(default)]
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseLimits {
    pub max_linear: f64,
    pub max_angular: f64,
}

impl Default for BaseLimits {
    fn default() -> Self {
        Self { max_linear: 1.0, max_angular: 1.0 }
    }
}

impl BaseCommand {
    pub fn is_zero(&self) -> bool {
        self.vx == 0.0 && self.vy == 0.0 && self.omega == 0.0
    }

    pub fn clamped(&self, limits: &BaseLimits) -> Self {
        let c = |v: f64, cap: f64| if v.is_finite() { v.clamp(-cap, cap) } else { 0.0 };
        Self {
            vx: c(self.vx, limits.max_linear),
            vy: c(self.vy, limits.max_linear),
            omega: c(self.omega, limits.max_angular),
        }
    }
}

/// Cartesian end-effector goal with optional orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EETarget {
    pub position: Vector3<f64>,
    #[serde(default)]
    pub orientation: Option<UnitQuaternion<f64>>,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Forward-Euler integration of a body-frame velocity over `dt` seconds.
pub fn base_step(state: &RobotState, cmd: &BaseCommand, dt: f64) -> RobotState {
    let (s, c) = state.base.yaw.sin_cos();
    let base = BasePose {
        x: state.base.x + (cmd.vx * c - cmd.vy * s) * dt,
        y: state.base.y + (cmd.vx * s + cmd.vy * c) * dt,
        yaw: wrap_angle(state.base.yaw + cmd.omega * dt),
    };
    RobotState { base, joints: state.joints.clone(), timestamp: state.timestamp + dt }
}

/// Moves each joint toward `target` by at most `max_rate · dt`.
pub fn track_joints(current: &[f64], target: &[f64], max_rate: f64, dt: f64) -> Vec<f64> {
    let step = max_rate * dt;
    current.iter().zip(target).map(|(&q, &t)| q + (t - q).clamp(-step, step)).collect()
}

/// Camera intrinsics and mounting extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub base_intrinsics: Intrinsics,
    /// camera → base.
    pub base_mount: Pose,
    pub ee_intrinsics: Intrinsics,
    /// camera → end-effector.
    pub ee_mount: Pose,
}

impl Default for CameraRig {
    /// Base camera 0.3 m ahead and 0.5 m up, looking forward; wrist camera
    /// 5 cm off the tool axis, looking along it.
    fn default() -> Self {
        // Columns: camera x = −base y, camera y = −base z, camera z = base x.
        let forward = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
            nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
        ));
        Self {
            base_intrinsics: Intrinsics::centered(60.0, 96, 72),
            base_mount: Pose::from_parts(Translation3::new(0.3, 0.0, 0.5), forward),
            ee_intrinsics: Intrinsics::centered(40.0, 48, 48),
            ee_mount: Pose::from_parts(Translation3::new(0.05, 0.0, 0.0), UnitQuaternion::identity()),
        }
    }
}

/// World → camera poses of both cameras for a robot state.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPoses {
    pub base: PinholeCamera,
    pub ee: PinholeCamera,
}

pub fn camera_poses(chain: &KinematicChain, state: &RobotState, rig: &CameraRig) -> Result<CameraPoses, RobotError> {
    let base_to_world = state.base.to_pose();
    let ee = chain.forward_kinematics(&state.joints)?;
    let base_c2w = base_to_world * rig.base_mount;
    let ee_c2w = base_to_world * ee * rig.ee_mount;
    Ok(CameraPoses {
        base: rig.base_intrinsics.with_pose(base_c2w.inverse()),
        ee: rig.ee_intrinsics.with_pose(ee_c2w.inverse()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrames {
    pub cameras: CameraPoses,
    pub base_frame: Image,
    pub ee_frame: Image,
    pub ee_depth: DepthImage,
}

/// Renders both mounted cameras against the ground-truth world scene.
pub fn simulate_cameras(
    world: &SplatScene,
    chain: &KinematicChain,
    state: &RobotState,
    rig: &CameraRig,
    background: [f64; 3],
) -> Result<CameraFrames, RobotError> {
    let cameras = camera_poses(chain, state, rig)?;
    Ok(CameraFrames {
        base_frame: render(world, &cameras.base, background),
        ee_frame: render(world, &cameras.ee, background),
        ee_depth: render_depth(world, &cameras.ee),
        cameras,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two unit links rotating about +z.
    pub(crate) fn planar_two_link() -> KinematicChain {
        let joint = |name: &str, x: f64| Joint {
            name: name.into(),
            kind: JointType::Revolute,
            axis: Vector3::z_axis(),
            origin: Pose::translation(x, 0.0, 0.0),
            lower: -PI,
            upper: PI,
        };
        KinematicChain::new(vec![joint("a", 0.0), joint("b", 1.0)], Pose::translation(1.0, 0.0, 0.0)).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian3D;
    use std::f64::consts::FRAC_PI_2;

    fn state() -> RobotState {
        RobotState::new(KinematicChain::bundled_arm().mid_configuration())
    }

    #[test]
    fn base_step_forward() {
        let s = base_step(&state(), &BaseCommand { vx: 1.0, vy: 0.0, omega: 0.0 }, 0.1);
        assert_eq!((s.base.x, s.base.y), (0.1, 0.0));
        assert!((s.timestamp - 0.1).abs() < 1e-15);
    }

    #[test]
    fn base_step_rotated_frame() {
        let mut st = state();
        st.base.yaw = FRAC_PI_2;
        let s = base_step(&st, &BaseCommand { vx: 1.0, vy: 0.0, omega: 0.0 }, 0.1);
        assert!(s.base.x.abs() < 1e-12 && (s.base.y - 0.1).abs() < 1e-12);
    }

    #[test]
    fn full_turn_wraps_back() {
        // π/50 of yaw per step; 100 steps make one full turn.
        let mut s = state();
        let cmd = BaseCommand { vx: 0.0, vy: 0.0, omega: PI / 5.0 };
        for _ in 0..100 {
            s = base_step(&s, &cmd, 0.1);
            assert!(s.base.yaw > -PI && s.base.yaw <= PI);
        }
        assert!(wrap_angle(s.base.yaw).abs() < 1e-9, "{}", s.base.yaw);
    }

    #[test]
    fn time_additive_without_rotation() {
        let cmd = BaseCommand { vx: 0.7, vy: -0.3, omega: 0.0 };
        let mut st = state();
        st.base.yaw = 0.4;
        let two = base_step(&base_step(&st, &cmd, 0.05), &cmd, 0.05);
        let one = base_step(&st, &cmd, 0.1);
        assert!((two.base.x - one.base.x).abs() < 1e-12 && (two.base.y - one.base.y).abs() < 1e-12);
    }

    #[test]
    fn time_additive_with_rotation_within_euler_bound() {
        // Two half steps vs one full step differ by the yaw change over the
        // first half step acting on the second: |v|·ω·(dt/2)² to first order.
        let cmd = BaseCommand { vx: 0.8, vy: 0.2, omega: 0.9 };
        let dt = 0.1;
        let st = state();
        let two = base_step(&base_step(&st, &cmd, dt / 2.0), &cmd, dt / 2.0);
        let one = base_step(&st, &cmd, dt);
        let gap = ((two.base.x - one.base.x).powi(2) + (two.base.y - one.base.y).powi(2)).sqrt();
        let speed = (cmd.vx.powi(2) + cmd.vy.powi(2)).sqrt();
        let bound = speed * cmd.omega * (dt / 2.0).powi(2) * 1.01;
        assert!(gap > 0.0 && gap <= bound, "{gap} > {bound}");
        assert!((two.base.yaw - one.base.yaw).abs() < 1e-12);
    }

    #[test]
    fn clamp_command() {
        let c = BaseCommand { vx: 5.0, vy: -5.0, omega: f64::NAN }.clamped(&BaseLimits::default());
        assert_eq!(c, BaseCommand { vx: 1.0, vy: -1.0, omega: 0.0 });
    }

    #[test]
    fn tracking_is_rate_limited() {
        let q = track_joints(&[0.0, 1.0, 0.5], &[1.0, 0.0, 0.51], 1.0, 0.02);
        assert_eq!(q, vec![0.02, 0.98, 0.51]);
    }

    #[test]
    fn base_camera_moves_rigidly_with_base() {
        let chain = KinematicChain::bundled_arm();
        let rig = CameraRig::default();
        let s0 = state();
        let s1 = base_step(&s0, &BaseCommand { vx: 1.0, vy: 0.0, omega: 0.0 }, 0.1);
        let mut s1 = s1.clone();
        s1.base.x = 1.0;
        s1.base.y = 0.0;
        let p0 = camera_poses(&chain, &s0, &rig).unwrap().base.center();
        let p1 = camera_poses(&chain, &s1, &rig).unwrap().base.center();
        assert_eq!(p1 - p0, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn empty_world_frames_are_background() {
        let chain = KinematicChain::bundled_arm();
        let frames = simulate_cameras(&SplatScene::empty("world"), &chain, &state(), &CameraRig::default(), [0.2; 3]).unwrap();
        assert!(frames.base_frame.pixels.iter().all(|&v| v == 0.2f32));
        assert!(frames.ee_frame.pixels.iter().all(|&v| v == 0.2f32));
        assert!(frames.ee_depth.depth.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn simulate_cameras_is_pure() {
        let chain = KinematicChain::bundled_arm();
        let world = SplatScene::new(
            vec![Gaussian3D::isotropic(Vector3::new(1.5, 0.0, 0.5), 0.2, 0.9, [0.9, 0.1, 0.1])],
            "world",
        )
        .unwrap();
        let a = simulate_cameras(&world, &chain, &state(), &CameraRig::default(), [0.0; 3]).unwrap();
        let b = simulate_cameras(&world, &chain, &state(), &CameraRig::default(), [0.0; 3]).unwrap();
        assert_eq!(a, b);
        assert!(a.base_frame.pixels.iter().any(|&v| v > 0.0));
    }
}
