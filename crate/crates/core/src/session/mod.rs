//! The two-phase teleoperation state machine and its control loop.
//!
//! A [`Session`] owns the simulated robot, the ground-truth world used by
//! its cameras and the reconstructed splat. Commands are gated by
//! [`Phase`]; everything else happens in [`Session::tick`].

mod capture;

pub use capture::{run_capture_routine, CaptureReport};

use std::fmt;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::raster::{DepthImage, Image, PinholeCamera, RenderOptions};
use crate::recon::{default_rings, seed_scene, train_splats, ReconError, Ring, SeedConfig, TrainConfig};
use crate::robot::{
    base_step, camera_poses, ik_solve, track_joints, BaseCommand, BaseLimits, CameraRig, EETarget, IkConfig,
    KinematicChain, RobotError, RobotState,
};
use crate::splat::SplatScene;
use crate::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Locomotion,
    Reconstructing,
    Manipulation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Locomotion => "locomotion",
            Phase::Reconstructing => "reconstructing",
            Phase::Manipulation => "manipulation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorCommand {
    /// Held until replaced; zeroed when leaving locomotion.
    Drive(BaseCommand),
    BeginReconstruction,
    AbortReconstruction,
    /// End-effector goal in the splat frame.
    DragTarget(EETarget),
    ReleaseDrag,
    SwitchToLocomotion,
}

impl OperatorCommand {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorCommand::Drive(_) => "drive",
            OperatorCommand::BeginReconstruction => "begin_reconstruction",
            OperatorCommand::AbortReconstruction => "abort_reconstruction",
            OperatorCommand::DragTarget(_) => "drag_target",
            OperatorCommand::ReleaseDrag => "release_drag",
            OperatorCommand::SwitchToLocomotion => "switch_to_locomotion",
        }
    }
}

/// A command that is not legal in the current phase. The session is left
/// untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{command} rejected in {phase} phase: {reason}")]
pub struct Rejected {
    pub phase: Phase,
    pub command: String,
    pub reason: String,
}

/// Side effects of an accepted command.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    BaseCommandSet(BaseCommand),
    PhaseChanged { from: Phase, to: Phase },
    /// Joint targets sent to the arm controller after solving IK.
    JointCommand { joints: Vec<f64>, status: IkStatus },
    SplatDiscarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IkStatus {
    Idle,
    Ok { position_error: f64 },
    Unconverged { position_error: f64, rotation_error: f64 },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("only {reachable} of {planned} capture poses are reachable")]
    TooFewCaptures { reachable: usize, planned: usize },
    #[error("the capture routine needs the reconstructing phase, session is in {0}")]
    NotReconstructing(Phase),
    #[error("invalid session configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error(transparent)]
    Recon(#[from] ReconError),
}

/// Reconstruction settings: where to look, how to seed and how long to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    /// Scene center in the base frame.
    pub center: [f64; 3],
    pub rings: Vec<Ring>,
    /// Random IK restarts per capture pose after the previous solution and
    /// the home configuration both fail.
    pub ik_restarts: usize,
    pub seed: SeedConfig,
    pub train: TrainConfig,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            center: [0.65, 0.0, 0.25],
            rings: default_rings(),
            ik_restarts: 16,
            seed: SeedConfig::default(),
            train: TrainConfig { iterations: 100, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Hz.
    pub tick_rate: f64,
    /// Camera frames are rendered every this many ticks.
    pub frame_stride: u64,
    /// Joint tracking rate limit, rad/s (or m/s for prismatic joints).
    pub joint_rate: f64,
    pub base_limits: BaseLimits,
    pub ik: IkConfig,
    pub capture: CaptureConfig,
    pub background: [f64; 3],
    pub rng_seed: u64,
    /// Render worker count; 0 uses the global pool.
    pub render_workers: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            tick_rate: 50.0,
            frame_stride: 5,
            joint_rate: 1.0,
            base_limits: BaseLimits::default(),
            ik: IkConfig::default(),
            capture: CaptureConfig::default(),
            background: [0.0; 3],
            rng_seed: 0,
            render_workers: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: &str| Err(SessionError::InvalidConfig(m.to_string()));
        if !(self.tick_rate > 0.0 && self.tick_rate.is_finite()) {
            return bad("tick_rate must be positive");
        }
        if self.frame_stride == 0 {
            return bad("frame_stride must be at least 1");
        }
        if !(self.joint_rate > 0.0) {
            return bad("joint_rate must be positive");
        }
        if 1.0 / self.tick_rate > 0.1 {
            return bad("tick_rate below 10 Hz exceeds the base integration step bound");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    Base = 0,
    Ee = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub camera: CameraId,
    /// Strictly increasing per camera.
    pub seq: u32,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub seq: u32,
    pub depth: DepthImage,
}

/// Internal events surfaced alongside the state snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    ReconstructionFinished { captures: usize, skipped: usize, gaussians: usize, final_loss: f64 },
    ReconstructionFailed { reason: String },
}

/// Snapshot emitted by every tick.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPacket {
    pub tick: u64,
    pub robot: RobotState,
    pub phase: Phase,
    /// End-effector pose in the base frame.
    pub ee_pose: Pose,
    pub ik_status: IkStatus,
    /// Bumped whenever the splat is replaced or discarded.
    pub splat_version: u64,
    pub splat_stale: bool,
    pub frames: Vec<CameraFrame>,
    pub ee_depth: Option<DepthFrame>,
    pub events: Vec<SessionEvent>,
}

pub struct Session {
    cfg: SessionConfig,
    chain: KinematicChain,
    rig: CameraRig,
    world: SplatScene,
    phase: Phase,
    robot: RobotState,
    joint_target: Vec<f64>,
    drive: BaseCommand,
    splat: Option<SplatScene>,
    splat_version: u64,
    splat_stale: bool,
    /// Maps splat coordinates into the base frame.
    alignment: Pose,
    reconstruction_pending: bool,
    ik_status: IkStatus,
    tick: u64,
    frame_seq: u32,
    last_capture: Option<CaptureReport>,
}

impl Session {
    /// Starts in locomotion at the world origin with the arm at the middle of
    /// its joint ranges.
    pub fn new(cfg: SessionConfig, chain: KinematicChain, rig: CameraRig, world: SplatScene) -> Result<Self, SessionError> {
        cfg.validate()?;
        let home = chain.mid_configuration();
        Ok(Self {
            cfg,
            chain,
            rig,
            world,
            phase: Phase::Locomotion,
            robot: RobotState::new(home.clone()),
            joint_target: home,
            drive: BaseCommand::default(),
            splat: None,
            splat_version: 0,
            splat_stale: false,
            alignment: Pose::identity(),
            reconstruction_pending: false,
            ik_status: IkStatus::Idle,
            tick: 0,
            frame_seq: 0,
            last_capture: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn world(&self) -> &SplatScene {
        &self.world
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn robot(&self) -> &RobotState {
        &self.robot
    }

    /// Joint values the arm is tracking toward.
    pub fn joint_target(&self) -> &[f64] {
        &self.joint_target
    }

    pub fn splat(&self) -> Option<&SplatScene> {
        self.splat.as_ref()
    }

    pub fn splat_version(&self) -> u64 {
        self.splat_version
    }

    /// True once manipulation has been left; the splat may no longer match
    /// the scene around the robot.
    pub fn splat_stale(&self) -> bool {
        self.splat_stale
    }

    pub fn alignment(&self) -> &Pose {
        &self.alignment
    }

    /// splat frame → base frame; identity for splats captured by this robot.
    pub fn set_alignment(&mut self, alignment: Pose) {
        self.alignment = alignment;
    }

    /// Replaces the splat with an externally produced one and marks it
    /// current. Does not change phase.
    pub fn import_splat(&mut self, scene: SplatScene) {
        self.splat = Some(scene);
        self.splat_version += 1;
        self.splat_stale = false;
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn period(&self) -> f64 {
        1.0 / self.cfg.tick_rate
    }

    pub fn last_capture(&self) -> Option<&CaptureReport> {
        self.last_capture.as_ref()
    }

    /// Applies one operator command. Illegal (phase, command) pairs are
    /// rejected without touching any state.
    pub fn handle_command(&mut self, cmd: OperatorCommand) -> Result<Vec<Effect>, Rejected> {
        let reject = |phase: Phase, reason: &str| Rejected { phase, command: cmd.name().to_string(), reason: reason.to_string() };
        match (self.phase, &cmd) {
            (Phase::Locomotion, OperatorCommand::Drive(c)) => {
                self.drive = c.clamped(&self.cfg.base_limits);
                Ok(vec![Effect::BaseCommandSet(self.drive)])
            }
            (Phase::Locomotion, OperatorCommand::BeginReconstruction) => {
                self.reconstruction_pending = true;
                Ok(self.set_phase(Phase::Reconstructing))
            }
            (Phase::Reconstructing, OperatorCommand::AbortReconstruction) => {
                self.reconstruction_pending = false;
                let mut effects = self.set_phase(Phase::Locomotion);
                if self.splat.take().is_some() {
                    self.splat_version += 1;
                    effects.push(Effect::SplatDiscarded);
                }
                self.splat_stale = false;
                Ok(effects)
            }
            (Phase::Manipulation, OperatorCommand::DragTarget(t)) => Ok(vec![self.drag(t)]),
            // Releasing leaves the arm holding its last commanded pose.
            (Phase::Manipulation, OperatorCommand::ReleaseDrag) => Ok(Vec::new()),
            (Phase::Manipulation, OperatorCommand::SwitchToLocomotion) => {
                self.splat_stale = true;
                Ok(self.set_phase(Phase::Locomotion))
            }
            (phase, OperatorCommand::Drive(_)) => Err(reject(phase, "the base only moves in locomotion")),
            (phase, OperatorCommand::DragTarget(_) | OperatorCommand::ReleaseDrag) => {
                Err(reject(phase, "the arm is only commanded in manipulation"))
            }
            (Phase::Manipulation, OperatorCommand::BeginReconstruction) => {
                Err(reject(Phase::Manipulation, "switch to locomotion before reconstructing again"))
            }
            (phase, OperatorCommand::BeginReconstruction) => Err(reject(phase, "already reconstructing")),
            (phase, OperatorCommand::AbortReconstruction) => Err(reject(phase, "no reconstruction in progress")),
            (phase, OperatorCommand::SwitchToLocomotion) => Err(reject(phase, "only manipulation switches to locomotion")),
        }
    }

    fn set_phase(&mut self, to: Phase) -> Vec<Effect> {
        let from = self.phase;
        self.phase = to;
        let mut effects = vec![Effect::PhaseChanged { from, to }];
        if from == Phase::Locomotion && !self.drive.is_zero() {
            self.drive = BaseCommand::default();
            effects.push(Effect::BaseCommandSet(self.drive));
        }
        effects
    }

    fn drag(&mut self, target: &EETarget) -> Effect {
        let base_target = EETarget {
            position: (self.alignment * Point3::from(target.position)).coords,
            orientation: target.orientation.map(|q| self.alignment.rotation * q),
        };
        let (joints, status) = match ik_solve(&self.chain, &base_target, &self.robot.joints, &self.cfg.ik) {
            Ok(sol) => (sol.joints, IkStatus::Ok { position_error: sol.position_error }),
            Err(RobotError::Unconverged { best, position_error, rotation_error }) => {
                (best, IkStatus::Unconverged { position_error, rotation_error })
            }
            Err(e) => {
                // Current joints are always within limits, so this is a bug.
                unreachable!("IK seeded from a valid state failed: {e}")
            }
        };
        self.joint_target = joints.clone();
        self.ik_status = status;
        Effect::JointCommand { joints, status }
    }

    /// Advances the simulation by one period.
    ///
    /// A pending reconstruction runs to completion first (synchronously, so
    /// runs are reproducible). Then the base integrates the held drive
    /// command in locomotion, the arm tracks its joint target at the
    /// configured rate, and camera frames are rendered every
    /// `frame_stride` ticks.
    pub fn tick(&mut self) -> FeedbackPacket {
        let dt = self.period();
        let mut events = Vec::new();
        if self.reconstruction_pending {
            self.reconstruction_pending = false;
            events.push(self.reconstruct());
        }
        let mut next = if self.phase == Phase::Locomotion {
            base_step(&self.robot, &self.drive, dt)
        } else {
            RobotState { timestamp: self.robot.timestamp + dt, ..self.robot.clone() }
        };
        next.joints = track_joints(&self.robot.joints, &self.joint_target, self.cfg.joint_rate, dt);
        self.chain.clamp(&mut next.joints);
        self.robot = next;
        self.tick += 1;

        let (frames, ee_depth) = if self.tick % self.cfg.frame_stride == 0 { self.render_frames() } else { (Vec::new(), None) };
        FeedbackPacket {
            tick: self.tick,
            robot: self.robot.clone(),
            phase: self.phase,
            ee_pose: self.chain.forward_kinematics(&self.robot.joints).expect("joints are clamped"),
            ik_status: self.ik_status,
            splat_version: self.splat_version,
            splat_stale: self.splat_stale,
            frames,
            ee_depth,
            events,
        }
    }

    fn render_frames(&mut self) -> (Vec<CameraFrame>, Option<DepthFrame>) {
        let cams = camera_poses(&self.chain, &self.robot, &self.rig).expect("joints are clamped");
        self.frame_seq += 1;
        let seq = self.frame_seq;
        let render = |cam: &PinholeCamera| {
            let opts = RenderOptions { workers: self.cfg.render_workers };
            crate::raster::render_with(&self.world, cam, self.cfg.background, &opts).image
        };
        let frames = vec![
            CameraFrame { camera: CameraId::Base, seq, image: render(&cams.base) },
            CameraFrame { camera: CameraId::Ee, seq, image: render(&cams.ee) },
        ];
        let depth = DepthFrame { seq, depth: crate::raster::render_depth(&self.world, &cams.ee) };
        (frames, Some(depth))
    }

    /// Capture, seed and train; on success enters manipulation with the new
    /// splat, otherwise falls back to locomotion.
    fn reconstruct(&mut self) -> SessionEvent {
        let result = self.try_reconstruct();
        match result {
            Ok((scene, report, final_loss)) => {
                let event = SessionEvent::ReconstructionFinished {
                    captures: report.views.len(),
                    skipped: report.skipped,
                    gaussians: scene.len(),
                    final_loss,
                };
                self.last_capture = Some(report);
                self.splat = Some(scene);
                self.splat_version += 1;
                self.splat_stale = false;
                self.alignment = Pose::identity();
                self.phase = Phase::Manipulation;
                event
            }
            Err(e) => {
                log::warn!("reconstruction failed: {e}");
                self.phase = Phase::Locomotion;
                SessionEvent::ReconstructionFailed { reason: e.to_string() }
            }
        }
    }

    fn try_reconstruct(&self) -> Result<(SplatScene, CaptureReport, f64), SessionError> {
        let report = run_capture_routine(self, &self.capture_plan()?)?;
        let seeded = seed_scene(&report.views, &[], &self.cfg.capture.seed, "base")?;
        let trained = train_splats(&report.views, &seeded, &self.cfg.capture.train)?;
        Ok((trained.scene, report, trained.final_loss))
    }
}

#[cfg(test)]
mod tests;
